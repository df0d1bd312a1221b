"""Transformer encoder producing timestamp- and instance-level embeddings.

The input window is patched, a learnable [CLS] pseudo-patch is prepended,
tokens are projected to width ``d_model`` and offset by a learnable
positional table, then passed through pre-norm Transformer blocks. Row 0 of
the output is the instance embedding, rows ``1..T_p`` the timestamp
embeddings.

By default patch tokens are not allowed to attend to the [CLS] position
(``isolate_cls``). The [CLS] row still sees every patch. This keeps the
timestamp embeddings an exact function of the patches alone, so a loss on
them sends no gradient into the [CLS] token.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import NamedTuple

import numpy as np

from . import params as P
from .autograd import RngStream, Tensor, ops
from .data import PatchConfig
from .errors import ConfigInvalid, ShapeMismatch, TooFewEmbeddings, TooFewRows, UnknownMethod

POOLING_METHODS = ("cls", "last", "gap", "all")


@dataclass(frozen=True)
class EncoderConfig:
    d_model: int = 64
    n_blocks: int = 2
    n_heads: int = 4
    d_ff: int = 128
    dropout_embed: float = 0.1
    dropout_attn: float = 0.1
    dropout_ff: float = 0.1
    patch_len: int = 8
    stride: int = 8
    n_channels: int = 1
    seq_len: int = 64
    isolate_cls: bool = True

    def validate(self):
        if self.d_model < 1 or self.n_heads < 1 or self.d_model % self.n_heads:
            raise ConfigInvalid(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if self.n_blocks < 1:
            raise ConfigInvalid("n_blocks must be >= 1")
        if self.d_ff < 1 or self.n_channels < 1:
            raise ConfigInvalid("d_ff and n_channels must be positive")
        for name in ("dropout_embed", "dropout_attn", "dropout_ff"):
            p = getattr(self, name)
            if not 0.0 <= p < 1.0:
                raise ConfigInvalid(f"{name}={p} outside [0, 1)")
        self.patch_config.validate(self.seq_len)
        return self

    @property
    def patch_config(self):
        return PatchConfig(self.patch_len, self.stride)

    @property
    def n_patches(self):
        return self.patch_config.n_patches(self.seq_len)

    @property
    def token_dim(self):
        return self.n_channels * self.patch_len

    def to_dict(self):
        return asdict(self)


class DualEmbedding(NamedTuple):
    instance: Tensor      # [..., D]
    timestamp: Tensor     # [..., T_p, D]


def init_encoder(config, seed, prefix="encoder"):
    """Fresh encoder parameters; identical for identical ``(config, seed)``."""
    config.validate()
    rng = RngStream(seed, "init/encoder")
    D, F, CP, N = config.d_model, config.d_ff, config.token_dim, config.n_patches + 1
    out = {
        f"{prefix}.token_proj.weight": P.glorot_uniform(rng, D, CP),
        f"{prefix}.pos_embedding": P.normal(rng, (N, D), 0.02),
        f"{prefix}.cls_token": P.normal(rng, (CP,), 0.02),
    }
    for i in range(config.n_blocks):
        b = f"{prefix}.blocks.{i}"
        out[f"{b}.norm1.weight"] = P.constant((D,), 1.0)
        out[f"{b}.norm1.bias"] = P.constant((D,), 0.0)
        for proj in ("q", "k", "v", "o"):
            out[f"{b}.attn.{proj}.weight"] = P.glorot_uniform(rng, D, D)
            out[f"{b}.attn.{proj}.bias"] = P.constant((D,), 0.0)
        out[f"{b}.norm2.weight"] = P.constant((D,), 1.0)
        out[f"{b}.norm2.bias"] = P.constant((D,), 0.0)
        out[f"{b}.ff.fc1.weight"] = P.glorot_uniform(rng, F, D)
        out[f"{b}.ff.fc1.bias"] = P.constant((F,), 0.0)
        out[f"{b}.ff.fc2.weight"] = P.glorot_uniform(rng, D, F)
        out[f"{b}.ff.fc2.bias"] = P.constant((D,), 0.0)
    out[f"{prefix}.final_norm.weight"] = P.constant((D,), 1.0)
    out[f"{prefix}.final_norm.bias"] = P.constant((D,), 0.0)
    for k, v in out.items():
        v.name = k
    return out


def build_encoder_input(x_patched, params, prefix="encoder"):
    """Prepend the [CLS] token: ``[..., T_p, C*P] -> [..., 1+T_p, C*P]``."""
    cls = params[f"{prefix}.cls_token"]
    x_patched = x_patched if isinstance(x_patched, Tensor) else Tensor(np.asarray(x_patched), dtype=cls.dtype)
    if x_patched.shape[-1] != cls.shape[0]:
        raise ShapeMismatch(f"patch width {x_patched.shape[-1]} != token width {cls.shape[0]}")
    lead = x_patched.shape[:-2]
    cls_rows = ops.broadcast_to(ops.reshape(cls, (1,) * len(lead) + (1, cls.shape[0])),
                                lead + (1, cls.shape[0]))
    return ops.concatenate([cls_rows, x_patched], axis=-2)


def _attention_mask(n_tokens, isolate_cls, dtype):
    mask = np.zeros((n_tokens, n_tokens), dtype=dtype)
    if isolate_cls:
        mask[1:, 0] = -np.inf
    return mask


def _self_attention(h, params, b, config, training, rng, mask):
    B, N, D = h.shape
    H = config.n_heads
    dh = D // H

    def heads(name):
        t = ops.linear(h, params[f"{b}.attn.{name}.weight"], params[f"{b}.attn.{name}.bias"])
        return ops.transpose(ops.reshape(t, (B, N, H, dh)), (0, 2, 1, 3))

    q, k, v = heads("q"), heads("k"), heads("v")
    scores = ops.scale(ops.matmul(q, ops.swapaxes(k, -1, -2)), 1.0 / math.sqrt(dh))
    weights = ops.softmax(ops.add(scores, mask), axis=-1)
    weights = ops.dropout(weights, config.dropout_attn, training, rng)
    ctx = ops.reshape(ops.transpose(ops.matmul(weights, v), (0, 2, 1, 3)), (B, N, D))
    return ops.linear(ctx, params[f"{b}.attn.o.weight"], params[f"{b}.attn.o.bias"])


def _feed_forward(h, params, b, config, training, rng):
    hidden = ops.gelu(ops.linear(h, params[f"{b}.ff.fc1.weight"], params[f"{b}.ff.fc1.bias"]))
    hidden = ops.dropout(hidden, config.dropout_ff, training, rng)
    return ops.linear(hidden, params[f"{b}.ff.fc2.weight"], params[f"{b}.ff.fc2.bias"])


def encode(x_enc_in, params, config, training=False, rng=None, prefix="encoder"):
    """Run the encoder on ``[B, 1+T_p, C*P]`` (or unbatched ``[1+T_p, C*P]``) input."""
    squeeze = x_enc_in.ndim == 2
    if squeeze:
        x_enc_in = ops.reshape(x_enc_in, (1,) + x_enc_in.shape)
    n_tokens = config.n_patches + 1
    if x_enc_in.shape[-2] != n_tokens:
        raise ShapeMismatch(f"encoder expects {n_tokens} tokens, got {x_enc_in.shape[-2]}")
    if training and rng is None:
        raise ValueError("training mode needs an RngStream for dropout")

    h = ops.matmul(x_enc_in, ops.transpose(params[f"{prefix}.token_proj.weight"]))
    h = ops.add(h, params[f"{prefix}.pos_embedding"])
    h = ops.dropout(h, config.dropout_embed, training, rng)
    mask = _attention_mask(n_tokens, config.isolate_cls, h.dtype)
    for i in range(config.n_blocks):
        b = f"{prefix}.blocks.{i}"
        a = ops.layer_norm(h, params[f"{b}.norm1.weight"], params[f"{b}.norm1.bias"])
        h = ops.add(h, _self_attention(a, params, b, config, training, rng, mask))
        f = ops.layer_norm(h, params[f"{b}.norm2.weight"], params[f"{b}.norm2.bias"])
        h = ops.add(h, _feed_forward(f, params, b, config, training, rng))
    z = ops.layer_norm(h, params[f"{prefix}.final_norm.weight"], params[f"{prefix}.final_norm.bias"])
    if squeeze:
        z = ops.reshape(z, z.shape[1:])
    return z


def split_embeddings(z):
    if z.shape[-2] < 2:
        raise TooFewRows(f"need at least 2 token rows to split, got {z.shape[-2]}")
    return DualEmbedding(z[..., 0, :], z[..., 1:, :])


def embed(x_patched, params, config, training=False, rng=None, prefix="encoder"):
    """Patches -> :class:`DualEmbedding` in one call."""
    x = build_encoder_input(x_patched, params, prefix)
    return split_embeddings(encode(x, params, config, training, rng, prefix))


def pool(z_t, method):
    """Instance embedding derived from timestamp embeddings ``[..., T_p, D]``.

    ``last`` takes row ``T_p - 1``, ``gap`` averages over time and ``all``
    flattens the rows in order to ``T_p * D`` values.
    """
    if z_t.shape[-2] < 1:
        raise TooFewRows("pooling needs at least one timestamp embedding")
    if method == "last":
        return z_t[..., -1, :]
    if method == "gap":
        return ops.mean(z_t, axis=-2)
    if method == "all":
        return ops.reshape(z_t, z_t.shape[:-2] + (z_t.shape[-2] * z_t.shape[-1],))
    raise UnknownMethod(f"unknown pooling method {method!r}; expected last, gap or all")


def instance_embedding(dual, method="cls"):
    return dual.instance if method == "cls" else pool(dual.timestamp, method)


def anisotropy_score(embeddings):
    """Mean cosine similarity over all unordered pairs of rows."""
    E = np.asarray(embeddings.data if isinstance(embeddings, Tensor) else embeddings, dtype=np.float64)
    if E.ndim != 2 or E.shape[0] < 2:
        raise TooFewEmbeddings(f"need an [N >= 2, d] matrix, got shape {E.shape}")
    norms = np.maximum(np.linalg.norm(E, axis=1, keepdims=True), 1e-12)
    U = E / norms
    G = U @ U.T
    n = E.shape[0]
    iu = np.triu_indices(n, k=1)
    return float(np.clip(G[iu].mean(), -1.0, 1.0))
