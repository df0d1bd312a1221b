"""Pretext heads and losses.

The predictive head is a bare linear map from each timestamp embedding back
to its patch. The contrastive head is a bottleneck MLP (linear, BatchNorm,
ReLU, linear) applied to one view's instance embedding and compared by
cosine against the other view's instance embedding held constant.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from . import params as P
from .autograd import RngStream, Tensor, ops
from .encoder import DualEmbedding, EncoderConfig, embed, init_encoder, instance_embedding, POOLING_METHODS
from .errors import ConfigInvalid, DegenerateBatch


def bottleneck_width(d_in):
    """A quarter of the input width, at least 8, and always strictly below ``d_in``."""
    width = max(8, d_in // 4)
    if width >= d_in:
        width = max(1, d_in // 2)
    return width


def init_predictive_head(d_model, token_dim, seed, prefix="pred_head"):
    rng = RngStream(seed, "init/pred_head")
    return {
        f"{prefix}.weight": P.glorot_uniform(rng, token_dim, d_model),
        f"{prefix}.bias": P.constant((token_dim,), 0.0),
    }


def init_contrastive_head(d_in, seed, prefix="contrast_head"):
    rng = RngStream(seed, "init/contrast_head")
    db = bottleneck_width(d_in)
    params = {
        f"{prefix}.fc1.weight": P.glorot_uniform(rng, db, d_in),
        f"{prefix}.fc1.bias": P.constant((db,), 0.0),
        f"{prefix}.bn.weight": P.constant((db,), 1.0),
        f"{prefix}.bn.bias": P.constant((db,), 0.0),
        f"{prefix}.fc2.weight": P.glorot_uniform(rng, d_in, db),
        f"{prefix}.fc2.bias": P.constant((d_in,), 0.0),
    }
    dtype = params[f"{prefix}.fc1.weight"].dtype
    buffers = {
        f"{prefix}.bn.running_mean": np.zeros(db, dtype=dtype),
        f"{prefix}.bn.running_var": np.ones(db, dtype=dtype),
    }
    return params, buffers


def predictive_head(z_t, params, prefix="pred_head"):
    return ops.linear(z_t, params[f"{prefix}.weight"], params[f"{prefix}.bias"])


def contrastive_head(z, params, buffers, training, prefix="contrast_head"):
    h = ops.linear(z, params[f"{prefix}.fc1.weight"], params[f"{prefix}.fc1.bias"])
    h = ops.batch_norm_1d(h, params[f"{prefix}.bn.weight"], params[f"{prefix}.bn.bias"],
                          buffers[f"{prefix}.bn.running_mean"], buffers[f"{prefix}.bn.running_var"],
                          training)
    h = ops.relu(h)
    return ops.linear(h, params[f"{prefix}.fc2.weight"], params[f"{prefix}.fc2.bias"])


class DualLevelModel:
    """Encoder plus both pretext heads, held in one flat parameter registry.

    ``pooling`` selects where the instance embedding comes from: the [CLS]
    row (default) or one of the pooling alternatives over timestamp
    embeddings.
    """

    def __init__(self, config, params, buffers, pooling="cls", pretrained=False):
        if pooling not in POOLING_METHODS:
            raise ConfigInvalid(f"unknown pooling {pooling!r}")
        self.config = config
        self.params = params
        self.buffers = buffers
        self.pooling = pooling
        self.pretrained = pretrained

    @classmethod
    def init(cls, config, seed, pooling="cls"):
        config.validate()
        params = init_encoder(config, seed)
        params.update(init_predictive_head(config.d_model, config.token_dim, seed))
        d_inst = config.d_model * (config.n_patches if pooling == "all" else 1)
        head, buffers = init_contrastive_head(d_inst, seed)
        params.update(head)
        for k, v in params.items():
            v.name = k
        return cls(config, params, buffers, pooling)

    @property
    def instance_dim(self):
        return self.config.d_model * (self.config.n_patches if self.pooling == "all" else 1)

    def encoder_params(self):
        return {k: v for k, v in self.params.items() if k.startswith("encoder.")}

    def embed(self, x_patched, training=False, rng=None):
        return embed(x_patched, self.params, self.config, training, rng)

    def instance(self, dual):
        return instance_embedding(dual, self.pooling)

    def copy(self):
        return DualLevelModel(self.config, P.clone(self.params),
                              {k: v.copy() for k, v in self.buffers.items()}, self.pooling, self.pretrained)


@dataclass
class LossBreakdown:
    L_P1: object
    L_P2: object
    L_P: object
    L_C1: object
    L_C2: object
    L_C: object
    total: object
    lam: float = 1.0

    def to_dict(self):
        def f(v):
            return float(v.item()) if isinstance(v, Tensor) else float(v)
        return {fl.name: f(getattr(self, fl.name)) for fl in fields(self)}


def predictive_loss(z_t, x_patched, params, prefix="pred_head"):
    """Mean squared reconstruction error of every patch value from its timestamp embedding."""
    pred = predictive_head(z_t, params, prefix)
    target = x_patched if isinstance(x_patched, Tensor) else Tensor(np.asarray(x_patched), dtype=pred.dtype)
    return ops.mse(pred, target)


def two_view_forward(x_patched, model, rng, x_patched_2=None):
    """Two training-mode encoder passes with independent dropout masks.

    Both passes see the same patches unless ``x_patched_2`` supplies a
    separately augmented second input.
    """
    first = model.embed(x_patched, training=True, rng=rng)
    second = model.embed(x_patched if x_patched_2 is None else x_patched_2, training=True, rng=rng)
    return first, second


def contrastive_loss(z1_i, z2_i, params, buffers, training=True, stop_gradient=True,
                     use_head=True, prefix="contrast_head", targets=None):
    """Symmetric negative cosine between each view's head output and the other view.

    Returns ``(L_C1, L_C2, L_C)``, each averaged over the batch. ``targets``
    replaces the two stop-gradient branches with fixed arrays ``(t1, t2)``;
    gradient checks use it to freeze those branches at a base point.
    """
    if z1_i.ndim == 1:
        z1_i, z2_i = ops.reshape(z1_i, (1, -1)), ops.reshape(z2_i, (1, -1))
    if training and use_head and z1_i.shape[0] < 2:
        raise DegenerateBatch("contrastive head BatchNorm needs a batch of at least 2 in training mode")
    if use_head:
        p1 = contrastive_head(z1_i, params, buffers, training, prefix)
        p2 = contrastive_head(z2_i, params, buffers, training, prefix)
    else:
        p1, p2 = z1_i, z2_i
    if targets is not None:
        t1, t2 = (Tensor(np.reshape(t, z1_i.shape), dtype=z1_i.dtype) for t in targets)
    else:
        t2 = ops.detach(z2_i) if stop_gradient else z2_i
        t1 = ops.detach(z1_i) if stop_gradient else z1_i
    l1 = ops.neg(ops.mean(ops.cosine_similarity(p1, t2)))
    l2 = ops.neg(ops.mean(ops.cosine_similarity(p2, t1)))
    return l1, l2, ops.scale(ops.add(l1, l2), 0.5)


def total_loss(L_P1, L_P2, L_C1, L_C2, lam=1.0):
    """Average each task over its two views and combine as ``L_P + lam * L_C``."""
    if lam < 0:
        raise ValueError(f"lambda must be >= 0, got {lam}")
    if isinstance(L_P1, Tensor):
        L_P = ops.scale(ops.add(L_P1, L_P2), 0.5)
        L_C = ops.scale(ops.add(L_C1, L_C2), 0.5)
        total = ops.add(L_P, ops.scale(L_C, lam))
    else:
        L_P = 0.5 * L_P1 + 0.5 * L_P2
        L_C = 0.5 * L_C1 + 0.5 * L_C2
        total = L_P + lam * L_C
    return LossBreakdown(L_P1, L_P2, L_P, L_C1, L_C2, L_C, total, lam)


def pretext_losses(model, x1, rng, lam=1.0, stop_gradient=True, training=True, x2=None,
                   targets=None, return_views=False):
    """Full two-view objective for one batch of patched inputs.

    ``training`` controls BatchNorm in the contrastive head; encoder dropout
    is always active because the two views need it.
    """
    v1, v2 = two_view_forward(x1, model, rng, x2)
    lp1 = predictive_loss(v1.timestamp, x1, model.params)
    lp2 = predictive_loss(v2.timestamp, x1 if x2 is None else x2, model.params)
    lc1, lc2, _ = contrastive_loss(model.instance(v1), model.instance(v2), model.params,
                                   model.buffers, training, stop_gradient, targets=targets)
    out = total_loss(lp1, lp2, lc1, lc2, lam)
    return (out, (v1, v2)) if return_views else out


__all__ = [
    "DualEmbedding", "DualLevelModel", "EncoderConfig", "LossBreakdown", "bottleneck_width",
    "contrastive_head", "contrastive_loss", "init_contrastive_head", "init_predictive_head",
    "predictive_head", "predictive_loss", "pretext_losses", "total_loss", "two_view_forward",
]
