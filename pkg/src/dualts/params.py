"""Named parameter registries and initializers."""

from __future__ import annotations

import hashlib
import math

import numpy as np

from .autograd import Tensor, get_default_dtype

NO_DECAY_MARKERS = ("norm", ".bn.", "cls_token", "pos_embedding")


def glorot_uniform(rng, fan_out, fan_in, dtype=None):
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    data = rng.uniform(-limit, limit, (fan_out, fan_in))
    return Tensor(data, requires_grad=True, dtype=dtype or get_default_dtype())


def normal(rng, shape, std, dtype=None):
    return Tensor(rng.normal(0.0, std, shape), requires_grad=True, dtype=dtype or get_default_dtype())


def constant(shape, value, dtype=None):
    return Tensor(np.full(shape, value), requires_grad=True, dtype=dtype or get_default_dtype())


def decays(name):
    """Whether decoupled weight decay applies to the parameter called ``name``."""
    return not name.endswith(".bias") and not any(m in name for m in NO_DECAY_MARKERS)


def clone(params):
    return {k: Tensor(v.data.copy(), requires_grad=v.requires_grad, name=k) for k, v in params.items()}


def snapshot(params):
    return {k: v.data.copy() for k, v in params.items()}


def restore(params, arrays):
    for k, v in params.items():
        v.data[...] = arrays[k]


def checksum(params):
    """SHA-256 over names, shapes and raw bytes, in sorted name order."""
    h = hashlib.sha256()
    for k in sorted(params):
        data = params[k].data if isinstance(params[k], Tensor) else np.asarray(params[k])
        h.update(k.encode())
        h.update(str(data.shape).encode())
        h.update(np.ascontiguousarray(data).tobytes())
    return h.hexdigest()


def zero_grads(params):
    for p in params.values():
        p.grad = None
