"""Numerical guards used by normalization and similarity primitives."""

from types import MappingProxyType

EPS = MappingProxyType({
    "layer_norm": 1e-5,
    "batch_norm": 1e-5,
    "cosine": 1e-8,
    "instance_norm": 1e-5,
})

BATCH_NORM_MOMENTUM = 0.1
