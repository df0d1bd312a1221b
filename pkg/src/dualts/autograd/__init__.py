"""Reverse-mode automatic differentiation over numpy arrays."""

from . import ops
from .gradcheck import finite_difference_grad, relative_error
from .ops import (
    add, batch_norm_1d, broadcast_to, concatenate, cosine_similarity, cross_entropy,
    detach, div, dropout, exp, gelu, getitem, layer_norm, linear, log, log_softmax,
    matmul, mean, mse, mul, neg, relu, reshape, scale, softmax, sqrt, square, stack,
    sub, swapaxes, transpose,
)
from .ops import sum as sum_  # noqa: F401
from .rng import RngStream
from .tensor import (
    Tape, Tensor, active_tape, as_tensor, backward, get_default_dtype, precision,
    set_default_dtype,
)

__all__ = [
    "Tape", "Tensor", "RngStream", "active_tape", "as_tensor", "backward",
    "finite_difference_grad", "get_default_dtype", "ops", "precision",
    "relative_error", "set_default_dtype",
    "add", "batch_norm_1d", "broadcast_to", "concatenate", "cosine_similarity",
    "cross_entropy", "detach", "div", "dropout", "exp", "gelu", "getitem",
    "layer_norm", "linear", "log", "log_softmax", "matmul", "mean", "mse", "mul",
    "neg", "relu", "reshape", "scale", "softmax", "sqrt", "square", "stack", "sub",
    "sum_", "swapaxes", "transpose",
]
