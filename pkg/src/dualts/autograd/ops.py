"""Differentiable primitives.

Each function computes its forward value with numpy and, when a tape is
active and an input needs a gradient, records a closure mapping the output
gradient to one gradient per input (``None`` for inputs that get nothing).
"""

from __future__ import annotations

import math

import numpy as np

from ..constants import BATCH_NORM_MOMENTUM, EPS
from ..errors import DegenerateBatch, InvalidProbability, ShapeMismatch
from .tensor import Tensor, as_tensor, record

_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)
_GELU_C = 0.044715


def _lift(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return as_tensor(np.asarray(x, dtype=dtype) if dtype is not None else x)


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` (reverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- elementwise arithmetic ---------------------------------------------------

def add(a, b):
    a, b = _binary(a, b)
    sa, sb = a.shape, b.shape
    return record("add", a.data + b.data, (a, b),
                  lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b):
    a, b = _binary(a, b)
    sa, sb = a.shape, b.shape
    return record("sub", a.data - b.data, (a, b),
                  lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b):
    a, b = _binary(a, b)
    ad, bd = a.data, b.data

    def backward(g):
        return (_unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(g * ad, bd.shape) if b.requires_grad else None)

    return record("mul", ad * bd, (a, b), backward)


def div(a, b):
    a, b = _binary(a, b)
    ad, bd = a.data, b.data

    def backward(g):
        return (_unbroadcast(g / bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(-g * ad / (bd * bd), bd.shape) if b.requires_grad else None)

    return record("div", ad / bd, (a, b), backward)


def neg(a):
    return record("neg", -a.data, (a,), lambda g: (-g,))


def scale(a, c):
    """Multiply by a constant scalar."""
    c = float(c)
    return record("scale", a.data * c, (a,), lambda g: (g * c,))


def _binary(a, b):
    if isinstance(a, Tensor):
        return a, _lift(b, a)
    b = _lift(b)
    return _lift(a, b), b


def exp(a):
    out = np.exp(a.data)
    return record("exp", out, (a,), lambda g: (g * out,))


def log(a):
    x = a.data
    return record("log", np.log(x), (a,), lambda g: (g / x,))


def sqrt(a):
    out = np.sqrt(a.data)
    return record("sqrt", out, (a,), lambda g: (g * 0.5 / out,))


def square(a):
    x = a.data
    return record("square", x * x, (a,), lambda g: (2.0 * g * x,))


def relu(a):
    x = a.data
    mask = x > 0
    return record("relu", np.where(mask, x, 0).astype(x.dtype), (a,), lambda g: (g * mask,))


def gelu(a):
    """GELU, tanh approximation."""
    x = a.data
    inner = _SQRT_2_OVER_PI * (x + _GELU_C * x ** 3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def backward(g):
        dinner = _SQRT_2_OVER_PI * (1.0 + 3.0 * _GELU_C * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return record("gelu", out, (a,), backward)


# -- linear algebra and shape -------------------------------------------------

def matmul(a, b):
    a, b = _binary(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeMismatch(f"matmul needs operands with ndim >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeMismatch(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise ShapeMismatch(f"matmul batch extents not broadcastable: {a.shape} @ {b.shape}") from exc
    ad, bd = a.data, b.data

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(bd, -1, -2)), ad.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(ad, -1, -2), g), bd.shape)
        return ga, gb

    return record("matmul", out, (a, b), backward)


def transpose(a, axes=None):
    if axes is None:
        axes = tuple(range(a.ndim))[::-1]
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return record("transpose", np.transpose(a.data, axes), (a,),
                  lambda g: (np.transpose(g, inverse),))


def swapaxes(a, i, j):
    axes = list(range(a.ndim))
    axes[i], axes[j] = axes[j], axes[i]
    return transpose(a, axes)


def reshape(a, shape):
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeMismatch(str(exc)) from exc
    return record("reshape", out, (a,), lambda g: (g.reshape(src),))


def broadcast_to(a, shape):
    src = a.shape
    try:
        out = np.broadcast_to(a.data, shape)
    except ValueError as exc:
        raise ShapeMismatch(str(exc)) from exc
    return record("broadcast_to", out, (a,), lambda g: (_unbroadcast(g, src),))


def _is_basic_index(index):
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (int, np.integer, slice, type(None), type(Ellipsis))) for i in items)


def getitem(a, index):
    if isinstance(index, Tensor):
        index = index.data
    x = a.data
    basic = _is_basic_index(index)

    def backward(g):
        full = np.zeros_like(x)
        if basic:
            full[index] += g
        else:
            np.add.at(full, index, g)
        return (full,)

    return record("getitem", x[index], (a,), backward)


def concatenate(tensors, axis=0):
    tensors = [_lift(t) for t in tensors]
    datas = [t.data for t in tensors]
    try:
        out = np.concatenate(datas, axis=axis)
    except ValueError as exc:
        raise ShapeMismatch(str(exc)) from exc
    splits = np.cumsum([d.shape[axis] for d in datas])[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return record("concatenate", out, tuple(tensors), backward)


def stack(tensors, axis=0):
    tensors = [_lift(t) for t in tensors]
    expanded = [reshape(t, t.shape[:axis % (t.ndim + 1)] + (1,) + t.shape[axis % (t.ndim + 1):])
                for t in tensors]
    return concatenate(expanded, axis=axis)


# -- reductions ---------------------------------------------------------------

def _normalize_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum(a, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy
    x = a.data
    axes = _normalize_axis(axis, x.ndim)
    out = x.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).copy(),)

    return record("sum", np.asarray(out), (a,), backward)


def mean(a, axis=None, keepdims=False):
    x = a.data
    axes = _normalize_axis(axis, x.ndim)
    count = int(np.prod([x.shape[ax] for ax in axes])) if axes else 1
    out = x.mean(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, x.shape).copy(),)

    return record("mean", np.asarray(out), (a,), backward)


# -- normalization and attention pieces ---------------------------------------

def softmax(a, axis=-1):
    x = a.data
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return record("softmax", y, (a,), backward)


def log_softmax(a, axis=-1):
    x = a.data
    shifted = x - x.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    probs = np.exp(out)

    def backward(g):
        return (g - probs * g.sum(axis=axis, keepdims=True),)

    return record("log_softmax", out, (a,), backward)


def layer_norm(a, gamma, beta, eps=None):
    """Normalize over the last axis, then apply the affine ``gamma``/``beta``."""
    eps = EPS["layer_norm"] if eps is None else eps
    gamma, beta = _lift(gamma, a), _lift(beta, a)
    n = a.shape[-1]
    if gamma.shape != (n,) or beta.shape != (n,):
        raise ShapeMismatch(f"layer_norm affine params must have shape ({n},)")
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    centered = x - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    gd = gamma.data

    def backward(g):
        dxhat = g * gd
        dx = inv_std * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return (dx,
                (g * xhat).sum(axis=lead) if gamma.requires_grad else None,
                g.sum(axis=lead) if beta.requires_grad else None)

    return record("layer_norm", xhat * gd + beta.data, (a, gamma, beta), backward)


def batch_norm_1d(a, gamma, beta, running_mean, running_var, training,
                  momentum=BATCH_NORM_MOMENTUM, eps=None):
    """Batch normalization over axis 0 of a ``[B, F]`` input.

    In training mode the biased batch variance normalizes and the running
    statistics (numpy arrays, updated in place) move toward the batch mean and
    the unbiased batch variance with the given momentum.
    """
    eps = EPS["batch_norm"] if eps is None else eps
    gamma, beta = _lift(gamma, a), _lift(beta, a)
    if a.ndim != 2:
        raise ShapeMismatch(f"batch_norm_1d expects [B, F], got {a.shape}")
    x = a.data
    gd = gamma.data
    if training:
        b = x.shape[0]
        if b < 2:
            raise DegenerateBatch(f"batch norm in training mode needs B >= 2, got {b}")
        mu = x.mean(axis=0)
        centered = x - mu
        var = (centered * centered).mean(axis=0)
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = centered * inv_std
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * var * b / (b - 1)

        def backward(g):
            dxhat = g * gd
            dx = inv_std * (dxhat - dxhat.mean(axis=0) - xhat * (dxhat * xhat).mean(axis=0))
            return (dx,
                    (g * xhat).sum(axis=0) if gamma.requires_grad else None,
                    g.sum(axis=0) if beta.requires_grad else None)
    else:
        inv_std = 1.0 / np.sqrt(running_var + eps)
        xhat = (x - running_mean) * inv_std

        def backward(g):
            return (g * gd * inv_std,
                    (g * xhat).sum(axis=0) if gamma.requires_grad else None,
                    g.sum(axis=0) if beta.requires_grad else None)

    return record("batch_norm_1d", (xhat * gd + beta.data).astype(x.dtype), (a, gamma, beta), backward)


def dropout(a, p, training, rng):
    """Inverted dropout: survivors are scaled by ``1/(1-p)``; eval mode is the identity."""
    if not 0.0 <= p < 1.0:
        raise InvalidProbability(f"dropout probability must lie in [0, 1), got {p}")
    if not training or p == 0.0:
        return a
    keep = rng.random(a.shape) >= p
    factor = (keep / (1.0 - p)).astype(a.dtype)
    return record("dropout", a.data * factor, (a,), lambda g: (g * factor,))


def cosine_similarity(a, b, eps=None, axis=-1):
    """Cosine similarity along ``axis`` with each norm clamped below by ``eps``."""
    eps = EPS["cosine"] if eps is None else eps
    a, b = _binary(a, b)
    if a.shape != b.shape:
        raise ShapeMismatch(f"cosine_similarity: shapes {a.shape} and {b.shape} differ")
    ad, bd = a.data, b.data
    dot = (ad * bd).sum(axis=axis, keepdims=True)
    na_raw = np.sqrt((ad * ad).sum(axis=axis, keepdims=True))
    nb_raw = np.sqrt((bd * bd).sum(axis=axis, keepdims=True))
    na, nb = np.maximum(na_raw, eps), np.maximum(nb_raw, eps)
    cos = dot / (na * nb)

    def backward(g):
        g = np.expand_dims(g, axis)
        ga = gb = None
        if a.requires_grad:
            ga = g * (bd / (na * nb) - cos * ad / (na * na) * (na_raw > eps))
        if b.requires_grad:
            gb = g * (ad / (na * nb) - cos * bd / (nb * nb) * (nb_raw > eps))
        return ga, gb

    return record("cosine_similarity", np.squeeze(cos, axis=axis), (a, b), backward)


def detach(a):
    """Same values, cut from the tape; nothing flows back through the result."""
    return Tensor(a.data, requires_grad=False)


# -- composite losses ---------------------------------------------------------

def mse(pred, target):
    pred, target = _binary(pred, target)
    if pred.shape != target.shape:
        raise ShapeMismatch(f"mse: shapes {pred.shape} and {target.shape} differ")
    return mean(square(sub(pred, target)))


def cross_entropy(logits, labels):
    """Mean softmax cross-entropy of ``[N, K]`` logits against integer labels."""
    labels = np.asarray(labels, dtype=np.int64)
    logp = log_softmax(logits, axis=-1)
    picked = getitem(logp, (np.arange(labels.shape[0]), labels))
    return neg(mean(picked))


def linear(x, weight, bias=None):
    """``x @ weight.T + bias`` with ``weight`` laid out ``[out, in]``."""
    out = matmul(x, transpose(weight))
    return add(out, bias) if bias is not None else out

