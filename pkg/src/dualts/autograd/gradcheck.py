"""Central finite differences, the reference for every analytic gradient."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor


def _value(out):
    if isinstance(out, Tensor):
        out = out.data
    return float(np.asarray(out).reshape(()))


def finite_difference_grad(f, x, h=1e-5, indices=None, richardson=False, min_h=None):
    """Estimate d f / d x by ``(f(x + h e_i) - f(x - h e_i)) / 2h``.

    ``f`` is called with ``x`` after its data has been perturbed in place, so
    it may equally be a closure over ``x`` (e.g. a model parameter). Any
    stochastic layer inside ``f`` must be pinned (fresh seeded stream per
    call, or eval mode). With ``indices`` (flat positions) only those
    coordinates are estimated; the rest of the returned array is zero.

    ``richardson=True`` combines the steps ``h`` and ``h/2`` as
    ``(4 D(h/2) - D(h)) / 3``, cancelling the ``h**2`` truncation term. Worth
    it for strongly curved losses (small-batch BatchNorm) at a fixed ``h``.
    If ``min_h`` is also given, a coordinate whose two estimates disagree by
    more than smooth truncation allows (a ReLU kink inside ``+-h``) is
    retried with a ten times smaller step, down to ``min_h``.
    """
    data = x.data
    flat = data.reshape(-1)
    grad = np.zeros(data.size, dtype=np.float64)
    positions = range(data.size) if indices is None else indices

    def central(i, step):
        orig = flat[i]
        flat[i] = orig + step
        up = _value(f(x))
        flat[i] = orig - step
        down = _value(f(x))
        flat[i] = orig
        return (up - down) / (2.0 * step)

    for i in positions:
        if richardson:
            step = h
            while True:
                coarse, fine = central(i, step), central(i, step / 2)
                smooth = abs(coarse - fine) <= 1e-3 * max(abs(fine), 1e-3)
                if smooth or min_h is None or step / 10 < min_h:
                    break
                step /= 10
            grad[i] = (4.0 * fine - coarse) / 3.0
        else:
            grad[i] = central(i, h)
    return grad.reshape(data.shape)


def relative_error(analytic, numeric, floor=1e-6):
    """``||a - n|| / max(||a||, ||n||, floor)``.

    The floor keeps gradients that vanish analytically (a bias feeding a
    softmax, a bias ahead of batch norm) from turning finite-difference
    rounding noise into a relative error of 1.
    """
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    denom = max(np.linalg.norm(a), np.linalg.norm(n), floor)
    return float(np.linalg.norm(a - n) / denom)
