"""Input checks shared by the estimator classes."""

from __future__ import annotations

import numpy as np

from .errors import LengthMismatch, ShapeMismatch


def check_windows(X, name="X", seq_len=None, n_channels=None):
    """Return ``X`` as a finite float64 ``[N, T, C]`` array.

    A 2-D input is read as ``N`` univariate windows of length ``T``.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 2:
        X = X[:, :, None]
    if X.ndim != 3:
        raise ShapeMismatch(f"{name} must be [N, T] or [N, T, C], got shape {X.shape}")
    if X.shape[0] == 0:
        raise ShapeMismatch(f"{name} has no windows")
    if not np.all(np.isfinite(X)):
        raise ValueError(f"{name} contains NaN or infinite values")
    if seq_len is not None and X.shape[1] != seq_len:
        raise ShapeMismatch(f"{name} windows have length {X.shape[1]}, fitted on {seq_len}")
    if n_channels is not None and X.shape[2] != n_channels:
        raise ShapeMismatch(f"{name} has {X.shape[2]} channels, fitted on {n_channels}")
    return X


def check_labels(y, n, name="y"):
    y = np.asarray(y)
    if y.ndim != 1 or len(y) != n:
        raise LengthMismatch(f"{name} must be 1-D with {n} entries, got shape {y.shape}")
    return y


def check_targets(Y, n, name="Y"):
    """Forecast targets as float64 ``[N, H, C]`` (2-D means one channel)."""
    Y = np.asarray(Y, dtype=np.float64)
    if Y.ndim == 2:
        Y = Y[:, :, None]
    if Y.ndim != 3 or len(Y) != n:
        raise LengthMismatch(f"{name} must be [N, H, C] with N={n}, got shape {Y.shape}")
    return Y


def holdout_indices(n, fraction, seed, labels=None):
    """Seeded ``(train_idx, val_idx)`` split; stratified when ``labels`` is given."""
    rng = np.random.default_rng(seed)
    if labels is None:
        perm = rng.permutation(n)
        k = max(1, int(round(fraction * n)))
        return np.sort(perm[k:]), np.sort(perm[:k])
    val = []
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        idx = idx[rng.permutation(len(idx))]
        k = int(round(fraction * len(idx)))
        if len(idx) > 1:
            k = min(max(1, k), len(idx) - 1)
        else:
            k = 0
        val.extend(idx[:k])
    val = np.sort(np.asarray(val, dtype=np.int64))
    return np.setdiff1d(np.arange(n), val), val


__all__ = ["check_labels", "check_targets", "check_windows", "holdout_indices"]
