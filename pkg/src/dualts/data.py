"""Dataset ingestion, splitting, windowing, normalization and patching.

Forecasting datasets are one long ``[T_total, C]`` matrix that is split
chronologically and cut into sliding windows. Classification datasets are a
stack of fixed-length instances ``[N, T, C]`` with one label each.

Patch layout: a patch covering timesteps ``t .. t+P-1`` of a ``[T, C]``
window flattens to ``C*P`` values with the channel index varying slowest, so
entry ``c*P + j`` holds channel ``c`` at time ``t + j``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .autograd.rng import RngStream
from .constants import EPS
from .errors import (
    ConfigInvalid, EmptyDataset, InvalidFraction, InvalidParam, ParseError,
    TooShort, TooSmall, UnknownMethod,
)

AUGMENTATIONS = ("jitter", "scaling", "rotation", "permutation", "masking", "cropping")


@dataclass(frozen=True)
class TimeSeriesDataset:
    """``values`` is ``[T_total, C]`` for forecasting or ``[N, T, C]`` for classification."""

    values: np.ndarray
    labels: Optional[np.ndarray] = None
    feature_names: tuple = ()
    frequency_note: str = ""

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim not in (2, 3) or values.size == 0:
            raise EmptyDataset(f"dataset values must be non-empty 2-D or 3-D, got shape {values.shape}")
        if np.isnan(values).any():
            raise ParseError(int(np.argwhere(np.isnan(values))[0][0]), None, "NaN value")
        object.__setattr__(self, "values", values)
        if self.labels is not None:
            labels = np.asarray(self.labels, dtype=np.int64)
            if values.ndim != 3 or labels.shape != (values.shape[0],):
                raise ValueError("labels need [N, T, C] values and exactly one label per instance")
            object.__setattr__(self, "labels", labels)
        if not self.feature_names:
            object.__setattr__(self, "feature_names",
                               tuple(f"c{i}" for i in range(values.shape[-1])))

    @property
    def is_classification(self):
        return self.labels is not None

    @property
    def n_channels(self):
        return self.values.shape[-1]

    def __len__(self):
        return self.values.shape[0]

    def subset(self, index):
        """Rows (forecasting) or instances (classification) selected by ``index``."""
        labels = None if self.labels is None else self.labels[index]
        return replace(self, values=self.values[index], labels=labels)


@dataclass
class WindowSample:
    x: np.ndarray
    target: object
    label_available: bool = True
    start: int = 0


@dataclass(frozen=True)
class PatchConfig:
    patch_len: int
    stride: int
    pad_policy: str = "end-replication"

    def validate(self, T):
        if not 1 <= self.stride <= self.patch_len <= T:
            raise ConfigInvalid(
                f"patching needs 1 <= stride <= patch_len <= T, got S={self.stride}, P={self.patch_len}, T={T}")
        if self.pad_policy != "end-replication":
            raise ConfigInvalid(f"unsupported pad policy {self.pad_policy!r}")

    def n_patches(self, T):
        self.validate(T)
        return (T - self.patch_len) // self.stride + 2


@dataclass(frozen=True)
class NormStats:
    mean: np.ndarray
    std: np.ndarray

    def apply_inverse(self, x):
        return x * self.std + self.mean


# -- loading -------------------------------------------------------------------

def load_csv(path, has_header=True, timestamp_column=None, label_column=None,
             instance_column=None, frequency_note=""):
    """Read a comma-separated numeric file.

    Without ``label_column`` every row is one timestep of a forecasting
    series. With ``label_column`` and no ``instance_column`` each row is one
    univariate instance whose value columns are its timesteps. With both,
    rows are grouped by ``instance_column`` (long format: one row per
    timestep, columns are channels).
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        rows = [r for r in csv.reader(fh) if r and any(cell.strip() for cell in r)]
    if has_header:
        if not rows:
            raise EmptyDataset(f"{path}: no header")
        header, rows = [c.strip() for c in rows[0]], rows[1:]
    else:
        width = len(rows[0]) if rows else 0
        header = [str(i) for i in range(width)]
    if not rows:
        raise EmptyDataset(f"{path}: no data rows")

    def col_index(name):
        if name is None:
            return None
        key = str(name)
        if key in header:
            return header.index(key)
        raise ParseError(0, key, "column not found in header")

    ts_i, label_i, inst_i = col_index(timestamp_column), col_index(label_column), col_index(instance_column)
    skip = {i for i in (ts_i, label_i, inst_i) if i is not None}
    value_cols = [i for i in range(len(header)) if i not in skip]
    if not value_cols:
        raise EmptyDataset(f"{path}: no value columns")

    values = np.empty((len(rows), len(value_cols)))
    labels, instances = [], []
    for r, row in enumerate(rows, start=2 if has_header else 1):
        if len(row) != len(header):
            raise ParseError(r, None, f"expected {len(header)} fields, found {len(row)}")
        for j, c in enumerate(value_cols):
            cell = row[c].strip()
            try:
                v = float(cell)
            except ValueError:
                raise ParseError(r, header[c], f"non-numeric value {cell!r}") from None
            if math.isnan(v) or math.isinf(v):
                raise ParseError(r, header[c], "NaN or infinite value")
            values[r - (2 if has_header else 1), j] = v
        if label_i is not None:
            try:
                labels.append(int(float(row[label_i])))
            except ValueError:
                raise ParseError(r, header[label_i], f"non-integer label {row[label_i]!r}") from None
        if inst_i is not None:
            instances.append(row[inst_i].strip())

    names = tuple(header[c] for c in value_cols)
    if label_i is None:
        return TimeSeriesDataset(values, None, names, frequency_note)
    if inst_i is None:
        return TimeSeriesDataset(values[:, :, None], np.asarray(labels), ("value",), frequency_note)

    order = list(dict.fromkeys(instances))
    groups = {k: [] for k in order}
    for i, key in enumerate(instances):
        groups[key].append(i)
    lengths = {len(v) for v in groups.values()}
    if len(lengths) != 1:
        raise ParseError(0, instance_column, f"instances have unequal lengths {sorted(lengths)}")
    stacked = np.stack([values[groups[k]] for k in order])
    inst_labels = []
    for k in order:
        ls = {labels[i] for i in groups[k]}
        if len(ls) != 1:
            raise ParseError(groups[k][0], label_column, f"instance {k!r} has several labels")
        inst_labels.append(ls.pop())
    return TimeSeriesDataset(stacked, np.asarray(inst_labels), names, frequency_note)


# -- splitting and windowing ---------------------------------------------------

def _segment_sizes(n, ratios):
    sizes = [int(math.floor(n * r + 1e-9)) for r in ratios[:-1]]
    sizes.append(n - sum(sizes))
    return sizes


def split_train_val_test(dataset, ratios=(0.6, 0.2, 0.2), seed=0):
    """Partition into train/val/test.

    Forecasting data is cut chronologically. Classification instances are
    shuffled with ``seed`` and stratified by class when every class has at
    least three instances.
    """
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r <= 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must be three positive numbers summing to 1, got {ratios}")
    n = len(dataset)

    if not dataset.is_classification:
        sizes = _segment_sizes(n, ratios)
        if min(sizes) < 1:
            raise TooSmall(f"{n} timesteps cannot be split into non-empty segments {sizes}")
        bounds = np.cumsum([0] + sizes)
        return tuple(dataset.subset(slice(bounds[i], bounds[i + 1])) for i in range(3))

    rng = RngStream(seed, "split")
    classes, counts = np.unique(dataset.labels, return_counts=True)
    parts = [[], [], []]
    if counts.min() >= 3:
        for k in classes:
            idx = np.flatnonzero(dataset.labels == k)
            idx = idx[rng.permutation(len(idx))]
            sizes = _segment_sizes(len(idx), ratios)
            sizes = [max(1, s) for s in sizes[:2]] + [len(idx) - sum(max(1, s) for s in sizes[:2])]
            bounds = np.cumsum([0] + sizes)
            for i in range(3):
                parts[i].extend(idx[bounds[i]:bounds[i + 1]])
        parts = [np.sort(np.asarray(p, dtype=np.int64)) for p in parts]
    else:
        idx = rng.permutation(n)
        bounds = np.cumsum([0] + _segment_sizes(n, ratios))
        parts = [np.sort(idx[bounds[i]:bounds[i + 1]]) for i in range(3)]
    if min(len(p) for p in parts) < 1:
        raise TooSmall(f"{n} instances cannot be split into three non-empty parts")
    return tuple(dataset.subset(p) for p in parts)


def make_windows(dataset, T, H, window_stride=1):
    """Sliding ``(x, y)`` windows for forecasting; instances pass through for classification."""
    if dataset.is_classification:
        return [WindowSample(x=dataset.values[i], target=int(dataset.labels[i]), start=i)
                for i in range(len(dataset))]
    if T < 1 or H < 1 or window_stride < 1:
        raise ValueError("T, H and window_stride must be positive")
    n = len(dataset)
    if T + H > n:
        raise TooShort(f"segment of length {n} is shorter than T + H = {T + H}")
    count = (n - T - H) // window_stride + 1
    values = dataset.values
    return [WindowSample(x=values[s:s + T], target=values[s + T:s + T + H], start=s)
            for s in range(0, count * window_stride, window_stride)]


def stack_windows(samples):
    """``(X [N, T, C], Y)`` arrays from a list of samples."""
    X = np.stack([s.x for s in samples])
    if isinstance(samples[0].target, np.ndarray):
        Y = np.stack([s.target for s in samples])
    else:
        Y = np.asarray([s.target for s in samples], dtype=np.int64)
    return X, Y


# -- normalization, patching, channel independence ----------------------------

def instance_normalize(x, eps=None):
    """Per-channel z-score over time (axis -2) with population std clamped at ``eps``."""
    eps = EPS["instance_norm"] if eps is None else eps
    x = np.asarray(x)
    mean = x.mean(axis=-2, keepdims=True)
    std = np.maximum(x.std(axis=-2, keepdims=True), eps)
    return (x - mean) / std, NormStats(mean, std)


def patch(x_norm, cfg):
    """``[..., T, C] -> [..., T_p, C*P]`` with end-replication padding of ``stride`` steps."""
    x_norm = np.asarray(x_norm)
    T = x_norm.shape[-2]
    cfg.validate(T)
    P, S = cfg.patch_len, cfg.stride
    tail = np.repeat(x_norm[..., -1:, :], S, axis=-2)
    padded = np.concatenate([x_norm, tail], axis=-2)
    n = (T - P) // S + 2
    starts = np.arange(n) * S
    idx = starts[:, None] + np.arange(P)[None, :]
    windows = padded[..., idx, :]
    windows = np.swapaxes(windows, -1, -2)
    return windows.reshape(windows.shape[:-2] + (-1,))


def channel_independence_reshape(batch):
    """``[B, T, C] -> [B*C, T, 1]``; row ``b*C + c`` holds channel ``c`` of sample ``b``."""
    batch = np.asarray(batch)
    B, T, C = batch.shape
    flat = np.swapaxes(batch, 1, 2).reshape(B * C, T, 1)
    source = np.stack([np.repeat(np.arange(B), C), np.tile(np.arange(C), B)], axis=1)
    return flat, source


def channel_independence_inverse(flat, n_channels):
    """Inverse of :func:`channel_independence_reshape` for any ``[B*C, L, 1]`` array."""
    flat = np.asarray(flat)
    BC, L = flat.shape[0], flat.shape[1]
    return np.swapaxes(flat.reshape(BC // n_channels, n_channels, L), 1, 2)


# -- augmentations -------------------------------------------------------------

_AUG_DEFAULTS = {
    "jitter": {"sigma": 0.1},
    "scaling": {"low": 0.8, "high": 1.2},
    "rotation": {},
    "permutation": {"n_segments": 4},
    "masking": {"ratio": 0.1},
    "cropping": {"ratio": 0.2},
}


def augment(x, method, params=None, rng=None):
    """Apply one of the six ablation augmentations to a ``[T, C]`` window (shape preserved)."""
    if method not in _AUG_DEFAULTS:
        raise UnknownMethod(f"unknown augmentation {method!r}; expected one of {AUGMENTATIONS}")
    opts = dict(_AUG_DEFAULTS[method])
    unknown = set(params or {}) - set(opts)
    if unknown:
        raise InvalidParam(f"{method} does not take {sorted(unknown)}")
    opts.update(params or {})
    rng = rng if rng is not None else RngStream(0, "augment")
    x = np.asarray(x, dtype=np.float64)
    T, C = x.shape

    if method == "jitter":
        if opts["sigma"] < 0:
            raise InvalidParam("jitter sigma must be >= 0")
        return x + rng.normal(0.0, 1.0, x.shape) * opts["sigma"]
    if method == "scaling":
        if opts["low"] > opts["high"]:
            raise InvalidParam("scaling needs low <= high")
        return x * rng.uniform(opts["low"], opts["high"])
    if method == "rotation":
        perm = rng.permutation(C)
        signs = np.where(rng.random(C) < 0.5, -1.0, 1.0)
        return x[:, perm] * signs
    if method == "permutation":
        k = int(opts["n_segments"])
        if not 1 <= k <= T:
            raise InvalidParam(f"n_segments must lie in [1, T], got {k}")
        segments = np.array_split(x, k, axis=0)
        order = rng.permutation(k)
        return np.concatenate([segments[i] for i in order], axis=0)
    if method == "masking":
        if not 0.0 <= opts["ratio"] <= 1.0:
            raise InvalidParam("masking ratio must lie in [0, 1]")
        return np.where(rng.random(x.shape) < opts["ratio"], 0.0, x)
    # cropping
    if not 0.0 <= opts["ratio"] < 1.0:
        raise InvalidParam("crop ratio must lie in [0, 1)")
    cut = int(math.floor(opts["ratio"] * T / 2))
    out = x.copy()
    if cut:
        out[:cut] = 0.0
        out[T - cut:] = 0.0
    return out


# -- semi-supervised label masking ---------------------------------------------

def label_subsample(samples, fraction, seed):
    """Flag exactly ``ceil(fraction * N)`` samples as labelled; the rest are withheld.

    For classification targets at least one sample per class is kept when the
    budget allows it.
    """
    if not 0.0 < fraction <= 1.0:
        raise InvalidFraction(f"label fraction must lie in (0, 1], got {fraction}")
    n = len(samples)
    budget = min(n, math.ceil(fraction * n - 1e-9))
    rng = RngStream(seed, "subsample")
    chosen = []
    if n and not isinstance(samples[0].target, np.ndarray):
        labels = np.asarray([s.target for s in samples])
        classes = np.unique(labels)
        if budget >= len(classes):
            for k in classes:
                idx = np.flatnonzero(labels == k)
                chosen.append(int(idx[rng.integers(len(idx))]))
    rest = np.setdiff1d(np.arange(n), chosen)
    extra = rng.permutation(rest)[:budget - len(chosen)]
    keep = set(chosen) | {int(i) for i in extra}
    return [replace(s, label_available=i in keep) for i, s in enumerate(samples)]


__all__ = [
    "AUGMENTATIONS", "NormStats", "PatchConfig", "TimeSeriesDataset", "WindowSample",
    "augment", "channel_independence_inverse", "channel_independence_reshape",
    "instance_normalize", "label_subsample", "load_csv", "make_windows", "patch",
    "split_train_val_test", "stack_windows",
]
