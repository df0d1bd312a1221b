"""Downstream protocols: frozen linear probes, fine-tuning, and metrics.

Classification metrics are computed from an integer confusion matrix with
exact rational arithmetic and only converted to float at the end, so equal
inputs always produce bit-equal numbers.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import os
import warnings
from dataclasses import asdict, dataclass, field, replace
from fractions import Fraction

import numpy as np

from . import params as P
from .autograd import RngStream, Tape, Tensor, ops, precision
from .data import NormStats, channel_independence_inverse, instance_normalize
from .errors import (
    LabelOutOfRange, LengthMismatch, NoLabeledSamples, NotPretrained, ShapeMismatch, StatsMismatch,
)
from .pretext import DualLevelModel
from .trainer import OptimizerState, adamw_step, check_channels, clip_grad_norm, prepare_inputs

FORECAST_PROBE_INPUT = "flattened timestamp embeddings"
LEDGER_COLUMNS = ("task", "dataset_id", "config_hash", "seed", "label_fraction", "init",
                  "MSE", "MAE", "ACC", "MF1", "kappa")


class UndefinedKappa(UserWarning):
    """Chance agreement is 1 (a single class in both labels and predictions); kappa reported as 0."""


# -- metrics --------------------------------------------------------------------

def confusion_matrix(y_true, y_pred, K):
    """``M[i, j]`` counts samples with true class ``i`` predicted as ``j``."""
    yt = np.asarray(y_true).astype(np.int64).ravel()
    yp = np.asarray(y_pred).astype(np.int64).ravel()
    if len(yt) != len(yp) or len(yt) == 0:
        raise LengthMismatch(f"need equal non-zero lengths, got {len(yt)} and {len(yp)}")
    for name, y in (("y_true", yt), ("y_pred", yp)):
        if y.min() < 0 or y.max() >= K:
            raise LabelOutOfRange(f"{name} has labels outside [0, {K})")
    M = np.zeros((K, K), dtype=np.int64)
    np.add.at(M, (yt, yp), 1)
    return M


def metrics_from_confusion(M):
    """``(ACC, MF1, kappa, p_e)`` as exact fractions.

    MF1 averages one-vs-rest F1 over all ``K`` classes; a class that never
    occurs in labels or predictions scores 0. Kappa uses the multiclass
    chance agreement ``sum_k rows_k * cols_k / N^2`` and is 0 when that is 1.
    """
    M = np.asarray(M, dtype=object)
    K = M.shape[0]
    N = int(M.sum())
    agree = int(sum(M[k, k] for k in range(K)))
    rows = [int(M[k, :].sum()) for k in range(K)]
    cols = [int(M[:, k].sum()) for k in range(K)]
    acc = Fraction(agree, N)
    f1 = []
    for k in range(K):
        tp = int(M[k, k])
        fp, fn = cols[k] - tp, rows[k] - tp
        f1.append(Fraction(2 * tp, 2 * tp + fp + fn) if tp else Fraction(0))
    mf1 = sum(f1, Fraction(0)) / K
    chance = sum(r * c for r, c in zip(rows, cols))
    p_e = Fraction(chance, N * N)
    if N * N == chance:
        warnings.warn("chance agreement is 1; kappa is undefined and reported as 0", UndefinedKappa)
        kappa = Fraction(0)
    else:
        kappa = Fraction(N * agree - chance, N * N - chance)
    return acc, mf1, kappa, p_e


def compute_classification_metrics(y_true, y_pred, K):
    """``(ACC, MF1, kappa)`` for integer labels in ``[0, K)``."""
    acc, mf1, kappa, _ = metrics_from_confusion(confusion_matrix(y_true, y_pred, K))
    return float(acc), float(mf1), float(kappa)


def compute_forecast_metrics(y_true, y_pred):
    """``(MSE, MAE)`` over every element, accumulated in float64."""
    yt = np.asarray(y_true, dtype=np.float64)
    yp = np.asarray(y_pred, dtype=np.float64)
    if yt.shape != yp.shape:
        raise ShapeMismatch(f"targets {yt.shape} and predictions {yp.shape} differ")
    d = yt - yp
    return float(np.mean(d * d)), float(np.mean(np.abs(d)))


def denormalize(pred_norm, stats):
    """``pred * std + mean`` per channel, with the stats of each prediction's input window."""
    pred = np.asarray(pred_norm, dtype=np.float64)
    mean, std = np.asarray(stats.mean), np.asarray(stats.std)
    if mean.shape != std.shape or pred.ndim != mean.ndim or mean.shape[-2] != 1 \
            or pred.shape[:-2] != mean.shape[:-2] or pred.shape[-1] != mean.shape[-1]:
        raise StatsMismatch(f"predictions {pred.shape} do not match stats {mean.shape}")
    return pred * std + mean


# -- reports ----------------------------------------------------------------------

@dataclass
class MetricsReport:
    task: str
    metrics: dict
    dataset_id: str = ""
    config_hash: str = ""
    seed: int = 0
    label_fraction: float = 1.0
    meta: dict = field(default_factory=dict)

    def to_dict(self):
        return asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    def write(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_json() + "\n")

    def ledger_row(self):
        row = {"task": self.task, "dataset_id": self.dataset_id, "config_hash": self.config_hash,
               "seed": self.seed, "label_fraction": repr(float(self.label_fraction)),
               "init": self.meta.get("init", "")}
        for k in LEDGER_COLUMNS[6:]:
            row[k] = repr(float(self.metrics[k])) if k in self.metrics else ""
        return row

    def append_to_ledger(self, path):
        """Append one row; the header is written only when the file is new."""
        new = not os.path.exists(path) or os.path.getsize(path) == 0
        with open(path, "a", newline="", encoding="utf-8") as fh:
            w = csv.DictWriter(fh, fieldnames=LEDGER_COLUMNS, lineterminator="\n")
            if new:
                w.writeheader()
            w.writerow(self.ledger_row())


def config_hash(obj):
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()[:16]


# -- features -----------------------------------------------------------------------

def _model_dtype(model):
    return next(iter(model.params.values())).dtype


def encode_windows(model, X, channel_independence=False, batch_size=256):
    """Eval-mode ``(z_i, z_t, stats, source)`` for raw windows ``[N, T, C]``.

    ``z_i`` follows the model's pooling; under channel independence rows are
    pseudo-samples ``b * C + c``.
    """
    X = np.asarray(X, dtype=np.float64)
    check_channels(X, model.config, channel_independence)
    x, stats, source = prepare_inputs(X, model.config, channel_independence, _model_dtype(model))
    zi, zt = [], []
    for s in range(0, len(x), batch_size):
        dual = model.embed(x[s:s + batch_size], training=False)
        zi.append(model.instance(dual).data)
        zt.append(dual.timestamp.data)
    return np.concatenate(zi), np.concatenate(zt), stats, source


# -- probes ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ProbeConfig:
    """Optimizer settings for linear probes and fine-tuning.

    The linear probes default to ``lr=1e-2``; at ``1e-3`` a linear head on
    these features is still far from converged after 100 epochs. Fine-tuning
    uses :data:`FINETUNE_CONFIG` (``lr=1e-3``).
    """

    lr: float = 1e-2
    weight_decay: float = 1e-4
    betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    batch_size: int = 8
    epochs: int = 100
    patience: int = 10
    grad_clip: float | None = 5.0
    weight_decay_grid: tuple = (1e-4, 1e-2, 1e-1, 1.0, 10.0)

    def to_dict(self):
        d = asdict(self)
        d["betas"] = list(self.betas)
        d["weight_decay_grid"] = list(self.weight_decay_grid)
        return d


FINETUNE_CONFIG = ProbeConfig(lr=1e-3, batch_size=16, weight_decay_grid=())


def _standardizer(F):
    """Per-feature z-scoring fitted on the probe's training features."""
    mu = F.mean(axis=0)
    sd = np.maximum(F.std(axis=0), 1e-8)
    return lambda G: ((G - mu) / sd).astype(F.dtype)


def _init_linear(d_in, d_out, seed, dtype, prefix):
    rng = RngStream(seed, f"init/{prefix}")
    limit = math.sqrt(6.0 / (d_in + d_out))
    return {f"{prefix}.weight": Tensor(rng.uniform(-limit, limit, (d_out, d_in)), requires_grad=True,
                                       dtype=dtype, name=f"{prefix}.weight"),
            f"{prefix}.bias": Tensor(np.zeros(d_out), requires_grad=True, dtype=dtype, name=f"{prefix}.bias")}


def _fit(params, loss_fn, score_fn, n_train, config, seed):
    """Shared minibatch AdamW loop with early stopping on ``score_fn`` (lower is better)."""
    opt = OptimizerState.zeros(params)
    shuffle = RngStream(seed, "probe/shuffle")
    best, best_state, bad = math.inf, P.snapshot(params), 0
    epochs_run = 0
    for _ in range(config.epochs):
        order = shuffle.permutation(n_train)
        for s in range(0, n_train, config.batch_size):
            idx = order[s:s + config.batch_size]
            P.zero_grads(params)
            with Tape() as tape:
                loss = loss_fn(idx)
                tape.backward(loss)
            grads, _ = clip_grad_norm({k: p.grad for k, p in params.items()}, config.grad_clip)
            adamw_step(params, grads, opt, config)
        epochs_run += 1
        score = score_fn()
        if score < best:
            best, best_state, bad = score, P.snapshot(params), 0
        else:
            bad += 1
            if bad >= config.patience:
                break
    P.restore(params, best_state)
    return epochs_run, best


def _softmax_nll(logits, y):
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return float(-logp[np.arange(len(y)), y].mean())


def _train_linear_probe(Ftr, Ytr, Fva, Yva, d_out, kind, config, seed, prefix):
    """Fit ``W, b`` by AdamW for each weight decay in the grid; keep the best on validation.

    ``kind`` is ``"regression"`` (MSE on real targets) or ``"classification"``
    (cross-entropy on integer labels). Returns ``(W, b, info)`` as arrays.
    """
    dtype = Ftr.dtype
    Ftr_t = Ftr.astype(dtype)
    Ytr_t = Ytr.astype(dtype) if kind == "regression" else Ytr
    grid = tuple(config.weight_decay_grid) or (config.weight_decay,)
    best = None
    for wd in grid:
        head = _init_linear(Ftr.shape[1], d_out, seed, dtype, prefix)
        W, b = head[f"{prefix}.weight"], head[f"{prefix}.bias"]

        def loss_fn(idx):
            out = ops.linear(Tensor(Ftr_t[idx]), W, b)
            return ops.mse(out, Tensor(Ytr_t[idx])) if kind == "regression" \
                else ops.cross_entropy(out, Ytr_t[idx])

        def score_fn():
            out = Fva @ W.data.T + b.data
            return float(np.mean((out - Yva) ** 2)) if kind == "regression" else _softmax_nll(out, Yva)

        with precision(dtype):
            epochs, score = _fit(head, loss_fn, score_fn, len(Ftr), replace(config, weight_decay=wd), seed)
        if best is None or score < best[2]["val_score"]:
            best = (W.data.copy(), b.data.copy(),
                    {"weight_decay": wd, "probe_epochs": epochs, "val_score": score})
    return best


def _require_pretrained(model):
    if model is None or not getattr(model, "pretrained", False):
        raise NotPretrained("linear evaluation needs a pretrained encoder")


def _forecast_targets(Y, stats, channel_independence):
    """Normalize future values with their input window's stats; ``[N', H*C']`` rows."""
    Y = np.asarray(Y, dtype=np.float64)
    if channel_independence:
        N, H, C = Y.shape
        Y = np.swapaxes(Y, 1, 2).reshape(N * C, H, 1)
    Yn = (Y - stats.mean) / stats.std
    return Yn.reshape(len(Yn), -1)


def _forecast_predict(flat_pred, stats, H, n_channels, channel_independence):
    c = 1 if channel_independence else n_channels
    pred = denormalize(flat_pred.reshape(len(flat_pred), H, c), stats)
    if channel_independence:
        pred = channel_independence_inverse(pred, n_channels)
    return pred


def linear_eval_forecast(model, train, val, test, H, channel_independence=False,
                         config=ProbeConfig(), seed=0, dataset_id=""):
    """Train a linear map from flattened ``z_t`` to the next ``H`` steps; score on ``test``.

    ``train``, ``val`` and ``test`` are ``(X [N, T, C], Y [N, H, C])`` pairs.
    The encoder is run once in eval mode and never updated.
    """
    _require_pretrained(model)
    before = P.checksum(model.params)
    C = np.asarray(train[0]).shape[-1]

    def features(split):
        X, Y = split
        _, zt, stats, _ = encode_windows(model, X, channel_independence)
        return zt.reshape(len(zt), -1), _forecast_targets(Y, stats, channel_independence), stats

    Ftr, Ttr, _ = features(train)
    Fva, Tva, _ = features(val)
    Fte, _, Ste = features(test)
    scale = _standardizer(Ftr)
    Ftr, Fva, Fte = scale(Ftr), scale(Fva), scale(Fte)
    W, b, info = _train_linear_probe(Ftr, Ttr, Fva, Tva, Ttr.shape[1], "regression",
                                     config, seed, "forecast_head")
    pred = _forecast_predict(Fte @ W.T + b, Ste, H, C, channel_independence)
    mse, mae = compute_forecast_metrics(test[1], pred)
    if P.checksum(model.params) != before:
        raise RuntimeError("encoder parameters changed during a frozen probe")
    return MetricsReport("forecast", {"MSE": mse, "MAE": mae}, dataset_id, seed=seed,
                         meta={"probe_input": FORECAST_PROBE_INPUT, "H": H, **info,
                               "channel_independence": channel_independence,
                               "probe": config.to_dict()})


def naive_last_value_forecast(X, H):
    """Repeat each window's final observation ``H`` times: ``[N, T, C] -> [N, H, C]``."""
    X = np.asarray(X, dtype=np.float64)
    return np.repeat(X[:, -1:, :], H, axis=1)


def _classify_features(model, X):
    zi, _, _, _ = encode_windows(model, X, False)
    return zi


def _labels(y, K):
    y = np.asarray(y, dtype=np.int64)
    if y.size and (y.min() < 0 or y.max() >= K):
        raise LabelOutOfRange(f"labels outside [0, {K})")
    return y


def _argmax_low(logits):
    """Row-wise argmax; numpy already returns the first (lowest) index on ties."""
    return np.argmax(logits, axis=-1)


def linear_eval_classify(model, train, val, test, K, config=ProbeConfig(), seed=0, dataset_id=""):
    """Softmax-regression probe on frozen instance embeddings.

    ``train``, ``val`` and ``test`` are ``(X [N, T, C], y [N])`` pairs.
    """
    _require_pretrained(model)
    before = P.checksum(model.params)
    Ftr, Fva, Fte = (_classify_features(model, s[0]) for s in (train, val, test))
    scale = _standardizer(Ftr)
    Ftr, Fva, Fte = scale(Ftr), scale(Fva), scale(Fte)
    ytr, yva, yte = (_labels(s[1], K) for s in (train, val, test))
    W, b, info = _train_linear_probe(Ftr, ytr, Fva, yva, K, "classification", config, seed, "class_head")
    pred = _argmax_low(Fte @ W.T + b)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", UndefinedKappa)
        acc, mf1, kappa = compute_classification_metrics(yte, pred, K)
    if P.checksum(model.params) != before:
        raise RuntimeError("encoder parameters changed during a frozen probe")
    return MetricsReport("classify", {"ACC": acc, "MF1": mf1, "kappa": kappa}, dataset_id, seed=seed,
                         meta={"probe_input": f"instance embedding ({model.pooling})", "K": K,
                               **info, "kappa_undefined": bool(caught),
                               "probe": config.to_dict()})


# -- fine-tuning ------------------------------------------------------------------------

def _warm_head(Ftr, Ytr, Fva, Yva, d_out, kind, seed, prefix):
    """Linear-probe the frozen features, then fold the standardization into ``W, b``."""
    mu = Ftr.mean(axis=0)
    sd = np.maximum(Ftr.std(axis=0), 1e-8)
    W, b, _ = _train_linear_probe(((Ftr - mu) / sd).astype(Ftr.dtype), Ytr,
                                  ((Fva - mu) / sd).astype(Fva.dtype), Yva, d_out, kind,
                                  ProbeConfig(), seed, prefix)
    W = W / sd
    b = b - W @ mu
    dtype = Ftr.dtype
    return {f"{prefix}.weight": Tensor(W, requires_grad=True, dtype=dtype, name=f"{prefix}.weight"),
            f"{prefix}.bias": Tensor(b, requires_grad=True, dtype=dtype, name=f"{prefix}.bias")}


def fine_tune(model, encoder_config, samples, val, test, task, K=None, H=None,
              config=FINETUNE_CONFIG, seed=0, label_fraction=1.0, channel_independence=False,
              pooling="cls", dataset_id="", warm_start_head=True):
    """Train encoder and task head together on the samples whose label is available.

    ``model`` is a pretrained :class:`DualLevelModel`, or ``None`` for a
    randomly initialized encoder (the supervised-only arm). ``samples`` are
    :class:`WindowSample` objects; ``val``/``test`` are ``(X, Y)`` pairs.

    With ``warm_start_head`` the head first gets a linear probe on the
    frozen features of the labelled samples, so joint training does not
    start from a random head; both init modes go through the same steps.
    """
    labeled = [s for s in samples if s.label_available]
    if not labeled:
        raise NoLabeledSamples("no training sample carries an available label")
    init = "random" if model is None else "pretrained"
    if model is None:
        model = DualLevelModel.init(encoder_config, seed, pooling)
    else:
        model = model.copy()
    dtype = _model_dtype(model)
    drop = RngStream(seed, "finetune/dropout")
    X = np.stack([s.x for s in labeled])
    enc_params = {k: v for k, v in model.params.items() if k.startswith("encoder.")}

    if task == "classify":
        y = _labels([s.target for s in labeled], K)
        xin = prepare_inputs(X, model.config, False, dtype)[0]
        xva = prepare_inputs(val[0], model.config, False, dtype)[0]
        yva = _labels(val[1], K)
        if warm_start_head:
            head = _warm_head(_classify_features(model, X), y, _classify_features(model, val[0]), yva,
                              K, "classification", seed, "class_head")
        else:
            head = _init_linear(model.instance_dim, K, seed, dtype, "class_head")
        W, b = head["class_head.weight"], head["class_head.bias"]

        def logits_of(x, training, rng=None):
            dual = model.embed(x, training=training, rng=rng)
            return ops.linear(model.instance(dual), W, b)

        def loss_fn(idx):
            return ops.cross_entropy(logits_of(xin[idx], True, drop), y[idx])

        def score_fn():
            return _softmax_nll(logits_of(xva, False).data, yva)

        with precision(dtype):
            epochs, _ = _fit({**enc_params, **head}, loss_fn, score_fn, len(xin), config, seed)
        xte = prepare_inputs(test[0], model.config, False, dtype)[0]
        pred = _argmax_low(logits_of(xte, False).data)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", UndefinedKappa)
            acc, mf1, kappa = compute_classification_metrics(_labels(test[1], K), pred, K)
        metrics = {"ACC": acc, "MF1": mf1, "kappa": kappa}
    elif task == "forecast":
        Y = np.stack([s.target for s in labeled])
        C = X.shape[-1]
        xin, stats, _ = prepare_inputs(X, model.config, channel_independence, dtype)
        tgt = _forecast_targets(Y, stats, channel_independence).astype(dtype)
        d_out = tgt.shape[1]
        xva, sva, _ = prepare_inputs(val[0], model.config, channel_independence, dtype)
        tva = _forecast_targets(val[1], sva, channel_independence)
        if warm_start_head:
            flat = lambda x: model.embed(x, training=False).timestamp.data.reshape(len(x), -1)
            head = _warm_head(flat(xin), tgt, flat(xva), tva, d_out, "regression", seed, "forecast_head")
        else:
            head = _init_linear(model.config.n_patches * model.config.d_model, d_out, seed, dtype,
                                "forecast_head")
        W, b = head["forecast_head.weight"], head["forecast_head.bias"]

        def predict(x, training, rng=None):
            zt = model.embed(x, training=training, rng=rng).timestamp
            return ops.linear(ops.reshape(zt, (zt.shape[0], -1)), W, b)

        def loss_fn(idx):
            return ops.mse(predict(xin[idx], True, drop), Tensor(tgt[idx]))

        def score_fn():
            return float(np.mean((predict(xva, False).data - tva) ** 2))

        with precision(dtype):
            epochs, _ = _fit({**enc_params, **head}, loss_fn, score_fn, len(xin), config, seed)
        xte, ste, _ = prepare_inputs(test[0], model.config, channel_independence, dtype)
        pred = _forecast_predict(predict(xte, False).data, ste, H or Y.shape[1], C, channel_independence)
        mse, mae = compute_forecast_metrics(test[1], pred)
        metrics = {"MSE": mse, "MAE": mae}
    else:
        raise ValueError(f"task must be 'classify' or 'forecast', got {task!r}")
    return MetricsReport(task, metrics, dataset_id, seed=seed, label_fraction=float(label_fraction),
                         meta={"init": init, "n_labeled": len(labeled), "epochs": epochs,
                               "warm_start_head": warm_start_head,
                               "probe": config.to_dict()})


__all__ = [
    "FINETUNE_CONFIG", "FORECAST_PROBE_INPUT", "LEDGER_COLUMNS", "MetricsReport", "NormStats", "ProbeConfig",
    "UndefinedKappa", "compute_classification_metrics", "compute_forecast_metrics", "config_hash",
    "confusion_matrix", "denormalize", "encode_windows", "fine_tune", "instance_normalize",
    "linear_eval_classify", "linear_eval_forecast", "metrics_from_confusion",
    "naive_last_value_forecast",
]
