"""AdamW and the two-view pretraining loop.

One :class:`Pretrainer` owns a model, its optimizer state and its random
streams for the whole run. Every epoch shuffles the training windows with a
seeded stream, runs the two dropout views per batch, steps AdamW on
``L_P + lam * L_C`` and then scores the validation windows. The parameters
with the lowest validation loss are what the run returns.
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import params as P
from .autograd import RngStream, Tape, precision
from .checkpoint import Checkpoint
from .data import augment, channel_independence_reshape, instance_normalize, patch
from .encoder import EncoderConfig
from .errors import (
    ConfigInvalid, DegenerateBatch, EmptyDataset, NonFiniteGradient, NonFiniteLoss, ShapeMismatch,
)
from .pretext import DualLevelModel, pretext_losses, total_loss

LOSS_COLUMNS = ("epoch", "L_P1", "L_P2", "L_P", "L_C1", "L_C2", "L_C", "total", "split")
_LOSS_KEYS = LOSS_COLUMNS[1:-1]


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    weight_decay: float = 1e-4
    betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    batch_size: int = 16
    epochs: int = 50
    lam: float = 1.0
    seed: int = 0
    patience: int = 10
    precision: str = "f32"
    grad_clip: float | None = 5.0
    stop_gradient: bool = True
    augmentation: str | None = None
    augmentation_params: dict = field(default_factory=dict)
    channel_independence: bool = False

    def validate(self):
        if not self.lr > 0:
            raise ConfigInvalid(f"lr must be > 0, got {self.lr}")
        if self.weight_decay < 0:
            raise ConfigInvalid("weight_decay must be >= 0")
        b1, b2 = self.betas
        if not (0 <= b1 < 1 and 0 <= b2 < 1):
            raise ConfigInvalid(f"betas must lie in [0, 1), got {self.betas}")
        if self.batch_size < 1 or self.epochs < 1 or self.patience < 1:
            raise ConfigInvalid("batch_size, epochs and patience must be >= 1")
        if self.lam < 0:
            raise ConfigInvalid(f"lambda must be >= 0, got {self.lam}")
        if self.precision not in ("f32", "f64"):
            raise ConfigInvalid(f"precision must be f32 or f64, got {self.precision!r}")
        if self.grad_clip is not None and not self.grad_clip > 0:
            raise ConfigInvalid("grad_clip must be positive or None")
        return self

    def to_dict(self):
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["betas"] = tuple(d.get("betas", (0.9, 0.999)))
        return cls(**d)


# -- optimizer ------------------------------------------------------------------

@dataclass
class OptimizerState:
    m: dict
    v: dict
    t: int = 0

    @classmethod
    def zeros(cls, params):
        return cls({k: np.zeros_like(p.data) for k, p in params.items()},
                   {k: np.zeros_like(p.data) for k, p in params.items()}, 0)


def _data(p):
    return p.data if hasattr(p, "data") else p


def check_finite_grads(grads):
    for name in sorted(grads):
        g = grads[name]
        if g is not None and not np.all(np.isfinite(g)):
            raise NonFiniteGradient(name)


def clip_grad_norm(grads, max_norm):
    """Scale every gradient by one factor so the global L2 norm is at most ``max_norm``."""
    # sorted order keeps the float sum independent of how the dict was built
    total = math.sqrt(sum(float(np.sum(np.square(grads[k], dtype=np.float64)))
                          for k in sorted(grads) if grads[k] is not None))
    if max_norm is not None and total > max_norm:
        factor = max_norm / total
        grads = {k: None if g is None else g * factor for k, g in grads.items()}
    return grads, total


def adamw_step(params, grads, state, config):
    """One AdamW update, in place on ``params`` (name -> Tensor or array).

    A missing gradient counts as zero. Weight decay is decoupled and skipped
    for biases, norm affines, the [CLS] token and the positional table.
    """
    check_finite_grads(grads)
    b1, b2 = config.betas
    state.t += 1
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name in sorted(params):
        theta = _data(params[name])
        g = grads.get(name)
        if g is not None and g.shape != theta.shape:
            raise ShapeMismatch(f"gradient for {name} has shape {g.shape}, parameter {theta.shape}")
        if config.weight_decay and P.decays(name):
            theta -= config.lr * config.weight_decay * theta
        m, v = state.m[name], state.v[name]
        if g is None:
            m *= b1
            v *= b2
        else:
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
        theta -= config.lr * (m / c1) / (np.sqrt(v / c2) + config.adam_eps)
    return state


# -- batch preparation ------------------------------------------------------------

def check_channels(X, encoder_config, channel_independence):
    want = 1 if channel_independence else X.shape[-1]
    if encoder_config.n_channels != want:
        raise ShapeMismatch(
            f"encoder expects {encoder_config.n_channels} channel(s) per token but the data "
            f"gives {want} (channel_independence={channel_independence})")
    if X.shape[-2] != encoder_config.seq_len:
        raise ShapeMismatch(f"windows have length {X.shape[-2]}, encoder expects {encoder_config.seq_len}")


def prepare_inputs(X, encoder_config, channel_independence=False, dtype=np.float64):
    """Raw windows ``[B, T, C]`` -> normalized patches, norm stats, and the CI source map."""
    X = np.asarray(X, dtype=np.float64)
    source = None
    if channel_independence:
        X, source = channel_independence_reshape(X)
    xn, stats = instance_normalize(X)
    return patch(xn, encoder_config.patch_config).astype(dtype), stats, source


def _augment_batch(X, method, params, rng):
    return np.stack([augment(x, method, params, rng) for x in X])


@dataclass
class PretrainResult:
    model: DualLevelModel
    history: list
    best_epoch: int
    stopped_early: bool


def _breakdown_mean(rows, weights):
    w = np.asarray(weights, dtype=np.float64)
    return {k: float(np.dot([r[k] for r in rows], w) / w.sum()) for k in _LOSS_KEYS}


class Pretrainer:
    """Resumable pretraining run over fixed train/val window arrays ``[N, T, C]``."""

    def __init__(self, model, config, train_X, val_X=None):
        self.config = config.validate()
        self.model = model
        self.train_X = np.asarray(train_X, dtype=np.float64)
        self.val_X = None if val_X is None or len(val_X) == 0 else np.asarray(val_X, dtype=np.float64)
        if self.train_X.ndim != 3 or len(self.train_X) == 0:
            raise EmptyDataset("pretraining needs a non-empty [N, T, C] training array")
        if config.batch_size < 2:
            raise DegenerateBatch("batch_size must be >= 2 for the contrastive head's BatchNorm")
        check_channels(self.train_X, model.config, config.channel_independence)
        if self.val_X is not None:
            check_channels(self.val_X, model.config, config.channel_independence)
        self.dtype = next(iter(model.params.values())).dtype
        root = RngStream(config.seed, "pretrain")
        self.streams = {name: root.spawn(name) for name in ("shuffle", "dropout", "augment")}
        self.opt = OptimizerState.zeros(model.params)
        self.history = []
        self.epoch = 0
        self.best_val = math.inf
        self.best_epoch = 0
        self.bad_epochs = 0
        self.stopped = False
        self._best = (P.snapshot(model.params), {k: v.copy() for k, v in model.buffers.items()})

    # -- one batch / one epoch -------------------------------------------------

    def _views(self, Xb, rng):
        cfg, enc = self.config, self.model.config
        if cfg.augmentation:
            X1 = _augment_batch(Xb, cfg.augmentation, cfg.augmentation_params, rng)
            X2 = _augment_batch(Xb, cfg.augmentation, cfg.augmentation_params, rng)
            x1 = prepare_inputs(X1, enc, cfg.channel_independence, self.dtype)[0]
            x2 = prepare_inputs(X2, enc, cfg.channel_independence, self.dtype)[0]
            return x1, x2
        return prepare_inputs(Xb, enc, cfg.channel_independence, self.dtype)[0], None

    def step(self, Xb):
        cfg, model = self.config, self.model
        x1, x2 = self._views(Xb, self.streams["augment"])
        P.zero_grads(model.params)
        with Tape() as tape:
            losses = pretext_losses(model, x1, self.streams["dropout"], cfg.lam,
                                    cfg.stop_gradient, training=True, x2=x2)
            value = float(losses.total.item())
            if not math.isfinite(value):
                raise NonFiniteLoss(f"epoch {self.epoch + 1}, step {self.opt.t + 1}: "
                                    f"loss breakdown {losses.to_dict()}")
            tape.backward(losses.total)
        grads = {k: p.grad for k, p in model.params.items()}
        check_finite_grads(grads)
        grads, _ = clip_grad_norm(grads, cfg.grad_clip)
        adamw_step(model.params, grads, self.opt, cfg)
        return losses.to_dict()

    def train_epoch(self):
        X = self.train_X
        order = self.streams["shuffle"].permutation(len(X))
        rows, weights = [], []
        for start in range(0, len(X), self.config.batch_size):
            idx = order[start:start + self.config.batch_size]
            if len(idx) < 2:
                continue        # a single leftover window cannot feed BatchNorm
            rows.append(self.step(X[idx]))
            weights.append(len(idx))
        if not rows:
            raise DegenerateBatch("no training batch with at least 2 windows")
        return _breakdown_mean(rows, weights)

    def evaluate(self, X):
        """Mean losses on ``X`` with dropout on (so the two views differ) and BatchNorm in eval mode.

        Uses a fresh, fixed dropout stream so scores from different epochs are comparable.
        """
        rng = RngStream(self.config.seed, "pretrain/val_dropout")
        cfg = self.config
        rows, weights = [], []
        for start in range(0, len(X), cfg.batch_size):
            Xb = X[start:start + cfg.batch_size]
            x1 = prepare_inputs(Xb, self.model.config, cfg.channel_independence, self.dtype)[0]
            losses = pretext_losses(self.model, x1, rng, cfg.lam, cfg.stop_gradient, training=False)
            rows.append(losses.to_dict())
            weights.append(len(Xb))
        return _breakdown_mean(rows, weights)

    # -- run ----------------------------------------------------------------------

    def run(self, epochs=None):
        """Train until ``epochs`` more epochs ran (default: the configured total) or early stop."""
        target = self.config.epochs if epochs is None else min(self.config.epochs, self.epoch + epochs)
        with precision(self.config.precision):
            while self.epoch < target and not self.stopped:
                train = self.train_epoch()
                self.epoch += 1
                self.history.append({"epoch": self.epoch, **train, "split": "train"})
                score = train["total"]
                if self.val_X is not None:
                    val = self.evaluate(self.val_X)
                    self.history.append({"epoch": self.epoch, **val, "split": "val"})
                    score = val["total"]
                if not math.isfinite(score):
                    raise NonFiniteLoss(f"epoch {self.epoch}: non-finite score {score}")
                if score < self.best_val:
                    self.best_val, self.best_epoch, self.bad_epochs = score, self.epoch, 0
                    self._best = (P.snapshot(self.model.params),
                                  {k: v.copy() for k, v in self.model.buffers.items()})
                else:
                    self.bad_epochs += 1
                    if self.bad_epochs >= self.config.patience:
                        self.stopped = True
        return self.result()

    def result(self):
        """A copy of the model holding the best-scoring parameters seen so far."""
        best = self.model.copy()
        P.restore(best.params, self._best[0])
        for k, v in self._best[1].items():
            best.buffers[k][...] = v
        best.pretrained = True
        return PretrainResult(best, list(self.history), self.best_epoch, self.stopped)

    # -- persistence ----------------------------------------------------------------

    def to_checkpoint(self, meta=None):
        extra = {f"best_param/{k}": v for k, v in self._best[0].items()}
        extra.update({f"best_buffer/{k}": v for k, v in self._best[1].items()})
        trainer_state = {
            "epoch": self.epoch, "best_val": None if math.isinf(self.best_val) else self.best_val,
            "best_epoch": self.best_epoch, "bad_epochs": self.bad_epochs, "stopped": self.stopped,
            "train_config": self.config.to_dict(),
        }
        return Checkpoint(
            encoder_config=self.model.config.to_dict(),
            params=P.snapshot(self.model.params),
            buffers={k: v.copy() for k, v in self.model.buffers.items()},
            optimizer={"m": dict(self.opt.m), "v": dict(self.opt.v), "t": self.opt.t},
            rng={k: s.get_state() for k, s in self.streams.items()},
            history=list(self.history),
            meta={"pooling": self.model.pooling, "trainer": trainer_state, **(meta or {})},
            extra_arrays=extra,
        )

    @classmethod
    def from_checkpoint(cls, ckpt, train_X, val_X=None, config=None):
        """Rebuild a run exactly where ``ckpt`` left it."""
        state = ckpt.meta["trainer"]
        config = config or TrainConfig.from_dict(state["train_config"])
        model = model_from_checkpoint(ckpt, best=False)
        model.pretrained = False
        self = cls(model, config, train_X, val_X)
        if ckpt.optimizer is not None:
            self.opt = OptimizerState({k: v.copy() for k, v in ckpt.optimizer["m"].items()},
                                      {k: v.copy() for k, v in ckpt.optimizer["v"].items()},
                                      ckpt.optimizer["t"])
        for k, s in self.streams.items():
            s.set_state(ckpt.rng[k])
        self.history = list(ckpt.history)
        self.epoch = state["epoch"]
        self.best_val = math.inf if state["best_val"] is None else state["best_val"]
        self.best_epoch, self.bad_epochs, self.stopped = state["best_epoch"], state["bad_epochs"], state["stopped"]
        ex = ckpt.extra_arrays
        self._best = ({k[len("best_param/"):]: v for k, v in ex.items() if k.startswith("best_param/")},
                      {k[len("best_buffer/"):]: v for k, v in ex.items() if k.startswith("best_buffer/")})
        return self


def model_from_checkpoint(ckpt, best=True):
    """Rebuild a :class:`DualLevelModel` from a checkpoint.

    Training checkpoints hold both the live weights and the best-validation
    weights; ``best=True`` picks the latter when present.
    """
    from .autograd import Tensor

    config = EncoderConfig(**ckpt.encoder_config)
    ex = ckpt.extra_arrays
    use_best = best and any(k.startswith("best_param/") for k in ex)
    source = {k: ex[f"best_param/{k}"] for k in ckpt.params} if use_best else ckpt.params
    params = {k: Tensor(v.copy(), requires_grad=True, name=k) for k, v in source.items()}
    bsrc = {k: ex[f"best_buffer/{k}"] for k in ckpt.buffers} if use_best else ckpt.buffers
    buffers = {k: v.copy() for k, v in bsrc.items()}
    return DualLevelModel(config, params, buffers, ckpt.meta.get("pooling", "cls"), pretrained=True)


def pretrain(train_X, val_X, model, config):
    """Run a full pretraining job and return the best-validation model and loss history."""
    return Pretrainer(model, config, train_X, val_X).run()


def write_loss_csv(path, history):
    """One row per (epoch, split). Floats use ``repr`` so equal runs give equal bytes."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOSS_COLUMNS)
        for row in history:
            w.writerow([row["epoch"], *(repr(float(row[k])) for k in _LOSS_KEYS), row["split"]])


__all__ = [
    "LOSS_COLUMNS", "OptimizerState", "PretrainResult", "Pretrainer", "TrainConfig",
    "adamw_step", "check_finite_grads", "clip_grad_norm", "model_from_checkpoint",
    "prepare_inputs", "pretrain", "total_loss", "write_loss_csv",
]
