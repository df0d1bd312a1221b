"""Run configuration files.

A config is a flat text file of ``section.key = value`` lines. Blank lines
and ``#`` comments are ignored. Every key must appear in :data:`SCHEMA`
(augmentation parameters use ``augment.<method>.<param>``); anything else is
a :class:`~dualts.errors.ConfigError` naming the key, so a typo cannot be
silently ignored. Lists are comma separated. ``none`` clears an optional
value.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace

from .data import AUGMENTATIONS, _AUG_DEFAULTS
from .encoder import POOLING_METHODS, EncoderConfig
from .errors import ConfigError, ConfigInvalid, InvalidSpec, MultipleAxes
from .evaluation import FINETUNE_CONFIG, ProbeConfig
from .synthetic import GENERATORS, SyntheticSpec
from .trainer import TrainConfig

ABLATION_AXES = ("augmentation", "pooling", "stop_gradient", "lambda")
DEFAULT_LAMBDA_GRID = (0.001, 0.01, 0.1, 1.0, 10.0, 100.0, 1000.0)


def _bool(text):
    low = text.lower()
    if low in ("true", "yes", "on", "1"):
        return True
    if low in ("false", "no", "off", "0"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _opt(conv):
    return lambda text: None if text.lower() == "none" else conv(text)


def _list(conv):
    return lambda text: tuple(conv(t.strip()) for t in text.split(",") if t.strip())


def _choice(options):
    def conv(text):
        if text not in options:
            raise ValueError(f"expected one of {list(options)}, got {text!r}")
        return text
    return conv


SCHEMA = {
    "seed": int,
    "task": _choice(("forecast", "classify")),
    "dataset.path": str,
    "dataset.has_header": _bool,
    "dataset.timestamp_column": str,
    "dataset.label_column": str,
    "dataset.instance_column": str,
    "dataset.frequency_note": str,
    "synthetic.generator": _choice(GENERATORS),
    "synthetic.T_total": int,
    "synthetic.N": int,
    "synthetic.C": int,
    "synthetic.K": int,
    "synthetic.sigma": float,
    "synthetic.seed": int,
    "synthetic.phi": float,
    "synthetic.period": int,
    "synthetic.amplitude": float,
    "synthetic.base_cycles": int,
    "data.window": int,
    "data.horizon": int,
    "data.window_stride": int,
    "data.pretrain_window_stride": int,
    "data.split": _list(float),
    "encoder.d_model": int,
    "encoder.n_blocks": int,
    "encoder.n_heads": int,
    "encoder.d_ff": int,
    "encoder.dropout_embed": float,
    "encoder.dropout_attn": float,
    "encoder.dropout_ff": float,
    "encoder.dropout": float,
    "encoder.patch_len": int,
    "encoder.stride": int,
    "encoder.isolate_cls": _bool,
    "encoder.pooling": _choice(POOLING_METHODS),
    "train.lr": float,
    "train.weight_decay": float,
    "train.beta1": float,
    "train.beta2": float,
    "train.adam_eps": float,
    "train.batch_size": int,
    "train.epochs": int,
    "train.lambda": float,
    "train.patience": int,
    "train.precision": _choice(("f32", "f64")),
    "train.grad_clip": _opt(float),
    "train.stop_gradient": _bool,
    "train.channel_independence": _bool,
    "train.augmentation": _opt(_choice(AUGMENTATIONS)),
    "probe.lr": float,
    "probe.batch_size": int,
    "probe.epochs": int,
    "probe.patience": int,
    "probe.weight_decay_grid": _list(float),
    "finetune.label_fractions": _list(float),
    "finetune.lr": float,
    "finetune.batch_size": int,
    "finetune.epochs": int,
    "finetune.patience": int,
    "ablation.axis": _list(str),
    "ablation.lambda_grid": _list(float),
}


def parse_config_text(text):
    """``{key: typed value}`` from config text; raises ConfigError on any bad line."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}", f"expected 'key = value', got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key in out:
            raise ConfigError(key, f"set twice (line {lineno})")
        out[key] = _convert(key, value)
    return out


def _convert(key, value):
    if key.startswith("augment."):
        parts = key.split(".")
        if len(parts) != 3 or parts[1] not in _AUG_DEFAULTS or parts[2] not in _AUG_DEFAULTS[parts[1]]:
            raise ConfigError(key, "unknown key")
        conv = float
    elif key in SCHEMA:
        conv = SCHEMA[key]
    else:
        raise ConfigError(key, "unknown key")
    try:
        return conv(value)
    except ValueError as exc:
        raise ConfigError(key, str(exc)) from None


@dataclass(frozen=True)
class RunConfig:
    """Everything one CLI job needs, with defaults filled in."""

    seed: int = 0
    task: str = "forecast"
    dataset: dict = field(default_factory=dict)
    synthetic: SyntheticSpec | None = None
    window: int = 64
    horizon: int = 16
    window_stride: int = 1
    pretrain_window_stride: int = 1
    split: tuple = (0.6, 0.2, 0.2)
    encoder: dict = field(default_factory=dict)
    pooling: str = "cls"
    train: TrainConfig = TrainConfig()
    probe: ProbeConfig = ProbeConfig()
    finetune: ProbeConfig = FINETUNE_CONFIG
    label_fractions: tuple = (0.1, 0.5, 1.0)
    ablation_axis: str | None = None
    lambda_grid: tuple = DEFAULT_LAMBDA_GRID
    augment_params: dict = field(default_factory=dict)
    source: dict = field(default_factory=dict)

    def encoder_config(self, n_channels):
        return EncoderConfig(seq_len=self.window, n_channels=n_channels, **self.encoder)

    def with_overrides(self, seed=None, precision=None):
        cfg = self
        if seed is not None:
            cfg = replace(cfg, seed=seed, train=replace(cfg.train, seed=seed),
                          source={**cfg.source, "seed": seed})
            if cfg.synthetic is not None and "synthetic.seed" not in self.source:
                cfg = replace(cfg, synthetic=replace(cfg.synthetic, seed=seed))
        if precision is not None:
            cfg = replace(cfg, train=replace(cfg.train, precision=precision),
                          source={**cfg.source, "train.precision": precision})
        return cfg

    def digest(self):
        """Short hash of the resolved settings, stable across loads."""
        return hashlib.sha256(json.dumps(self.source, sort_keys=True).encode()).hexdigest()[:16]


def build_run_config(values):
    """Resolve parsed ``values`` into a :class:`RunConfig`, checking cross-field rules."""
    v = dict(values)
    seed = v.get("seed", 0)
    section = lambda name: {k.split(".", 1)[1]: x for k, x in v.items() if k.startswith(name + ".")}

    dataset = section("dataset")
    syn = section("synthetic")
    if dataset.get("path") and syn:
        raise ConfigError("dataset.path", "give either a CSV path or a synthetic generator, not both")
    synthetic = None
    if not dataset.get("path"):
        syn.setdefault("seed", seed)
        task = v.get("task")
        syn.setdefault("generator", "class-frequency" if task == "classify" else "sinusoid-mix")
        syn["T"] = v.get("data.window", 64)
        synthetic = SyntheticSpec(**syn)
        try:
            synthetic.validate()
        except InvalidSpec as exc:
            raise ConfigError("synthetic", str(exc)) from None
    task = v.get("task", "classify" if synthetic is not None and synthetic.generator == "class-frequency"
                 else "forecast")
    if synthetic is not None and (synthetic.generator == "class-frequency") != (task == "classify"):
        raise ConfigError("task", f"task {task!r} does not fit generator {synthetic.generator!r}")

    encoder = section("encoder")
    pooling = encoder.pop("pooling", "cls")
    if "dropout" in encoder:
        p = encoder.pop("dropout")
        for k in ("dropout_embed", "dropout_attn", "dropout_ff"):
            encoder.setdefault(k, p)

    tr = section("train")
    betas = (tr.pop("beta1", 0.9), tr.pop("beta2", 0.999))
    if "lambda" in tr:
        tr["lam"] = tr.pop("lambda")
    augment_params = {}
    for k, x in v.items():
        if k.startswith("augment."):
            _, method, param = k.split(".")
            augment_params.setdefault(method, {})[param] = x
    if tr.get("augmentation"):
        tr["augmentation_params"] = augment_params.get(tr["augmentation"], {})
    train = TrainConfig(betas=betas, seed=seed, **tr)

    probe = replace(ProbeConfig(), **section("probe"))
    ft = section("finetune")
    fractions = ft.pop("label_fractions", (0.1, 0.5, 1.0))
    for f in fractions:
        if not 0.0 < f <= 1.0:
            raise ConfigError("finetune.label_fractions", f"fraction {f} outside (0, 1]")
    finetune = replace(FINETUNE_CONFIG, **ft)

    axes = v.get("ablation.axis", ())
    if len(axes) > 1:
        raise MultipleAxes(axes)
    for a in axes:
        if a not in ABLATION_AXES:
            raise ConfigError("ablation.axis", f"unknown axis {a!r}; expected one of {list(ABLATION_AXES)}")
    lambda_grid = v.get("ablation.lambda_grid", DEFAULT_LAMBDA_GRID)
    if any(x < 0 for x in lambda_grid):
        raise ConfigError("ablation.lambda_grid", "lambda values must be >= 0")

    split = v.get("data.split", (0.6, 0.2, 0.2))
    if len(split) != 3 or any(x <= 0 for x in split) or abs(sum(split) - 1) > 1e-9:
        raise ConfigError("data.split", f"need three positive ratios summing to 1, got {list(split)}")

    cfg = RunConfig(
        seed=seed, task=task, dataset=dataset, synthetic=synthetic,
        window=v.get("data.window", 64), horizon=v.get("data.horizon", 16),
        window_stride=v.get("data.window_stride", 1),
        pretrain_window_stride=v.get("data.pretrain_window_stride", 1),
        split=tuple(split), encoder=encoder, pooling=pooling, train=train, probe=probe,
        finetune=finetune, label_fractions=tuple(fractions),
        ablation_axis=axes[0] if axes else None, lambda_grid=tuple(lambda_grid),
        augment_params=augment_params,
        source={k: list(x) if isinstance(x, tuple) else x for k, x in v.items()},
    )
    _check(cfg)
    return cfg


def _check(cfg):
    try:
        cfg.train.validate()
    except ConfigInvalid as exc:
        raise ConfigError("train", str(exc)) from None
    try:
        cfg.encoder_config(1).validate()
    except (ConfigInvalid, TypeError) as exc:
        raise ConfigError("encoder", str(exc)) from None
    if cfg.window < 2 or cfg.horizon < 1 or cfg.window_stride < 1 or cfg.pretrain_window_stride < 1:
        raise ConfigError("data", "window >= 2, horizon >= 1 and strides >= 1 are required")
    if cfg.train.batch_size < 2:
        raise ConfigError("train.batch_size", "must be >= 2 for the contrastive head's BatchNorm")


def load_config(path):
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(str(path), f"cannot read config: {exc}") from None
    return build_run_config(parse_config_text(text))


def loads_config(text):
    return build_run_config(parse_config_text(text))


__all__ = ["ABLATION_AXES", "DEFAULT_LAMBDA_GRID", "RunConfig", "SCHEMA", "build_run_config",
           "load_config", "loads_config", "parse_config_text"]
