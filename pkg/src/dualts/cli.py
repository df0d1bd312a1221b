"""Command-line front end.

Every command reads one config file (see :mod:`dualts.config`) and writes
its artifacts to ``--out``. ``--seed`` and ``--precision`` override the
config. Exit status is 0 on success; failures map to the ``exit_code`` of
their error family (2 config, 3 data, 4 numeric, 5 checkpoint, 6 task
mismatch, 1 anything else).
"""

from __future__ import annotations

import argparse
import csv
import datetime
import hashlib
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .autograd import Tensor, precision
from .checkpoint import load_checkpoint, save_checkpoint
from .config import load_config
from .data import label_subsample, load_csv, make_windows, split_train_val_test, stack_windows
from .encoder import POOLING_METHODS, anisotropy_score, pool
from .errors import ConfigError, DualTSError, TaskMismatch
from .evaluation import (
    FORECAST_PROBE_INPUT, encode_windows, fine_tune, linear_eval_classify, linear_eval_forecast,
)
from .pretext import DualLevelModel
from .synthetic import generate_synthetic
from .trainer import Pretrainer, model_from_checkpoint, write_loss_csv

RUN_NOTES = {
    "validation_loss": "dropout on for both views, contrastive BatchNorm in eval mode",
    "contrastive_batchnorm": "statistics over the flattened (channel-independent) pseudo-batch",
    "augmentation_views": "when an augmentation is set it is drawn independently for both views",
    "forecast_probe_input": FORECAST_PROBE_INPUT,
}


# -- shared plumbing --------------------------------------------------------------

def _out_dir(path):
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p


def load_dataset(cfg):
    if cfg.synthetic is not None:
        return generate_synthetic(cfg.synthetic), f"synthetic:{cfg.synthetic.generator}:{cfg.synthetic.seed}"
    d = cfg.dataset
    ds = load_csv(d["path"], d.get("has_header", True), d.get("timestamp_column"), d.get("label_column"),
                  d.get("instance_column"), d.get("frequency_note", ""))
    return ds, f"csv:{Path(d['path']).name}"


class Splits:
    """Train/val/test arrays for one config; identical for every arm of an ablation."""

    def __init__(self, cfg):
        ds, self.dataset_id = load_dataset(cfg)
        if cfg.task == "classify" and not ds.is_classification:
            raise TaskMismatch("task is classify but the dataset has no labels")
        if cfg.task == "forecast" and ds.is_classification:
            raise TaskMismatch("task is forecast but the dataset is labelled instances")
        if cfg.task == "classify" and cfg.train.channel_independence:
            raise ConfigError("train.channel_independence", "only supported for forecasting")
        self.task = cfg.task
        self.parts = split_train_val_test(ds, cfg.split, cfg.seed)
        self.n_channels = ds.n_channels
        if cfg.task == "classify":
            if ds.values.shape[1] != cfg.window:
                raise ConfigError("data.window", f"instances have length {ds.values.shape[1]}, "
                                                 f"config says {cfg.window}")
            self.samples = make_windows(self.parts[0], cfg.window, 1)
            self.train, self.val, self.test = ((p.values, p.labels) for p in self.parts)
            self.pretrain_X = self.train[0]
            self.K = int(ds.labels.max()) + 1
        else:
            T, H = cfg.window, cfg.horizon
            self.samples = make_windows(self.parts[0], T, H, cfg.window_stride)
            self.train = stack_windows(self.samples)
            self.val, self.test = (stack_windows(make_windows(p, T, H, cfg.window_stride))
                                   for p in self.parts[1:])
            self.pretrain_X = stack_windows(make_windows(self.parts[0], T, H, cfg.pretrain_window_stride))[0]
            self.K = None

    def digest(self):
        h = hashlib.sha256()
        for X, Y in (self.train, self.val, self.test):
            h.update(np.ascontiguousarray(X).tobytes())
            h.update(np.ascontiguousarray(Y).tobytes())
        return h.hexdigest()[:16]


def _encoder_config(cfg, splits):
    return cfg.encoder_config(1 if cfg.train.channel_independence else splits.n_channels)


def run_pretrain(cfg, splits, train_cfg=None, pooling=None):
    train_cfg = train_cfg or cfg.train
    with precision(train_cfg.precision):
        model = DualLevelModel.init(_encoder_config(cfg, splits), cfg.seed, pooling or cfg.pooling)
    trainer = Pretrainer(model, train_cfg, splits.pretrain_X, splits.val[0])
    result = trainer.run()
    return trainer, result


def run_probe(cfg, splits, model):
    if cfg.task == "classify":
        return linear_eval_classify(model, splits.train, splits.val, splits.test, splits.K,
                                    cfg.probe, cfg.seed, splits.dataset_id)
    return linear_eval_forecast(model, splits.train, splits.val, splits.test, cfg.horizon,
                                cfg.train.channel_independence, cfg.probe, cfg.seed, splits.dataset_id)


def _write_json(path, obj):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, sort_keys=True, indent=2)
        fh.write("\n")


def _load_model(path, cfg):
    ckpt = load_checkpoint(path)
    task = ckpt.meta.get("task")
    if task is not None and task != cfg.task:
        raise TaskMismatch(f"checkpoint was pretrained for {task!r}, config asks for {cfg.task!r}")
    return model_from_checkpoint(ckpt), ckpt


# -- commands -------------------------------------------------------------------------

def cmd_pretrain(cfg, out):
    splits = Splits(cfg)
    trainer, result = run_pretrain(cfg, splits)
    ckpt = trainer.to_checkpoint(meta={"task": cfg.task, "dataset_id": splits.dataset_id,
                                       "config": cfg.source, "config_hash": cfg.digest()})
    save_checkpoint(out / "checkpoint.tdrl", ckpt)
    write_loss_csv(out / "losses.csv", result.history)
    _write_json(out / "run.json", {
        "command": "pretrain", "config_hash": cfg.digest(), "seed": cfg.seed, "version": __version__,
        "finished_at": datetime.datetime.now(datetime.timezone.utc).isoformat(),
        "epochs_run": trainer.epoch, "best_epoch": result.best_epoch,
        "stopped_early": result.stopped_early, "split_digest": splits.digest(), "notes": RUN_NOTES,
    })
    return 0


def cmd_eval(cfg, out, checkpoint):
    model, ckpt = _load_model(checkpoint, cfg)
    splits = Splits(cfg)
    report = run_probe(cfg, splits, model)
    report.config_hash = cfg.digest()
    report.write(out / "metrics.json")
    report.append_to_ledger(out / "ledger.csv")
    return 0


FINETUNE_COLUMNS = ("label_fraction", "init", "metric", "value", "n_labeled")


def cmd_finetune(cfg, out, checkpoint=None):
    splits = Splits(cfg)
    pretrained = _load_model(checkpoint, cfg)[0] if checkpoint else None
    inits = (("pretrained", pretrained), ("random", None)) if pretrained is not None else (("random", None),)
    rows = []
    for fraction in cfg.label_fractions:
        samples = label_subsample(splits.samples, fraction, cfg.seed)
        for init, model in inits:
            with precision(cfg.train.precision):
                report = fine_tune(model, _encoder_config(cfg, splits), samples, splits.val, splits.test,
                                   cfg.task, K=splits.K, H=cfg.horizon, config=cfg.finetune,
                                   seed=cfg.seed, label_fraction=fraction,
                                   channel_independence=cfg.train.channel_independence,
                                   pooling=cfg.pooling, dataset_id=splits.dataset_id)
            report.config_hash = cfg.digest()
            report.append_to_ledger(out / "ledger.csv")
            for metric, value in report.metrics.items():
                rows.append((repr(float(fraction)), init, metric, repr(float(value)), report.meta["n_labeled"]))
    with open(out / "finetune.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(FINETUNE_COLUMNS)
        w.writerows(rows)
    return 0


def ablation_arms(cfg):
    """``[(arm_id, TrainConfig, pooling)]`` for the configured axis; the control arm comes first."""
    from .data import AUGMENTATIONS

    axis, base = cfg.ablation_axis, cfg.train
    if axis is None:
        raise ConfigError("ablation.axis", "ablate needs exactly one axis")
    if axis == "augmentation":
        arms = [("none", replace(base, augmentation=None), cfg.pooling)]
        arms += [(m, replace(base, augmentation=m, augmentation_params=cfg.augment_params.get(m, {})),
                  cfg.pooling) for m in AUGMENTATIONS]
    elif axis == "pooling":
        arms = [(p, base, p) for p in POOLING_METHODS]
    elif axis == "stop_gradient":
        arms = [("on", replace(base, stop_gradient=True), cfg.pooling),
                ("off", replace(base, stop_gradient=False), cfg.pooling)]
    else:
        arms = [(f"lambda={lam!r}", replace(base, lam=lam), cfg.pooling) for lam in cfg.lambda_grid]
        control = next((i for i, lam in enumerate(cfg.lambda_grid) if lam == 1.0), 0)
        arms.insert(0, arms.pop(control))
    return arms


def cmd_ablate(cfg, out):
    splits = Splits(cfg)
    results = []
    for arm_id, train_cfg, pooling in ablation_arms(cfg):
        _, result = run_pretrain(cfg, splits, train_cfg, pooling)
        report = run_probe(cfg, splits, result.model)
        results.append((arm_id, report.metrics))
    names = list(results[0][1])
    control = results[0][1]
    digest = splits.digest()
    with open(out / "ablation.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["axis", "arm", "control", *names, *(f"delta_{n}" for n in names), "split_digest"])
        for i, (arm_id, metrics) in enumerate(results):
            w.writerow([cfg.ablation_axis, arm_id, int(i == 0),
                        *(repr(float(metrics[n])) for n in names),
                        *(repr(float(metrics[n] - control[n])) for n in names), digest])
    return 0


def cmd_export_embeddings(cfg, out, checkpoint, timestamps=False):
    model, _ = _load_model(checkpoint, cfg)
    splits = Splits(cfg)
    X = np.concatenate([splits.train[0], splits.val[0], splits.test[0]])
    ci = cfg.train.channel_independence
    zi, zt, _, _ = encode_windows(model, X, ci)
    zi = zi.reshape(len(X), -1)
    with open(out / "embeddings.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample", *(f"z{j}" for j in range(zi.shape[1]))])
        for i, row in enumerate(zi):
            w.writerow([i, *(repr(float(v)) for v in row)])
    if timestamps:
        flat = zt.reshape(len(X), -1)
        with open(out / "timestamp_embeddings.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["sample", *(f"t{j}" for j in range(flat.shape[1]))])
            for i, row in enumerate(flat):
                w.writerow([i, *(repr(float(v)) for v in row)])
    summary = {"n_samples": len(X), "dim": int(zi.shape[1]), "pooling": model.pooling, "anisotropy": {}}
    dual_cls = encode_windows(replace_pooling(model, "cls"), X, ci)[0]
    summary["anisotropy"]["cls"] = anisotropy_score(dual_cls)
    for method in POOLING_METHODS[1:]:
        summary["anisotropy"][method] = anisotropy_score(pool(Tensor(zt), method).data)
    _write_json(out / "summary.json", summary)
    return 0


def replace_pooling(model, pooling):
    return DualLevelModel(model.config, model.params, model.buffers, pooling, model.pretrained)


def cmd_gen_data(cfg, out):
    if cfg.synthetic is None:
        raise ConfigError("synthetic.generator", "gen-data needs a synthetic generator")
    ds = generate_synthetic(cfg.synthetic)
    path = out / "data.csv"
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        names = list(ds.feature_names)
        if ds.is_classification:
            w.writerow(["instance", "t", *names, "label"])
            for i, (x, y) in enumerate(zip(ds.values, ds.labels)):
                for t, row in enumerate(x):
                    w.writerow([i, t, *(repr(float(v)) for v in row), int(y)])
        else:
            w.writerow(["t", *names])
            for t, row in enumerate(ds.values):
                w.writerow([t, *(repr(float(v)) for v in row)])
    _write_json(out / "spec.json", cfg.synthetic.to_dict())
    return 0


# -- entry point ------------------------------------------------------------------------

def build_parser():
    parser = argparse.ArgumentParser(prog="dualts", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_text, checkpoint=None):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, help="run config file")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, help="override the config's root seed")
        p.add_argument("--precision", choices=("f32", "f64"), help="override train.precision")
        if checkpoint == "required":
            p.add_argument("--checkpoint", required=True, help="pretrained checkpoint")
        elif checkpoint == "optional":
            p.add_argument("--checkpoint", help="pretrained checkpoint (omit for random init only)")
        return p

    add("pretrain", "pretrain an encoder; writes checkpoint, loss CSV and run metadata")
    add("eval", "frozen linear probe on a pretrained checkpoint", "required")
    add("finetune", "fine-tune on label fractions, pretrained vs random init", "optional")
    add("ablate", "pretrain + probe every arm of one ablation axis")
    exp = add("export-embeddings", "write instance embeddings and anisotropy summary", "required")
    exp.add_argument("--timestamps", action="store_true", help="also write flattened timestamp embeddings")
    add("gen-data", "write a synthetic dataset as CSV")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config).with_overrides(args.seed, args.precision)
        out = _out_dir(args.out)
        with precision(cfg.train.precision):
            if args.command == "pretrain":
                return cmd_pretrain(cfg, out)
            if args.command == "eval":
                return cmd_eval(cfg, out, args.checkpoint)
            if args.command == "finetune":
                return cmd_finetune(cfg, out, args.checkpoint)
            if args.command == "ablate":
                return cmd_ablate(cfg, out)
            if args.command == "export-embeddings":
                return cmd_export_embeddings(cfg, out, args.checkpoint, args.timestamps)
            return cmd_gen_data(cfg, out)
    except DualTSError as exc:
        print(f"error ({type(exc).__name__}): {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
