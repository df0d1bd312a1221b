"""scikit-learn style wrappers.

:class:`DualLevelEncoder` pretrains on unlabeled windows and transforms them
to instance embeddings. :class:`LinearProbeClassifier` and
:class:`LinearProbeRegressor` fit a linear head on a fitted, frozen encoder.
All three follow the usual estimator contract: constructor arguments are
stored untouched, learned state ends in ``_``.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, RegressorMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .autograd import precision
from .checkpoint import load_checkpoint, save_checkpoint
from .encoder import EncoderConfig
from .evaluation import (
    ProbeConfig, _forecast_predict, _forecast_targets, _standardizer, _train_linear_probe,
    encode_windows,
)
from .pretext import DualLevelModel
from .trainer import Pretrainer, TrainConfig, model_from_checkpoint
from .validation import check_labels, check_targets, check_windows, holdout_indices


class DualLevelEncoder(TransformerMixin, BaseEstimator):
    """Self-supervised encoder producing instance and timestamp embeddings.

    ``fit`` pretrains on ``X`` of shape ``[N, T, C]`` (or ``[N, T]``);
    ``transform`` returns instance embeddings ``[N, D]``. Under
    ``channel_independence`` each channel is encoded separately and the
    per-channel embeddings are concatenated to ``[N, C * D]``.
    """

    def __init__(self, d_model=64, n_blocks=2, n_heads=4, d_ff=128, dropout=0.1, patch_len=8,
                 stride=8, pooling="cls", lam=1.0, lr=1e-3, weight_decay=1e-4, batch_size=16,
                 epochs=50, patience=10, stop_gradient=True, channel_independence=False,
                 grad_clip=5.0, precision="f32", random_state=0):
        self.d_model = d_model
        self.n_blocks = n_blocks
        self.n_heads = n_heads
        self.d_ff = d_ff
        self.dropout = dropout
        self.patch_len = patch_len
        self.stride = stride
        self.pooling = pooling
        self.lam = lam
        self.lr = lr
        self.weight_decay = weight_decay
        self.batch_size = batch_size
        self.epochs = epochs
        self.patience = patience
        self.stop_gradient = stop_gradient
        self.channel_independence = channel_independence
        self.grad_clip = grad_clip
        self.precision = precision
        self.random_state = random_state

    def _configs(self, T, C):
        enc = EncoderConfig(d_model=self.d_model, n_blocks=self.n_blocks, n_heads=self.n_heads,
                            d_ff=self.d_ff, dropout_embed=self.dropout, dropout_attn=self.dropout,
                            dropout_ff=self.dropout, patch_len=self.patch_len, stride=self.stride,
                            n_channels=1 if self.channel_independence else C, seq_len=T)
        train = TrainConfig(lr=self.lr, weight_decay=self.weight_decay, batch_size=self.batch_size,
                            epochs=self.epochs, lam=self.lam, seed=self.random_state,
                            patience=self.patience, precision=self.precision, grad_clip=self.grad_clip,
                            stop_gradient=self.stop_gradient,
                            channel_independence=self.channel_independence)
        return enc.validate(), train.validate()

    def fit(self, X, y=None, X_val=None):
        """Pretrain on ``X``; ``X_val`` (optional) drives early stopping. ``y`` is ignored."""
        X = check_windows(X)
        if X_val is not None:
            X_val = check_windows(X_val, "X_val", X.shape[1], X.shape[2])
        enc, train = self._configs(X.shape[1], X.shape[2])
        with precision(self.precision):
            model = DualLevelModel.init(enc, self.random_state, self.pooling)
        result = Pretrainer(model, train, X, X_val).run()
        self.model_ = result.model
        self.history_ = result.history
        self.best_epoch_ = result.best_epoch
        self.seq_len_, self.n_channels_ = X.shape[1], X.shape[2]
        self.n_features_in_ = X.shape[1] * X.shape[2]
        return self

    def _check(self, X):
        check_is_fitted(self, "model_")
        return check_windows(X, seq_len=self.seq_len_, n_channels=self.n_channels_)

    def transform(self, X):
        X = self._check(X)
        zi = encode_windows(self.model_, X, self.channel_independence)[0]
        return zi.reshape(len(X), -1).astype(np.float64)

    def transform_timestamps(self, X):
        """Timestamp embeddings ``[N', T_p, D]`` (``N' = N * C`` under channel independence)."""
        X = self._check(X)
        return encode_windows(self.model_, X, self.channel_independence)[1].astype(np.float64)

    def save(self, path):
        check_is_fitted(self, "model_")
        from .checkpoint import Checkpoint
        from . import params as P

        ckpt = Checkpoint(self.model_.config.to_dict(), P.snapshot(self.model_.params),
                          {k: v.copy() for k, v in self.model_.buffers.items()},
                          history=self.history_,
                          meta={"pooling": self.model_.pooling, "estimator": self.get_params(),
                                "seq_len": self.seq_len_, "n_channels": self.n_channels_,
                                "best_epoch": self.best_epoch_})
        return save_checkpoint(path, ckpt)

    @classmethod
    def load(cls, path):
        ckpt = load_checkpoint(path)
        est = cls(**ckpt.meta["estimator"])
        est.model_ = model_from_checkpoint(ckpt)
        est.history_ = ckpt.history
        est.best_epoch_ = ckpt.meta["best_epoch"]
        est.seq_len_, est.n_channels_ = ckpt.meta["seq_len"], ckpt.meta["n_channels"]
        est.n_features_in_ = est.seq_len_ * est.n_channels_
        return est


class _ProbeBase(BaseEstimator):
    def __init__(self, encoder=None, lr=1e-2, epochs=100, batch_size=8, patience=10,
                 weight_decay_grid=(1e-4, 1e-2, 1e-1, 1.0, 10.0), val_fraction=0.2, random_state=0):
        self.encoder = encoder
        self.lr = lr
        self.epochs = epochs
        self.batch_size = batch_size
        self.patience = patience
        self.weight_decay_grid = weight_decay_grid
        self.val_fraction = val_fraction
        self.random_state = random_state

    def _probe_config(self):
        return ProbeConfig(lr=self.lr, epochs=self.epochs, batch_size=self.batch_size,
                           patience=self.patience, weight_decay_grid=tuple(self.weight_decay_grid))

    def _encoder(self):
        if self.encoder is None:
            raise ValueError("a fitted DualLevelEncoder is required")
        check_is_fitted(self.encoder, "model_")
        return self.encoder


class LinearProbeClassifier(ClassifierMixin, _ProbeBase):
    """Softmax-regression head on the frozen encoder's instance embeddings."""

    def fit(self, X, y):
        enc = self._encoder()
        X = enc._check(X)
        y = check_labels(y, len(X))
        self.classes_, y_idx = np.unique(y, return_inverse=True)
        F = enc.transform(X).astype(enc.model_.params["encoder.cls_token"].dtype)
        tr, va = holdout_indices(len(X), self.val_fraction, self.random_state, y_idx)
        if len(va) == 0:
            tr = va = np.arange(len(X))
        self._scale = _standardizer(F[tr])
        Fs = self._scale(F)
        self.coef_, self.intercept_, self.probe_info_ = _train_linear_probe(
            Fs[tr], y_idx[tr], Fs[va], y_idx[va], len(self.classes_), "classification",
            self._probe_config(), self.random_state, "class_head")
        self.n_features_in_ = enc.n_features_in_
        return self

    def decision_function(self, X):
        check_is_fitted(self, "coef_")
        F = self._scale(self.encoder.transform(X).astype(self.coef_.dtype))
        return F @ self.coef_.T + self.intercept_

    def predict_proba(self, X):
        z = self.decision_function(X)
        z = z - z.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)

    def predict(self, X):
        return self.classes_[np.argmax(self.decision_function(X), axis=1)]


class LinearProbeRegressor(RegressorMixin, _ProbeBase):
    """Linear forecaster from flattened timestamp embeddings to the next ``H`` steps.

    ``fit(X, Y)`` takes windows ``[N, T, C]`` and futures ``[N, H, C]``;
    ``predict`` returns ``[N, H, C]`` in the original units.
    """

    def fit(self, X, Y):
        enc = self._encoder()
        X = enc._check(X)
        Y = check_targets(Y, len(X))
        if Y.shape[2] != X.shape[2]:
            raise ValueError(f"targets have {Y.shape[2]} channels, windows {X.shape[2]}")
        ci = enc.channel_independence
        _, zt, stats, _ = encode_windows(enc.model_, X, ci)
        F = zt.reshape(len(zt), -1)
        T = _forecast_targets(Y, stats, ci)
        tr, va = holdout_indices(len(F), self.val_fraction, self.random_state)
        self._scale = _standardizer(F[tr])
        Fs = self._scale(F)
        self.coef_, self.intercept_, self.probe_info_ = _train_linear_probe(
            Fs[tr], T[tr], Fs[va], T[va], T.shape[1], "regression",
            self._probe_config(), self.random_state, "forecast_head")
        self.horizon_ = Y.shape[1]
        self.n_features_in_ = enc.n_features_in_
        return self

    def predict(self, X):
        check_is_fitted(self, "coef_")
        enc = self.encoder
        X = enc._check(X)
        _, zt, stats, _ = encode_windows(enc.model_, X, enc.channel_independence)
        flat = self._scale(zt.reshape(len(zt), -1)) @ self.coef_.T + self.intercept_
        return _forecast_predict(flat, stats, self.horizon_, X.shape[2], enc.channel_independence)

    def score(self, X, Y, sample_weight=None):
        """Coefficient of determination over all forecast values."""
        from sklearn.metrics import r2_score

        Y = check_targets(Y, len(X))
        return r2_score(Y.reshape(len(Y), -1), self.predict(X).reshape(len(Y), -1),
                        sample_weight=sample_weight)


__all__ = ["DualLevelEncoder", "LinearProbeClassifier", "LinearProbeRegressor"]
