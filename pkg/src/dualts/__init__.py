"""Disentangled dual-level self-supervised representations for time series.

A small Transformer encoder reads patched windows with a prepended [CLS]
token. Its timestamp embeddings are trained to reconstruct the patches and
its instance embedding is trained to agree across two dropout views, with a
stop-gradient on the target side. Everything runs on a bundled numpy
reverse-mode autodiff engine.
"""

__version__ = "0.1.0"

from .encoder import DualEmbedding, EncoderConfig, anisotropy_score  # noqa: E402
from .estimators import DualLevelEncoder, LinearProbeClassifier, LinearProbeRegressor  # noqa: E402
from .evaluation import (  # noqa: E402
    MetricsReport, compute_classification_metrics, compute_forecast_metrics, fine_tune,
    linear_eval_classify, linear_eval_forecast,
)
from .pretext import DualLevelModel, LossBreakdown  # noqa: E402
from .synthetic import SyntheticSpec, generate_synthetic  # noqa: E402
from .trainer import Pretrainer, TrainConfig, pretrain  # noqa: E402

__all__ = [
    "DualEmbedding", "DualLevelEncoder", "DualLevelModel", "EncoderConfig", "LinearProbeClassifier",
    "LinearProbeRegressor", "LossBreakdown", "MetricsReport", "Pretrainer", "SyntheticSpec",
    "TrainConfig", "anisotropy_score", "compute_classification_metrics", "compute_forecast_metrics",
    "fine_tune", "generate_synthetic", "linear_eval_classify", "linear_eval_forecast", "pretrain",
    "__version__",
]
