"""Multi-view fusion strategies for binary classification of multi-view
time series: data model, differentiation substrate, architectures,
training protocol, metrics, and CLI."""

from .data import (
    MultiViewDataset,
    ViewSpec,
    load_dataset,
    split_train_val,
    standardize,
    temporal_average,
    write_dataset,
)
from .estimator import MultiViewClassifier
from .experiment import TrainRunResult, run_comparison, run_experiment, train_model
from .fusion import ModelConfig, build_model, ensemble_predict, fuse_gated, gate_weights, merge_simple
from .metrics import (
    aggregate,
    auc,
    average_accuracy,
    binary_f1,
    prediction_entropy,
    relative_improvement,
)
from .synth import SynthConfig, SynthViewConfig, synth_generate
from .training import Adam, EarlyStopping, TrainConfig, bce_loss, fit_model, multiloss_total

__version__ = "0.1.0"

__all__ = [
    "MultiViewDataset",
    "ViewSpec",
    "load_dataset",
    "write_dataset",
    "standardize",
    "temporal_average",
    "split_train_val",
    "SynthConfig",
    "SynthViewConfig",
    "synth_generate",
    "ModelConfig",
    "build_model",
    "merge_simple",
    "gate_weights",
    "fuse_gated",
    "ensemble_predict",
    "MultiViewClassifier",
    "TrainConfig",
    "Adam",
    "EarlyStopping",
    "bce_loss",
    "multiloss_total",
    "fit_model",
    "TrainRunResult",
    "train_model",
    "run_experiment",
    "run_comparison",
    "average_accuracy",
    "auc",
    "binary_f1",
    "prediction_entropy",
    "relative_improvement",
    "aggregate",
    "__version__",
]
