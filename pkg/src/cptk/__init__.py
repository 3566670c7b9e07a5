"""Calibrated prediction sets for any classifier.

Turn per-sample class probabilities (plus feature embeddings) into
prediction sets with a guaranteed marginal coverage rate: classic
split-conformal baselines with global thresholds, and a learned
instance-based threshold that is conformalized afterwards.
"""

from .conformal import (
    CalibratedThreshold,
    ConformalScoreSet,
    calibrate,
    conformal_quantile,
    naive_threshold,
    predict_set,
    tune_raps,
)
from .core import (
    LabeledExample,
    NumericalError,
    PredictionSet,
    ProbabilityVector,
    RankedProbabilities,
    RapsParams,
    ShapeError,
    ValidationError,
    aps_score,
    aps_score_randomized,
    build_prediction_set,
    rank,
    raps_score,
    raps_score_randomized,
)
from .cpsn import (
    CpsnConformalizer,
    conformalize_phase,
    run_pipeline,
    train_phase,
)
from .dataio import Dataset, DatasetManifest, DataFormatError, load_dataset, split_indices, write_dataset
from .evaluation import EvalReport, SyntheticTask, avg_size, coverage, generate_synthetic
from .experiments import run_experiment
from .regressor import RegressorModel, TrainConfig, forward, loss_and_grad, train
from .tempscale import TemperatureModel, apply_temperature, fit_temperature

__version__ = "0.1.0"

__all__ = [
    "CalibratedThreshold",
    "ConformalScoreSet",
    "CpsnConformalizer",
    "DataFormatError",
    "Dataset",
    "DatasetManifest",
    "EvalReport",
    "LabeledExample",
    "NumericalError",
    "PredictionSet",
    "ProbabilityVector",
    "RankedProbabilities",
    "RapsParams",
    "RegressorModel",
    "ShapeError",
    "SyntheticTask",
    "TemperatureModel",
    "TrainConfig",
    "ValidationError",
    "aps_score",
    "aps_score_randomized",
    "apply_temperature",
    "avg_size",
    "build_prediction_set",
    "calibrate",
    "conformal_quantile",
    "conformalize_phase",
    "coverage",
    "fit_temperature",
    "forward",
    "generate_synthetic",
    "load_dataset",
    "loss_and_grad",
    "naive_threshold",
    "predict_set",
    "rank",
    "raps_score",
    "raps_score_randomized",
    "run_experiment",
    "run_pipeline",
    "split_indices",
    "tune_raps",
    "train",
    "train_phase",
    "write_dataset",
]
