"""Conformal prediction sets as pseudo-labelers for semi-supervised learning."""

from .conformal import (
    ConformalCalibrator,
    ConformalConfig,
    calibrate,
    conformal_score,
    empirical_coverage,
    predict_set,
    predict_sets,
    rank,
)
from .data_io import Dataset, IterationReport, RunMetrics, gen_blobs, gen_moons, load_csv, split
from .errors import (
    CalibrationError,
    ConformalSSLError,
    InvalidArgumentError,
    NumericError,
    ParseError,
    ShapeError,
    SplitError,
)
from .model_core import ModelParams, TrainConfig, fit_temperature, forward, init_params, softmax, train
from .pseudo_label import PseudoLabelRecord, SelectionConfig, mc_dropout_stats, select_mask
from .ssl_pipeline import SSLConfig, SSLResult, run

__version__ = "0.1.0"

__all__ = [
    "CalibrationError",
    "ConformalCalibrator",
    "ConformalConfig",
    "ConformalSSLError",
    "Dataset",
    "InvalidArgumentError",
    "IterationReport",
    "ModelParams",
    "NumericError",
    "ParseError",
    "PseudoLabelRecord",
    "RunMetrics",
    "SSLConfig",
    "SSLResult",
    "SelectionConfig",
    "ShapeError",
    "SplitError",
    "TrainConfig",
    "calibrate",
    "conformal_score",
    "empirical_coverage",
    "fit_temperature",
    "forward",
    "gen_blobs",
    "gen_moons",
    "init_params",
    "load_csv",
    "mc_dropout_stats",
    "predict_set",
    "predict_sets",
    "rank",
    "run",
    "select_mask",
    "softmax",
    "split",
    "train",
]
