"""Drift-aware in-context classification for temporally shifting tabular data."""
from .benchmarks import BENCHMARKS, load_benchmark, load_csv, save_csv
from .config import (
    CapacityError,
    ConfigError,
    DataError,
    DriftPFNError,
    PriorConfig,
    SamplingError,
    TrainingFault,
)
from .dataset import DriftDataset, TemporalDomainSchedule
from .drift_prior import sample_dataset
from .estimator import DriftPFNClassifier
from .evaluation import eval_fix_split, run_comparison
from .model import IclModel, predict

__all__ = [
    "BENCHMARKS",
    "CapacityError",
    "ConfigError",
    "DataError",
    "DriftDataset",
    "DriftPFNClassifier",
    "DriftPFNError",
    "IclModel",
    "PriorConfig",
    "SamplingError",
    "TemporalDomainSchedule",
    "TrainingFault",
    "eval_fix_split",
    "load_benchmark",
    "load_csv",
    "predict",
    "run_comparison",
    "sample_dataset",
    "save_csv",
]

__version__ = "0.1.0"
