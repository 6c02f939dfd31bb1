"""Sparse geospatial topic models over venue check-ins.

Train a mixture of per-topic bivariate Gaussians with sparse multinomial
feature deviations, query feature distributions at locations, measure
feature importance by ablation and match similar regions across cities.
"""

__version__ = "0.1.0"

from .data import FEATURES, CheckinRecord, Dataset, FeatureDomains, aggregate_venues, split_train_test
from .errors import (
    DataFormatError,
    GeotopicsError,
    ModelFormatError,
    OutsideSupportError,
    RegionOutsideGridError,
)
from .model import ModelInstance, Region, dataset_log_likelihood, load_model, save_model
from .trainer import TrainingConfig, grid_search, run_em

__all__ = [
    "FEATURES",
    "CheckinRecord",
    "Dataset",
    "FeatureDomains",
    "aggregate_venues",
    "split_train_test",
    "DataFormatError",
    "GeotopicsError",
    "ModelFormatError",
    "OutsideSupportError",
    "RegionOutsideGridError",
    "ModelInstance",
    "Region",
    "dataset_log_likelihood",
    "load_model",
    "save_model",
    "TrainingConfig",
    "grid_search",
    "run_em",
]
