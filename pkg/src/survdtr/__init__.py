"""Survival-probability-maximizing dynamic treatment regimes with censored data.

Policies are linear angle-based rules, one per stage, learned by maximizing
a smoothed inverse-propensity-weighted Kaplan-Meier estimate of the survival
probability at a target time.
"""
from .dataset import Dataset, StageRecord, TimeGrid, Trajectory, build_time_grid, load_dir, write_long_csv
from .estimator import SurrogateParams, km_value_hard, km_value_smooth
from .geometry import ConstantRule, FixedRule, PolicySet, build_simplex, recommend
from .optimizer import FitConfig, FitResult, fit_policy
from .propensity import FittedPropensity, KnownPropensity, UniformPropensity, fit_propensity_models
from .tuning import TuningGrid, cross_validate, kfold_split

__version__ = "0.1.0"

__all__ = [
    "Dataset",
    "StageRecord",
    "TimeGrid",
    "Trajectory",
    "build_time_grid",
    "load_dir",
    "write_long_csv",
    "SurrogateParams",
    "km_value_hard",
    "km_value_smooth",
    "ConstantRule",
    "FixedRule",
    "PolicySet",
    "build_simplex",
    "recommend",
    "FitConfig",
    "FitResult",
    "fit_policy",
    "FittedPropensity",
    "KnownPropensity",
    "UniformPropensity",
    "fit_propensity_models",
    "TuningGrid",
    "cross_validate",
    "kfold_split",
]
