"""Moment-based ACE variance decomposition for twin-pair data.

Includes the classical Falconer and normal-theory NACE estimators, their
second-order GEE (GEE2) counterparts with sandwich standard errors, and a
Monte Carlo harness for checking coverage.
"""

from .data import TwinDataset, TwinPair, Zygosity, center, read_csv, residualize, write_csv
from .estimators import (
    Estimator,
    FitOptions,
    FitResult,
    fit,
    fit_all,
    fit_with_variance_covariates,
    wald_contrast,
)
from .simulate import ScenarioConfig, simulate, truth
from .study import StudyConfig, preset, run_study

__all__ = [
    "Estimator", "FitOptions", "FitResult", "ScenarioConfig", "StudyConfig",
    "TwinDataset", "TwinPair", "Zygosity", "center", "fit", "fit_all",
    "fit_with_variance_covariates", "preset", "read_csv", "residualize",
    "run_study", "simulate", "truth", "wald_contrast", "write_csv",
]

__version__ = "0.1.0"
