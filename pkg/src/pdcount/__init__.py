"""Regression for count time series with a latent process.

GLM, two-state finite-mixture and two-state hidden-Markov Poisson
estimators, sandwich standard errors, simulation and calibration of latent
processes, Monte Carlo studies and factor diagnostics.
"""

from pdcount.core import CountSeries, FactorProfile, LatentSpec, factor_profile
from pdcount.diagnostics import estimate_factors, recommend, standardized_residuals
from pdcount.errors import PdcountError
from pdcount.estimators import FittedModel, fit, fmm_fit, glm_fit, hmm_fit
from pdcount.inference import ddw_moment_se, white_covariance
from pdcount.simulation import CalibrationTarget, SimConfig, calibrate, simulate
from pdcount.study import StudyDesign, preset, run_study

__version__ = "0.1.0"

__all__ = [
    "CountSeries",
    "FactorProfile",
    "LatentSpec",
    "factor_profile",
    "estimate_factors",
    "recommend",
    "standardized_residuals",
    "PdcountError",
    "FittedModel",
    "fit",
    "fmm_fit",
    "glm_fit",
    "hmm_fit",
    "ddw_moment_se",
    "white_covariance",
    "CalibrationTarget",
    "SimConfig",
    "calibrate",
    "simulate",
    "StudyDesign",
    "preset",
    "run_study",
]
