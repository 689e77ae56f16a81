"""Factor estimates from GLM residuals and the estimator-choice rule."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from pdcount.core import LEVELS, CountSeries, FactorProfile, make_profile, marginal_mean, separation_probability
from pdcount.errors import ConvergenceError, DataError, DomainError
from pdcount.estimators import FittedModel, fmm_fit

__all__ = [
    "MIN_N",
    "Recommendation",
    "standardized_residuals",
    "estimate_factors",
    "recommend",
    "RULES",
]

MIN_N = 10

RULES = {
    "covariates": "GLM: four or more covariates, where the HMM standard errors are unreliable",
    "sp_high": "HMM2: fewer than 4 covariates and SP at its high level",
    "sp_ac1_medium": "HMM2: fewer than 4 covariates and SP and AC1 both at medium or above",
    "default": "GLM: latent values too close together (SP low, or SP medium with AC1 low)",
}


def _rank(level: str) -> int:
    return LEVELS.index(level)


def standardized_residuals(fit: FittedModel, data: CountSeries) -> np.ndarray:
    """Pearson residuals ``(y - mu_hat) / sqrt(mu_hat)`` of a GLM fit."""
    if fit.model != "GLM":
        raise DomainError("standardized residuals are defined for a GLM fit")
    mu = marginal_mean(fit.beta, data.X)
    return (data.y - mu) / np.sqrt(mu)


def _acf1(r: np.ndarray) -> float:
    c = r - r.mean()
    den = float(c @ c)
    return float(c[1:] @ c[:-1]) / den if den > 0 else 0.0


def estimate_factors(
    residuals,
    fit: FittedModel,
    data: CountSeries,
    fmm: FittedModel | None = None,
    starts: int = 10,
    seed: int = 0,
) -> FactorProfile:
    """OD, AC1 and SP estimated from the data.

    OD is the sample variance of the residuals and AC1 their lag-1 sample
    autocorrelation.  SP is computed from an FMM2 fit (passed in or fitted
    here) at its fitted means; a fit that fails or collapses gives SP = 0.
    """
    r = np.asarray(residuals, float)
    if r.size < MIN_N:
        raise DataError(f"need at least {MIN_N} observations to estimate factors, got {r.size}")
    if r.size != data.n:
        raise DomainError("residuals and data differ in length")
    od = float(np.var(r, ddof=1))
    ac1 = _acf1(r)
    sp = 0.0
    if fmm is None:
        try:
            fmm = fmm_fit(data, starts=starts, seed=seed, glm=fit)
        except ConvergenceError:
            fmm = None
    if fmm is not None and fmm.latent is not None and "collapsed states" not in fmm.flags:
        S = fmm.latent.states
        sp = float(np.mean(separation_probability(marginal_mean(fmm.beta, data.X), S[0], S[1])))
    return make_profile(od, ac1, (sp,))


@dataclass(frozen=True)
class Recommendation:
    estimator: str
    profile: FactorProfile
    rule: str
    d: int

    def to_dict(self) -> dict:
        return {
            "estimator": self.estimator,
            "rule": self.rule,
            "d": self.d,
            "profile": self.profile.to_dict(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def recommend(profile: FactorProfile, d: int) -> Recommendation:
    """Pick GLM or HMM2 from the factor levels and the number of covariates ``d``.

    ``d`` excludes the intercept.  FMM2 is never chosen.
    """
    sp = _rank(profile.levels["sp"])
    ac1 = _rank(profile.levels["ac1"])
    medium = _rank("medium")
    if d >= 4:
        key = "covariates"
    elif sp == _rank("high"):
        key = "sp_high"
    elif sp >= medium and ac1 >= medium:
        key = "sp_ac1_medium"
    else:
        key = "default"
    choice = "HMM2" if key.startswith("sp") else "GLM"
    return Recommendation(estimator=choice, profile=profile, rule=RULES[key], d=int(d))
