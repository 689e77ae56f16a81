"""Domain types, marginal moment algebra and data-property factors.

Counts follow ``Y_t | alpha_t ~ Poisson(exp(X_t' beta + alpha_t))`` with a
stationary latent process satisfying ``E[exp(alpha_t)] = 1``.  Everything in
this module is a pure function of its inputs.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import special
from scipy.sparse.csgraph import connected_components

from pdcount.errors import DataError, DomainError, NonStationaryError

__all__ = [
    "LEVELS",
    "ANCHORS",
    "CountSeries",
    "LatentSpec",
    "LatentMoments",
    "FactorProfile",
    "marginal_mean",
    "marginal_variance",
    "marginal_covariance",
    "marginal_correlation",
    "stationary_distribution",
    "latent_moments",
    "overdispersion_factor",
    "separation_probability",
    "lag1_autocorrelation",
    "classify_level",
    "factor_profile",
]

LEVELS = ("low", "medium", "high")

# Factor-level anchors, averaged over covariate values.
ANCHORS = {
    "od": (1.5, 3.0, 5.0),
    "ac1": (0.15, 0.25, 0.5),
    "sp": (0.25, 0.45, 0.7),
}

_MAX_EXP = np.log(np.finfo(float).max)
_MEAN_ONE_TOL = 1e-8


@dataclass(frozen=True, eq=False)
class CountSeries:
    """Observed counts with their design matrix.

    Parameters
    ----------
    y : array of int, shape (n,)
        Non-negative counts in time order.
    X : array, shape (n, d)
        Design matrix whose first column is all ones.
    labels : sequence of str, optional
        Covariate names, one per column of ``X``.
    """

    y: np.ndarray
    X: np.ndarray
    labels: tuple[str, ...] = ()

    def __post_init__(self):
        y = np.asarray(self.y)
        X = np.atleast_2d(np.asarray(self.X, dtype=float))
        if y.ndim != 1:
            raise DataError("y must be one-dimensional")
        if X.shape[0] != y.shape[0]:
            raise DataError(f"X has {X.shape[0]} rows but y has {y.shape[0]}")
        if not np.all(np.isfinite(y.astype(float))):
            raise DataError("counts must be finite")
        if np.any(y < 0) or np.any(np.asarray(y, dtype=float) != np.round(y)):
            raise DataError("counts must be non-negative integers")
        if not np.all(np.isfinite(X)):
            raise DataError("design matrix must be finite")
        n, d = X.shape
        if not (n >= d >= 1):
            raise DataError(f"need n >= d >= 1, got n={n}, d={d}")
        if not np.all(X[:, 0] == 1.0):
            raise DataError("first column of X must be the intercept (all ones)")
        labels = tuple(self.labels) if self.labels else ("intercept",) + tuple(
            f"x{k}" for k in range(1, d)
        )
        if len(labels) != d:
            raise DataError(f"{len(labels)} labels for {d} columns")
        object.__setattr__(self, "y", y.astype(np.int64))
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "labels", labels)

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def d(self) -> int:
        return self.X.shape[1]

    def check_rank(self):
        """Raise if ``X`` does not have full column rank."""
        from pdcount.errors import RankDeficientError

        rank = np.linalg.matrix_rank(self.X)
        if rank < self.d:
            raise RankDeficientError(f"design matrix has rank {rank} < {self.d}")


@dataclass(frozen=True, eq=False)
class LatentSpec:
    """Law of the latent process ``alpha_t``.

    Use the :meth:`hmm`, :meth:`fmm` and :meth:`ar1` constructors.  For the
    AR(1) variant the intercept ``c = -sigma2 / (2 (1 + phi))`` is derived.
    """

    kind: str
    states: np.ndarray | None = None
    transition: np.ndarray | None = None
    probs: np.ndarray | None = None
    phi: float | None = None
    sigma2: float | None = None

    @classmethod
    def hmm(cls, states, transition) -> "LatentSpec":
        return cls("HMM", states=np.asarray(states, float), transition=np.asarray(transition, float))

    @classmethod
    def fmm(cls, states, probs) -> "LatentSpec":
        return cls("FMM", states=np.asarray(states, float), probs=np.asarray(probs, float))

    @classmethod
    def ar1(cls, phi: float, sigma2: float) -> "LatentSpec":
        return cls("AR1", phi=float(phi), sigma2=float(sigma2))

    def __post_init__(self):
        if self.kind not in ("HMM", "FMM", "AR1"):
            raise DomainError(f"unknown latent kind {self.kind!r}")
        if self.kind == "AR1":
            if self.phi is None or self.sigma2 is None:
                raise DomainError("AR1 needs phi and sigma2")
            if not -1.0 < self.phi < 1.0:
                raise DomainError(f"phi={self.phi} outside (-1, 1)")
            if not self.sigma2 >= 0.0:
                raise DomainError(f"sigma2={self.sigma2} must be non-negative")
            return
        S = self.states
        if S is None or S.ndim != 1 or S.size < 1:
            raise DomainError("states must be a non-empty vector")
        if not np.all(np.isfinite(S)):
            raise DomainError("states must be finite")
        # ties are allowed: a collapsed fit has S_1 == S_2
        if np.any(np.diff(S) < 0):
            raise DomainError("states must be increasing")
        if self.kind == "HMM":
            P = self.transition
            if P is None or P.shape != (S.size, S.size):
                raise DomainError("transition must be K x K")
            if np.any(P < 0) or np.any(P > 1) or not np.allclose(P.sum(axis=1), 1.0, atol=1e-12):
                raise DomainError("transition rows must be probability vectors")
            w = stationary_distribution(P)
        else:
            p = self.probs
            if p is None or p.shape != S.shape:
                raise DomainError("probs must match states")
            if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-12:
                raise DomainError("probs must be a probability vector")
            w = p
        mean = float(w @ np.exp(S))
        if abs(mean - 1.0) > _MEAN_ONE_TOL:
            raise DomainError(f"mean-one constraint violated: E[exp(alpha)] = {mean!r}")

    @property
    def K(self) -> int | None:
        return None if self.kind == "AR1" else self.states.size

    @property
    def intercept(self) -> float:
        """AR(1) intercept enforcing the mean-one constraint."""
        return -self.sigma2 / (2.0 * (1.0 + self.phi))

    @property
    def stationary(self) -> np.ndarray:
        if self.kind == "HMM":
            return stationary_distribution(self.transition)
        if self.kind == "FMM":
            return self.probs.copy()
        raise DomainError("AR1 latent has no discrete stationary distribution")

    def as_hmm(self) -> "LatentSpec":
        """Return the equivalent HMM (identical transition rows for an FMM)."""
        if self.kind == "HMM":
            return self
        if self.kind == "FMM":
            return LatentSpec.hmm(self.states, np.tile(self.probs, (self.K, 1)))
        raise DomainError("AR1 latent has no HMM form")

    def to_dict(self) -> dict:
        if self.kind == "AR1":
            return {"kind": "AR1", "phi": self.phi, "sigma2": self.sigma2, "c": self.intercept}
        out = {"kind": self.kind, "states": self.states.tolist()}
        if self.kind == "HMM":
            out["transition"] = self.transition.tolist()
            out["stationary"] = self.stationary.tolist()
        else:
            out["probs"] = self.probs.tolist()
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "LatentSpec":
        kind = d["kind"]
        if kind == "AR1":
            return cls.ar1(d["phi"], d["sigma2"])
        if kind == "HMM":
            return cls.hmm(d["states"], d["transition"])
        return cls.fmm(d["states"], d["probs"])


@dataclass(frozen=True, eq=False)
class LatentMoments:
    """Variance and autocovariances of ``exp(alpha_t)``."""

    sigma_alpha_sq: float
    gamma: np.ndarray
    rho: np.ndarray


@dataclass(frozen=True)
class FactorProfile:
    """OD, AC1 and SP values together with their low/medium/high levels."""

    od: float
    ac1: float
    sp: tuple[float, ...] = ()
    levels: dict = field(default_factory=dict)

    @property
    def sp_mean(self) -> float:
        return float(np.mean(self.sp)) if len(self.sp) else 0.0

    def to_dict(self) -> dict:
        return {
            "od": self.od,
            "ac1": self.ac1,
            "sp": list(self.sp),
            "sp_mean": self.sp_mean,
            "levels": dict(self.levels),
        }


def marginal_mean(beta, X) -> np.ndarray:
    """Marginal mean ``mu_t = exp(X_t' beta)``."""
    eta = np.atleast_2d(np.asarray(X, float)) @ np.asarray(beta, float)
    if not np.all(np.isfinite(eta)):
        raise DomainError("linear predictor is not finite")
    if np.any(eta > _MAX_EXP):
        raise DomainError(f"linear predictor {eta.max():.6g} overflows exp()")
    return np.exp(eta)


def marginal_variance(mu_t, sigma_alpha_sq):
    """``Var(Y_t) = mu_t + mu_t^2 sigma_alpha^2``."""
    mu_t = np.asarray(mu_t, float)
    if np.any(mu_t <= 0):
        raise DomainError("mu_t must be positive")
    if sigma_alpha_sq < 0:
        raise DomainError("sigma_alpha_sq must be non-negative")
    out = mu_t + mu_t**2 * sigma_alpha_sq
    return float(out) if out.ndim == 0 else out


def marginal_covariance(mu_s, mu_t, gamma_lag):
    """``Cov(Y_s, Y_t) = mu_s mu_t gamma_{t-s}``."""
    mu_s = np.asarray(mu_s, float)
    mu_t = np.asarray(mu_t, float)
    if np.any(mu_s <= 0) or np.any(mu_t <= 0):
        raise DomainError("means must be positive")
    out = mu_s * mu_t * gamma_lag
    return float(out) if np.ndim(out) == 0 else out


def marginal_correlation(mu_s, mu_t, gamma_lag, sigma_alpha_sq):
    """Normalised covariance between ``Y_s`` and ``Y_t``."""
    cov = marginal_covariance(mu_s, mu_t, gamma_lag)
    var_s = marginal_variance(mu_s, sigma_alpha_sq)
    var_t = marginal_variance(mu_t, sigma_alpha_sq)
    return cov / np.sqrt(var_s * var_t)


def stationary_distribution(P) -> np.ndarray:
    """Stationary distribution of an irreducible aperiodic transition matrix."""
    P = np.asarray(P, float)
    K = P.shape[0]
    if P.ndim != 2 or P.shape != (K, K):
        raise DomainError("transition matrix must be square")
    if np.any(P < 0) or not np.allclose(P.sum(axis=1), 1.0, atol=1e-10):
        raise DomainError("rows of P must be probability vectors")
    if K == 1:
        return np.ones(1)
    adj = P > 0
    # a strictly positive matrix is primitive; otherwise check the graph
    if not adj.all():
        n_comp, _ = connected_components(adj, directed=True, connection="strong")
        if n_comp > 1:
            raise NonStationaryError("transition matrix is reducible")
        # primitive iff some power (Wielandt bound) is strictly positive
        M = np.linalg.matrix_power(adj.astype(np.int64), K * K - 2 * K + 2)
        if not np.all(M > 0):
            raise NonStationaryError("transition matrix is periodic")
    A_sys = np.vstack([(P.T - np.eye(K)), np.ones(K)])
    b = np.zeros(K + 1)
    b[-1] = 1.0
    pi, *_ = np.linalg.lstsq(A_sys, b, rcond=None)
    pi = np.clip(pi, 0.0, None)
    return pi / pi.sum()


def latent_moments(spec: LatentSpec, tau_max: int) -> LatentMoments:
    """Moments of ``exp(alpha_t)`` for lags ``0..tau_max``.

    HMM: ``gamma_tau = sum_ij pi_i (P^tau)_ij exp(S_i + S_j) - 1``.
    FMM: independent draws, so ``gamma_tau = 0`` for ``tau >= 1``.
    AR1: lognormal, ``gamma_tau = exp(sigma2 phi^tau / (1 - phi^2)) - 1``.
    """
    if tau_max < 0:
        raise DomainError("tau_max must be non-negative")
    lags = np.arange(tau_max + 1)
    if spec.kind == "AR1":
        v = spec.sigma2 / (1.0 - spec.phi**2)
        gamma = np.expm1(v * spec.phi ** lags.astype(float))
    elif spec.kind == "FMM":
        e = np.exp(spec.states)
        gamma = np.zeros(tau_max + 1)
        gamma[0] = spec.probs @ e**2 - 1.0
    else:
        pi = spec.stationary
        e = np.exp(spec.states)
        outer = np.outer(e, e)
        gamma = np.empty(tau_max + 1)
        Pt = np.eye(spec.K)
        for tau in lags:
            gamma[tau] = pi @ (Pt * outer).sum(axis=1) - 1.0
            Pt = Pt @ spec.transition
    gamma = np.where(np.abs(gamma) < 1e-15, 0.0, gamma)
    s2 = float(gamma[0])
    if s2 > 0:
        rho = np.clip(gamma / s2, -1.0, 1.0)
        rho[0] = 1.0
    else:
        rho = np.zeros_like(gamma)
        rho[0] = 1.0
    return LatentMoments(sigma_alpha_sq=s2, gamma=gamma, rho=rho)


def overdispersion_factor(mu, sigma_alpha_sq) -> float:
    """Mean over t of ``1 + sigma_alpha^2 mu_t``."""
    mu = np.asarray(mu, float)
    if np.any(mu <= 0):
        raise DomainError("mu must be positive")
    return float(np.mean(1.0 + sigma_alpha_sq * mu))


def separation_probability(mu_t, S_j, S_j1):
    """One minus the overlap mass of ``Pois(mu e^S_j)`` and ``Pois(mu e^S_j1)``.

    The likelihood ratio of two Poisson laws is monotone, so their pmfs cross
    once at ``c = floor((b - a) / log(b / a))`` and the overlap sum reduces to
    ``F_b(c) + 1 - F_a(c)``.  Vectorised over ``mu_t``.
    """
    mu_t = np.asarray(mu_t, float)
    if np.any(mu_t <= 0):
        raise DomainError("mu_t must be positive")
    lo, hi = min(S_j, S_j1), max(S_j, S_j1)
    a = mu_t * np.exp(lo)
    b = mu_t * np.exp(hi)
    if hi - lo <= 0:
        out = np.zeros_like(a)
    else:
        c = np.floor((b - a) / (hi - lo))
        out = special.pdtr(c, a) - special.pdtr(c, b)
        out = np.clip(out, 0.0, 1.0)
    return float(out) if out.ndim == 0 else out


def lag1_autocorrelation(mu, moments: LatentMoments) -> float:
    """Mean over t of ``Corr(Y_t, Y_{t+1})``."""
    mu = np.atleast_1d(np.asarray(mu, float))
    if moments.gamma.size < 2:
        return 0.0
    if mu.size == 1:
        mu = np.repeat(mu, 2)
    corr = marginal_correlation(mu[:-1], mu[1:], moments.gamma[1], moments.sigma_alpha_sq)
    return float(np.mean(corr))


def classify_level(factor: str, value: float) -> str:
    """Nearest factor-level anchor (values beyond the ends map to the ends)."""
    anchors = ANCHORS[factor]
    return LEVELS[int(np.argmin([abs(value - a) for a in anchors]))]


def _levels(od: float, ac1: float, sp: Sequence[float]) -> dict:
    sp_mean = float(np.mean(sp)) if len(sp) else 0.0
    return {
        "od": classify_level("od", od),
        "ac1": classify_level("ac1", ac1),
        "sp": classify_level("sp", sp_mean),
    }


def make_profile(od: float, ac1: float, sp: Sequence[float]) -> FactorProfile:
    sp = tuple(float(s) for s in sp)
    return FactorProfile(od=float(od), ac1=float(ac1), sp=sp, levels=_levels(od, ac1, sp))


def factor_profile(spec: LatentSpec, mu) -> FactorProfile:
    """Analytic OD / AC1 / SP of ``spec`` at marginal means ``mu``."""
    mu = np.atleast_1d(np.asarray(mu, float))
    m = latent_moments(spec, 1)
    od = overdispersion_factor(mu, m.sigma_alpha_sq)
    ac1 = lag1_autocorrelation(mu, m)
    if spec.kind == "AR1":
        sp: tuple[float, ...] = ()
    else:
        S = spec.states
        sp = tuple(
            float(np.mean(separation_probability(mu, S[j], S[j + 1]))) for j in range(S.size - 1)
        )
    return make_profile(od, ac1, sp)
