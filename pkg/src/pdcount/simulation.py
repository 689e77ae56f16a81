"""Data generation from latent-process specs and calibration to factor levels."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import optimize, signal
from scipy.special import expit

from pdcount import _forward
from pdcount.core import (
    ANCHORS,
    CountSeries,
    FactorProfile,
    LatentSpec,
    factor_profile,
    marginal_correlation,
    marginal_mean,
    stationary_distribution,
)
from pdcount.errors import DomainError, InfeasibleTargetError

__all__ = [
    "Covariate",
    "SimConfig",
    "CalibrationTarget",
    "FixedTransitionHMM",
    "FreeHMM2",
    "FreeFMM2",
    "AR1Family",
    "replicate_rng",
    "design_matrix",
    "simulate",
    "simulate_latent",
    "calibrate",
    "export_series",
]


@dataclass(frozen=True)
class Covariate:
    """One entry of a covariate plan.

    ``kind`` is ``binary`` (i.i.d. Bernoulli(p)), ``normal`` (i.i.d. standard
    normal), ``trend`` (``(t - center) / scale``, default ``t / n``) or
    ``seasonal`` (the pair ``cos, sin(2 pi k t / period)``).
    """

    kind: str
    p: float = 0.5
    k: int = 1
    period: float = 12.0
    scale: float | None = None
    center: float = 0.0

    def __post_init__(self):
        if self.kind not in ("binary", "normal", "trend", "seasonal"):
            raise DomainError(f"unknown covariate kind {self.kind!r}")

    @property
    def width(self) -> int:
        return 2 if self.kind == "seasonal" else 1

    def names(self) -> list[str]:
        if self.kind == "seasonal":
            return [f"cos{self.k}_{self.period:g}", f"sin{self.k}_{self.period:g}"]
        return [self.kind]

    def columns(self, n: int, rng: np.random.Generator) -> np.ndarray:
        t = np.arange(1, n + 1, dtype=float)
        if self.kind == "binary":
            return rng.binomial(1, self.p, size=n).astype(float)[:, None]
        if self.kind == "normal":
            return rng.standard_normal(n)[:, None]
        if self.kind == "trend":
            scale = float(n) if self.scale is None else self.scale
            return ((t - self.center) / scale)[:, None]
        w = 2.0 * np.pi * self.k * t / self.period
        return np.column_stack([np.cos(w), np.sin(w)])

    def to_dict(self) -> dict:
        return {k: v for k, v in self.__dict__.items()}


def _covariate(obj) -> Covariate:
    if isinstance(obj, Covariate):
        return obj
    if isinstance(obj, str):
        return Covariate(obj)
    return Covariate(**obj)


@dataclass(frozen=True, eq=False)
class SimConfig:
    n: int
    beta: tuple[float, ...]
    covariates: tuple[Covariate, ...]
    latent: LatentSpec
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "beta", tuple(float(b) for b in self.beta))
        object.__setattr__(self, "covariates", tuple(_covariate(c) for c in self.covariates))
        if self.n < 2:
            raise DomainError("n must be at least 2")
        width = 1 + sum(c.width for c in self.covariates)
        if width != len(self.beta):
            raise DomainError(f"beta has {len(self.beta)} entries but the design has {width} columns")

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "beta": list(self.beta),
            "covariates": [c.to_dict() for c in self.covariates],
            "latent": self.latent.to_dict(),
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SimConfig":
        return cls(
            n=int(d["n"]),
            beta=tuple(d["beta"]),
            covariates=tuple(_covariate(c) for c in d["covariates"]),
            latent=LatentSpec.from_dict(d["latent"]),
            seed=int(d.get("seed", 0)),
        )

    def design(self) -> tuple[np.ndarray, tuple[str, ...]]:
        return design_matrix(self.covariates, self.n, self.seed)

    def mu(self) -> np.ndarray:
        X, _ = self.design()
        return marginal_mean(self.beta, X)

    def profile(self) -> FactorProfile:
        return factor_profile(self.latent, self.mu())


def replicate_rng(seed: int, replicate: int) -> np.random.Generator:
    """Independent child stream ``replicate`` of ``seed``."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(1, replicate))))


def design_matrix(covariates, n: int, seed: int = 0):
    """Intercept plus covariate columns; random covariates use a dedicated stream of ``seed``."""
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(0,))))
    cols = [np.ones((n, 1))]
    labels = ["intercept"]
    for c in map(_covariate, covariates):
        cols.append(c.columns(n, rng))
        labels += c.names()
    return np.hstack(cols), tuple(labels)


def simulate_latent(spec: LatentSpec, n: int, rng: np.random.Generator) -> np.ndarray:
    """Draw ``alpha_1..alpha_n`` from ``spec``."""
    if spec.kind == "HMM":
        path = _forward.sample_chain(rng.random(n), spec.stationary, spec.transition)
        return spec.states[path]
    if spec.kind == "FMM":
        return spec.states[rng.choice(spec.K, size=n, p=spec.probs)]
    v = spec.sigma2 / (1.0 - spec.phi**2)
    x = np.empty(n)
    x[0] = rng.normal(-0.5 * v, np.sqrt(v))
    x[1:] = spec.intercept + rng.normal(0.0, np.sqrt(spec.sigma2), size=n - 1)
    return signal.lfilter([1.0], [1.0, -spec.phi], x)


def simulate(config: SimConfig, replicate: int = 0, rng: np.random.Generator | None = None):
    """Return ``(CountSeries, alpha)`` for replicate ``replicate`` of ``config``."""
    X, labels = config.design()
    mu = marginal_mean(config.beta, X)
    rng = replicate_rng(config.seed, replicate) if rng is None else rng
    alpha = simulate_latent(config.latent, config.n, rng)
    y = rng.poisson(mu * np.exp(alpha))
    return CountSeries(y, X, labels), alpha


def export_series(data: CountSeries, config: SimConfig, path, alpha=None) -> tuple[Path, Path]:
    """Write ``path`` (CSV in the ingest schema) and a JSON sidecar next to it."""
    path = Path(path)
    cols = ["y"] + list(data.labels[1:])
    with open(path, "w") as fh:
        fh.write(",".join(cols) + "\n")
        for t in range(data.n):
            row = [str(int(data.y[t]))] + [repr(float(v)) for v in data.X[t, 1:]]
            fh.write(",".join(row) + "\n")
    side = path.with_suffix(".json")
    meta = {
        "config": config.to_dict(),
        "profile": config.profile().to_dict(),
        "trend_coding": "t/n unless scale/center given",
    }
    if alpha is not None:
        meta["latent_path_mean_exp"] = float(np.mean(np.exp(alpha)))
    side.write_text(json.dumps(meta, indent=2))
    return path, side


# -- calibration ------------------------------------------------------------------


@dataclass(frozen=True)
class CalibrationTarget:
    """Requested factor levels; ``None`` leaves a factor free."""

    od: str | None = None
    ac1: str | None = None
    sp: str | None = None
    tolerance: float = 0.05

    def __post_init__(self):
        for name in ("od", "ac1", "sp"):
            lvl = getattr(self, name)
            if lvl is not None and lvl not in ("low", "medium", "high"):
                raise DomainError(f"{name} level must be low/medium/high, got {lvl!r}")

    def values(self) -> dict:
        idx = {"low": 0, "medium": 1, "high": 2}
        return {
            f: ANCHORS[f][idx[getattr(self, f)]]
            for f in ("od", "ac1", "sp")
            if getattr(self, f) is not None
        }


def _profile_value(profile: FactorProfile, name: str) -> float:
    return profile.sp_mean if name == "sp" else getattr(profile, name)


def _rel_errors(profile, targets):
    return {f: _profile_value(profile, f) / v - 1.0 for f, v in targets.items()}


def _equally_spaced(K, spacing, pi):
    k = np.arange(K) - (K - 1) / 2.0
    c = -np.log(pi @ np.exp(spacing * k))
    return c + spacing * k


@dataclass(frozen=True)
class FixedTransitionHMM:
    """K-state HMM with ``p_ii = p_stay`` and ``p_ij = (1 - p_stay)/(K - 1)``.

    States are equally spaced on the log scale and shifted to satisfy the
    mean-one constraint, so the family has one free parameter: the spacing
    (for K = 2, equivalently ``S_1``).  It is solved by bracketing on a single
    factor (SP unless only one other factor is requested).
    """

    K: int = 2
    p_stay: float = 0.9

    @property
    def transition(self) -> np.ndarray:
        off = (1.0 - self.p_stay) / (self.K - 1)
        P = np.full((self.K, self.K), off)
        np.fill_diagonal(P, self.p_stay)
        return P

    def spec(self, spacing: float) -> LatentSpec:
        P = self.transition
        return LatentSpec.hmm(_equally_spaced(self.K, spacing, stationary_distribution(P)), P)


@dataclass(frozen=True)
class FreeHMM2:
    """2-state HMM with free ``S_1``, stationary ``pi_1`` and chain persistence."""

    def spec(self, z) -> LatentSpec:
        s1 = -np.logaddexp(0.0, -z[0])
        pi1 = expit(z[1])
        lam = expit(z[2])
        pi2 = 1.0 - pi1
        # pi_2 underflows to 0 far out in z; the resulting spec is rejected
        with np.errstate(divide="ignore", invalid="ignore"):
            s2 = np.log1p(-pi1 * np.exp(s1)) - np.log(pi2)
        q1, q2 = pi2 * (1 - lam), pi1 * (1 - lam)
        return LatentSpec.hmm([s1, s2], [[1 - q1, q1], [q2, 1 - q2]])

    starts = [np.array([a, b, c]) for a in (-2.0, 0.0, 2.0) for b in (-2.0, 0.0, 2.0) for c in (0.0, 2.0)]


@dataclass(frozen=True)
class FreeFMM2:
    """2-component mixture with free ``S_1`` and ``p_1`` (AC1 is always 0)."""

    def spec(self, z) -> LatentSpec:
        s1 = -np.logaddexp(0.0, -z[0])
        p1 = expit(z[1])
        with np.errstate(divide="ignore", invalid="ignore"):
            s2 = np.log1p(-p1 * np.exp(s1)) - np.log1p(-p1)
        return LatentSpec.fmm([s1, s2], [p1, 1 - p1])

    starts = [np.array([a, b]) for a in (-2.0, 0.0, 2.0) for b in (-2.0, 0.0, 2.0)]


@dataclass(frozen=True)
class AR1Family:
    """Gaussian AR(1) latent; solved in closed form from OD and AC1 (SP is 0)."""


def _infeasible(msg, spec, mu):
    prof = factor_profile(spec, mu) if spec is not None else None
    return InfeasibleTargetError(msg, closest=spec, profile=prof)


def _check(spec, mu, targets, tol, family_name):
    prof = factor_profile(spec, mu)
    errs = _rel_errors(prof, targets)
    if max(abs(e) for e in errs.values()) > tol:
        detail = ", ".join(f"{f}={_profile_value(prof, f):.4g} (target {targets[f]})" for f in targets)
        raise InfeasibleTargetError(
            f"{family_name}: target not reachable within {tol:.0%}; closest {detail}",
            closest=spec,
            profile=prof,
        )
    return spec


def _calibrate_fixed(target, family: FixedTransitionHMM, mu, targets):
    order = [f for f in ("sp", "od", "ac1") if f in targets]
    driver = order[0]
    goal = targets[driver]

    def resid(log_spacing):
        prof = factor_profile(family.spec(np.exp(log_spacing)), mu)
        return _profile_value(prof, driver) - goal

    # mean SP is not monotone in the spacing for K > 2 (low states collapse
    # towards zero counts), so take the first crossing on a log grid
    grid = np.linspace(np.log(1e-4), np.log(20.0), 121)
    r = np.array([resid(g) for g in grid])
    if r[0] > 0 or not np.any(r >= 0):
        closest = family.spec(np.exp(grid[0] if r[0] > 0 else grid[int(np.argmax(r))]))
        raise _infeasible(f"fixed-transition HMM cannot reach {driver}={goal}", closest, mu)
    i = int(np.argmax(r >= 0))
    x = optimize.brentq(resid, grid[i - 1], grid[i], xtol=1e-12, rtol=1e-12)
    return _check(family.spec(np.exp(x)), mu, targets, target.tolerance, "fixed-transition HMM")


SEARCH_STARTS = 6


def _calibrate_search(target, family, mu, targets):
    names = list(targets)

    def resid(z):
        prof = factor_profile(family.spec(z), mu)
        return np.array([np.log(max(_profile_value(prof, f), 1e-12) / targets[f]) for f in names])

    # run the local search from the most promising starts only
    scored = []
    for z0 in family.starts:
        try:
            scored.append((float(np.sum(resid(z0) ** 2)), tuple(z0)))
        except (DomainError, ValueError, FloatingPointError):
            continue
    starts = [np.array(z) for _, z in sorted(scored)[:SEARCH_STARTS]]
    best = None
    for z0 in starts:
        try:
            res = optimize.least_squares(resid, z0, method="lm", xtol=1e-12, ftol=1e-12)
        except (DomainError, ValueError, FloatingPointError):
            continue
        if best is None or res.cost < best.cost:
            best = res
        if res.cost < 1e-14:
            break
    if best is None:
        raise InfeasibleTargetError(f"{type(family).__name__}: search failed")
    return _check(family.spec(best.x), mu, targets, target.tolerance, type(family).__name__)


def _calibrate_ar1(target, mu, targets):
    if "sp" in targets:
        raise InfeasibleTargetError("AR(1) latent has SP = 0; leave the sp level unset")
    mu = np.asarray(mu, float)
    od = targets.get("od")
    if od is None:
        raise InfeasibleTargetError("AR(1) calibration needs an OD level")
    s2a = (od - 1.0) / np.mean(mu)
    v = np.log1p(s2a)
    ac1 = targets.get("ac1")
    if ac1 is None:
        phi = 0.0
    else:
        # AC1 is linear in gamma_1 at fixed sigma_alpha^2
        pairs = mu if mu.size > 1 else np.repeat(mu, 2)
        unit = float(np.mean(marginal_correlation(pairs[:-1], pairs[1:], 1.0, s2a)))
        gamma1 = ac1 / unit
        if not 0.0 < gamma1 < s2a:
            closest = LatentSpec.ar1(0.999 if gamma1 >= s2a else 0.0, v * (1 - 0.999**2))
            raise _infeasible(f"AR(1) cannot reach AC1={ac1} at OD={od}", closest, mu)
        phi = np.log1p(gamma1) / v
    spec = LatentSpec.ar1(phi, v * (1.0 - phi**2))
    return _check(spec, mu, targets, target.tolerance, "AR(1)")


def calibrate(target: CalibrationTarget, family, mu) -> LatentSpec:
    """Latent spec from ``family`` whose analytic factors hit ``target`` at means ``mu``.

    Raises :class:`InfeasibleTargetError` (carrying the closest spec and its
    profile) when the family cannot get within ``target.tolerance``.
    """
    mu = np.atleast_1d(np.asarray(mu, float))
    targets = target.values()
    if not targets:
        raise DomainError("calibration target sets no factor")
    if isinstance(family, FixedTransitionHMM):
        return _calibrate_fixed(target, family, mu, targets)
    if isinstance(family, AR1Family):
        return _calibrate_ar1(target, mu, targets)
    if isinstance(family, FreeFMM2) and "ac1" in targets:
        raise InfeasibleTargetError("a finite mixture has AC1 = 0")
    return _calibrate_search(target, family, mu, targets)
