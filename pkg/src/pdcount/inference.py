"""Misspecification-robust standard errors.

The sandwich ``H^-1 I H^-1 / n`` is built from per-step conditional scores
``d log g(Y_t | Y_<t) / d theta``.  For the HMM and FMM these come from a
forward pass that carries derivatives of the scaled forward probabilities
(:func:`pdcount._forward.forward_scores`); ``I`` adds cross products of scores
up to lag ``ell``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from pdcount.core import CountSeries, marginal_mean
from pdcount.errors import CovarianceError, DomainError
from pdcount.estimators import FittedModel, loglik_and_scores

__all__ = [
    "ConditionalScores",
    "SandwichCovariance",
    "icbrt",
    "glm_scores",
    "hmm_scores_lystig_hughes",
    "conditional_scores",
    "sandwich",
    "white_covariance",
    "ddw_moment_se",
]

SCORE_TOL = 1e-5


@dataclass(frozen=True, eq=False)
class ConditionalScores:
    """Per-step scores and the mean second-derivative matrix at ``theta``."""

    scores: np.ndarray
    H_hat: np.ndarray
    theta: np.ndarray
    step_hessians: np.ndarray | None = field(default=None, repr=False)

    @property
    def total(self) -> np.ndarray:
        return self.scores.sum(axis=0)


@dataclass(frozen=True, eq=False)
class SandwichCovariance:
    H_hat: np.ndarray
    I_hat: np.ndarray
    cov: np.ndarray
    se: np.ndarray
    ell: int
    method: str = "white"
    flags: tuple[str, ...] = ()
    extras: dict = field(default_factory=dict)

    def to_dict(self, labels=None) -> dict:
        out = {
            "method": self.method,
            "ell": self.ell,
            "se": self.se.tolist(),
            "cov": self.cov.tolist(),
            "flags": list(self.flags),
        }
        if labels is not None:
            out["se"] = dict(zip(labels, self.se.tolist()))
        out.update({k: np.asarray(v).tolist() for k, v in self.extras.items()})
        return out


def icbrt(n: int) -> int:
    """Largest integer ``k`` with ``k**3 <= n``."""
    k = int(round(n ** (1.0 / 3.0)))
    while k**3 > n:
        k -= 1
    while (k + 1) ** 3 <= n:
        k += 1
    return k


def glm_scores(fit: FittedModel, data: CountSeries) -> ConditionalScores:
    """Rows ``(y_t - mu_t) X_t``; step Hessians ``-mu_t X_t X_t'``."""
    if fit.model != "GLM":
        raise DomainError("glm_scores needs a GLM fit")
    mu = marginal_mean(fit.beta, data.X)
    X = data.X
    scores = (data.y - mu)[:, None] * X
    steps = -mu[:, None, None] * X[:, :, None] * X[:, None, :]
    return ConditionalScores(
        scores=scores, H_hat=steps.mean(axis=0), theta=fit.theta.copy(), step_hessians=steps
    )


def _fd_hessian(theta, model, data):
    p = theta.size
    H = np.empty((p, p))
    for i in range(p):
        h = 1e-5 * (1.0 + abs(theta[i]))
        e = np.zeros(p)
        e[i] = h
        _, sp = loglik_and_scores(theta + e, model, data)
        _, sm = loglik_and_scores(theta - e, model, data)
        H[:, i] = (sp.sum(axis=0) - sm.sum(axis=0)) / (2 * h)
    return 0.5 * (H + H.T)


def hmm_scores_lystig_hughes(fit: FittedModel, data: CountSeries) -> ConditionalScores:
    """Conditional scores of an FMM2/HMM2 fit in working coordinates.

    ``H_hat`` is the mean Hessian from central differences of the analytic
    total gradient (step ``1e-5 (1 + |theta_i|)``).
    """
    if fit.model not in ("FMM2", "HMM2"):
        raise DomainError("hmm_scores_lystig_hughes needs an FMM2 or HMM2 fit")
    _, scores = loglik_and_scores(fit.theta, fit.model, data)
    H = _fd_hessian(fit.theta, fit.model, data) / data.n
    return ConditionalScores(scores=scores, H_hat=H, theta=fit.theta.copy())


def conditional_scores(fit: FittedModel, data: CountSeries) -> ConditionalScores:
    if fit.model == "GLM":
        return glm_scores(fit, data)
    return hmm_scores_lystig_hughes(fit, data)


def _safe_inverse(H):
    H = 0.5 * (H + H.T)
    eig = np.linalg.eigvalsh(H)
    scale = max(np.max(np.abs(eig)), 1e-300)
    small = eig[np.argmin(np.abs(eig))]
    if abs(small) <= 1e-12 * scale:
        raise CovarianceError(f"H_hat is singular: eigenvalue {small:.3e} (largest |eig| {scale:.3e})")
    return np.linalg.inv(H)


def _lagged_outer(A, B, ell):
    """``A'B + sum_{tau<=ell} (A_t' B_{t-tau} + A_{t-tau}' B_t)``."""
    out = A.T @ B
    for tau in range(1, ell + 1):
        out += A[tau:].T @ B[:-tau] + A[:-tau].T @ B[tau:]
    return out


def sandwich(scores, H_hat, ell: int = 1) -> SandwichCovariance:
    """White covariance ``H^-1 I H^-1 / n`` with lag-``ell`` score cross terms."""
    s = np.asarray(scores.scores if isinstance(scores, ConditionalScores) else scores, float)
    n = s.shape[0]
    if ell < 0 or ell**3 >= n:
        raise DomainError(f"ell={ell} must satisfy 0 <= ell < n^(1/3) (n={n})")
    I_hat = _lagged_outer(s, s, ell) / n
    Hinv = _safe_inverse(np.asarray(H_hat, float))
    cov = Hinv @ I_hat @ Hinv / n
    cov = 0.5 * (cov + cov.T)
    diag = np.diag(cov)
    if np.any(diag < 0):
        k = int(np.argmin(diag))
        raise CovarianceError(f"negative variance {diag[k]:.3e} for parameter {k}")
    return SandwichCovariance(
        H_hat=np.asarray(H_hat, float), I_hat=I_hat, cov=cov, se=np.sqrt(diag), ell=int(ell)
    )


def white_covariance(fit: FittedModel, data: CountSeries, ell: int = 1) -> SandwichCovariance:
    """Sandwich covariance of any fitted model, after checking the score equations."""
    cs = conditional_scores(fit, data)
    worst = float(np.max(np.abs(cs.total)))
    # summed scores grow with n at a fixed per-step accuracy
    if worst > SCORE_TOL * max(1.0, data.n / 1000):
        raise CovarianceError(
            f"scores do not sum to zero at the estimate (sup-norm {worst:.3e}); "
            "the fit is not at a stationary point"
        )
    return sandwich(cs, cs.H_hat, ell)


def ddw_moment_se(
    fit: FittedModel,
    data: CountSeries,
    max_lag: int | None = None,
    moments: tuple[float, np.ndarray] | None = None,
) -> SandwichCovariance:
    """GLM covariance ``W^-1 + W^-1 V W^-1`` from moment estimates of the latent process.

    ``sigma2_hat = sum[(y - mu)^2 - mu] / sum mu^2`` and
    ``gamma_hat[tau] = sum e_t e_{t+tau} / sum mu_t mu_{t+tau}`` on GLM
    residuals ``e``.  ``V`` sums ``mu_s mu_t gamma_hat[|s-t|] X_s X_t'`` over
    ``|s - t| <= max_lag`` (default ``floor(n^(1/3))``).  ``moments`` replaces
    the estimates by ``(sigma2, gamma[1..max_lag])``.
    """
    if fit.model != "GLM":
        raise DomainError("ddw_moment_se needs a GLM fit")
    n = data.n
    L = icbrt(n) if max_lag is None else int(max_lag)
    if L < 0 or L >= n:
        raise DomainError(f"max_lag={L} out of range")
    mu = marginal_mean(fit.beta, data.X)
    e = data.y - mu
    flags = []
    if moments is None:
        s2 = float(np.sum(e**2 - mu) / np.sum(mu**2))
        gam = np.array([np.sum(e[tau:] * e[:-tau]) / np.sum(mu[tau:] * mu[:-tau]) for tau in range(1, L + 1)])
    else:
        s2, gam = float(moments[0]), np.asarray(moments[1], float)[:L]
        if gam.size < L:
            gam = np.concatenate([gam, np.zeros(L - gam.size)])
    if s2 < 0:
        flags.append("negative sigma2_hat truncated to 0")
        s2 = 0.0
    Z = mu[:, None] * data.X
    W = data.X.T @ Z
    V = s2 * (Z.T @ Z)
    for tau in range(1, L + 1):
        V += gam[tau - 1] * (Z[tau:].T @ Z[:-tau] + Z[:-tau].T @ Z[tau:])
    Winv = _safe_inverse(W)
    cov = Winv + Winv @ V @ Winv
    cov = 0.5 * (cov + cov.T)
    diag = np.diag(cov)
    if np.any(diag < 0):
        k = int(np.argmin(diag))
        raise CovarianceError(f"negative DDW variance {diag[k]:.3e} for parameter {k}")
    return SandwichCovariance(
        H_hat=-W / n,
        I_hat=(W + V) / n,
        cov=cov,
        se=np.sqrt(diag),
        ell=L,
        method="ddw",
        flags=tuple(flags),
        extras={"sigma2_hat": s2, "gamma_hat": gam},
    )
