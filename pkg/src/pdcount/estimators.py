"""Maximum likelihood for the Poisson GLM, 2-state FMM and 2-state HMM.

Working parameters (``theta``) are unconstrained except for the first state:

* GLM:  ``beta``                                   (length d)
* FMM2: ``beta, logit p_1, S_1``                   (length d + 2)
* HMM2: ``beta, logit p_11, logit p_22, S_1``      (length d + 3)

``S_2`` is always derived from the mean-one constraint
``pi_1 exp(S_1) + pi_2 exp(S_2) = 1``, which needs ``pi_1 exp(S_1) < 1``.
The optimiser itself runs in coordinates where that boundary disappears:
``S_1`` is replaced by ``u = logit(pi_1 exp(S_1))``.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize
from scipy.special import expit, gammaln

from pdcount import _forward
from pdcount.core import CountSeries, LatentSpec, marginal_mean
from pdcount.errors import ConvergenceError, DataError, DomainError

__all__ = [
    "MODELS",
    "FittedModel",
    "n_params",
    "natural_params",
    "constrain",
    "unconstrain",
    "forward_loglik",
    "glm_loglik",
    "fmm_loglik",
    "hmm_loglik",
    "loglik_and_scores",
    "glm_fit",
    "fmm_fit",
    "hmm_fit",
    "fit",
]

MODELS = ("GLM", "FMM2", "HMM2")

GTOL = 1e-8
MAX_ITER = 500
HMM_GRID = [(-0.75, 0.9), (-0.25, 0.7), (-1.5, 0.9), (-0.75, 0.7), (-0.25, 0.9), (-1.5, 0.7)]
FMM_GRID = [(s, p) for s in (-0.75, -0.25, -1.5) for p in (0.5, 0.3, 0.7)]


@dataclass(frozen=True, eq=False)
class FittedModel:
    """Estimator output.

    ``theta`` holds the working parameters in canonical labelling
    (``S_1 <= S_2``); ``latent`` is ``None`` for the GLM.  ``gradient_norm``
    is the sup-norm of the log-likelihood gradient divided by ``n``.
    """

    model: str
    beta: np.ndarray
    latent: LatentSpec | None
    loglik: float
    n_iter: int
    converged: bool
    gradient_norm: float
    theta: np.ndarray
    labels: tuple[str, ...] = ()
    degenerate: bool = False
    flags: tuple[str, ...] = ()
    trace: tuple[float, ...] = field(default=(), repr=False)

    @property
    def n_params(self) -> int:
        return self.theta.size

    def to_dict(self) -> dict:
        return {
            "model": self.model,
            "beta": dict(zip(self.labels, self.beta.tolist())),
            "latent": None if self.latent is None else self.latent.to_dict(),
            "loglik": self.loglik,
            "n_iter": self.n_iter,
            "converged": self.converged,
            "gradient_norm": self.gradient_norm,
            "theta": self.theta.tolist(),
            "degenerate": self.degenerate,
            "flags": list(self.flags),
        }


def n_params(model: str, d: int) -> int:
    return d + {"GLM": 0, "FMM2": 2, "HMM2": 3}[model]


def _check_model(model):
    if model not in MODELS:
        raise DomainError(f"unknown model {model!r}; expected one of {MODELS}")


def _mixing(theta, model, d):
    """Return ``(pi, P, dpi1)`` where ``dpi1[k]`` is ``d pi_1 / d theta_k``."""
    p = theta.size
    dpi1 = np.zeros(p)
    dP = np.zeros((p, 2, 2))
    if model == "FMM2":
        a = theta[d]
        p1, p2 = expit(a), expit(-a)
        pi = np.array([p1, p2])
        P = np.array([[p1, p2], [p1, p2]])
        dpi1[d] = p1 * p2
        dP[d] = [[p1 * p2, -p1 * p2], [p1 * p2, -p1 * p2]]
    else:
        a1, a2 = theta[d], theta[d + 1]
        p11, q1 = expit(a1), expit(-a1)
        p22, q2 = expit(a2), expit(-a2)
        den = q1 + q2
        pi = np.array([q2 / den, q1 / den])
        P = np.array([[p11, q1], [q2, p22]])
        dpi1[d] = p11 * q1 * q2 / den**2
        dpi1[d + 1] = -p22 * q2 * q1 / den**2
        dP[d] = [[p11 * q1, -p11 * q1], [0.0, 0.0]]
        dP[d + 1] = [[0.0, 0.0], [-p22 * q2, p22 * q2]]
    return pi, P, dpi1, dP


def natural_params(theta, model: str, d: int):
    """Map working parameters to the forward-recursion inputs.

    Returns ``beta, S, pi, P, dS, dpi, dP`` where the ``d*`` arrays are
    derivatives with respect to ``theta`` (leading axis).
    """
    _check_model(model)
    theta = np.asarray(theta, float)
    p = theta.size
    if p != n_params(model, d):
        raise DomainError(f"{model} with d={d} needs {n_params(model, d)} parameters, got {p}")
    beta = theta[:d]
    if model == "GLM":
        return (beta, np.zeros(1), np.ones(1), np.ones((1, 1)),
                np.zeros((p, 1)), np.zeros((p, 1)), np.zeros((p, 1, 1)))
    pi, P, dpi1, dP = _mixing(theta, model, d)
    s = theta[-1]
    share = pi[0] * np.exp(s)
    if not share < 1.0:
        raise DomainError(f"infeasible S_1={s!r}: pi_1 exp(S_1) = {share!r} >= 1")
    S = np.array([s, np.log1p(-share) - np.log(pi[1])])
    dS = np.zeros((p, 2))
    dS[-1, 0] = 1.0
    dS[-1, 1] = -share / (1.0 - share)
    dS2_dpi1 = -np.exp(s) / (1.0 - share) + 1.0 / pi[1]
    dS[:, 1] += dS2_dpi1 * dpi1
    dpi = np.column_stack([dpi1, -dpi1])
    return beta, S, pi, P, dS, dpi, dP


def constrain(theta, model: str, d: int):
    """Working parameters -> ``(beta, LatentSpec or None)`` in canonical order."""
    beta, S, pi, P, *_ = natural_params(theta, model, d)
    if model == "GLM":
        return beta.copy(), None
    order = np.argsort(S, kind="stable")
    S = S[order]
    if model == "FMM2":
        return beta.copy(), LatentSpec.fmm(S, pi[order])
    return beta.copy(), LatentSpec.hmm(S, P[np.ix_(order, order)])


def unconstrain(beta, spec: LatentSpec | None, model: str):
    """Inverse of :func:`constrain`."""
    _check_model(model)
    beta = np.asarray(beta, float)
    if model == "GLM":
        return beta.copy()
    if spec is None or spec.K != 2:
        raise DomainError(f"{model} needs a 2-state latent spec")
    S1 = spec.states[0]
    if model == "FMM2":
        p1 = spec.stationary[0]
        return np.concatenate([beta, [np.log(p1) - np.log1p(-p1), S1]])
    P = spec.as_hmm().transition
    a1 = np.log(P[0, 0]) - np.log(P[0, 1])
    a2 = np.log(P[1, 1]) - np.log(P[1, 0])
    return np.concatenate([beta, [a1, a2, S1]])


def _canonical(theta, model, d):
    if model == "GLM":
        return theta
    _, S, *_ = natural_params(theta, model, d)
    if S[0] <= S[1]:
        return theta
    out = theta.copy()
    if model == "FMM2":
        out[d] = -theta[d]
    else:
        out[d], out[d + 1] = theta[d + 1], theta[d]
    out[-1] = S[1]
    return out


def forward_loglik(y, X, beta, states, pi, P) -> float:
    """HMM log-likelihood for any number of states (natural parameters)."""
    y = np.asarray(y, float)
    eta = np.asarray(X, float) @ np.asarray(beta, float)
    eta = eta[:, None] + np.asarray(states, float)[None, :]
    ll, _ = _forward.forward_loglik(y, eta, np.asarray(pi, float), np.asarray(P, float))
    return ll


def _eta(data: CountSeries, beta, S):
    eta = data.X @ beta
    return eta[:, None] + S[None, :]


def _loglik(theta, model, data: CountSeries) -> float:
    beta, S, pi, P, *_ = natural_params(theta, model, data.d)
    ll, _ = _forward.forward_loglik(data.y.astype(float), _eta(data, beta, S), pi, P)
    return ll


def glm_loglik(beta, data: CountSeries) -> float:
    mu = marginal_mean(beta, data.X)
    y = data.y
    return float(np.sum(y * np.log(mu) - mu - gammaln(y + 1.0)))


def fmm_loglik(theta, data: CountSeries) -> float:
    """Two-component Poisson mixture log-likelihood."""
    beta, S, pi, _, *_ = natural_params(theta, "FMM2", data.d)
    eta = _eta(data, beta, S)
    y = data.y.astype(float)[:, None]
    logf = y * eta - np.exp(eta) - gammaln(y + 1.0) + np.log(pi)[None, :]
    m = logf.max(axis=1, keepdims=True)
    return float(np.sum(m[:, 0] + np.log(np.exp(logf - m).sum(axis=1))))


def hmm_loglik(theta, data: CountSeries) -> float:
    """Stationary 2-state Poisson HMM log-likelihood (scaled forward recursion)."""
    return _loglik(np.asarray(theta, float), "HMM2", data)


def loglik_and_scores(theta, model: str, data: CountSeries):
    """Log-likelihood and the ``(n, p)`` per-step conditional scores."""
    beta, S, pi, P, dS, dpi, dP = natural_params(theta, model, data.d)
    return _forward.forward_scores(
        data.y.astype(float), data.X, _eta(data, beta, S), pi, P, dS, dpi, dP
    )


def _gradient(theta, model, data):
    ll, sc = loglik_and_scores(theta, model, data)
    return ll, sc.sum(axis=0)


# -- optimiser coordinates ----------------------------------------------------


def _to_internal(theta, model, d):
    pi, *_ = _mixing(theta, model, d)
    share = pi[0] * np.exp(theta[-1])
    if not share < 1.0:
        raise DomainError("infeasible starting value")
    out = theta.copy()
    out[-1] = np.log(share) - np.log1p(-share)
    return out


def _from_internal(phi, model, d):
    """Return ``theta`` and the Jacobian ``d theta / d phi``."""
    pi, _, dpi1, _ = _mixing(phi, model, d)
    u = phi[-1]
    theta = phi.copy()
    # log(expit(u)) computed stably
    theta[-1] = -np.logaddexp(0.0, -u) - np.log(pi[0])
    J = np.eye(phi.size)
    J[-1, :] = -dpi1 / pi[0]
    J[-1, -1] = expit(-u)
    return theta, J


class _Objective:
    """Negative mean log-likelihood in optimiser coordinates, with caching."""

    def __init__(self, model, data):
        self.model = model
        self.data = data
        self.n = data.n
        self.d = data.d

    def __call__(self, phi):
        theta, J = _from_internal(phi, self.model, self.d)
        try:
            ll, g = _gradient(theta, self.model, self.data)
        except DomainError:
            return np.inf, np.zeros_like(phi)
        if not np.isfinite(ll) or not np.all(np.isfinite(g)):
            return np.inf, np.zeros_like(phi)
        return -ll / self.n, -(J.T @ g) / self.n

    def loglik_grad_theta(self, phi):
        theta, J = _from_internal(phi, self.model, self.d)
        ll, g = _gradient(theta, self.model, self.data)
        return ll, g, J


def _fd_hessian_phi(obj: _Objective, phi):
    """Central differences of the analytic gradient (total log-likelihood)."""
    p = phi.size
    H = np.empty((p, p))
    for i in range(p):
        h = 1e-5 * (1.0 + abs(phi[i]))
        e = np.zeros(p)
        e[i] = h
        _, gp, Jp = obj.loglik_grad_theta(phi + e)
        _, gm, Jm = obj.loglik_grad_theta(phi - e)
        H[:, i] = (Jp.T @ gp - Jm.T @ gm) / (2 * h)
    return 0.5 * (H + H.T)


def _newton_polish(obj: _Objective, phi, gtol, max_steps=25):
    ll, g, J = obj.loglik_grad_theta(phi)
    steps = 0
    for _ in range(max_steps):
        if np.max(np.abs(g)) < gtol * obj.n:
            break
        try:
            H = _fd_hessian_phi(obj, phi)
            if np.any(np.linalg.eigvalsh(H) >= 0):
                break
            step = -np.linalg.solve(H, J.T @ g)
        except (np.linalg.LinAlgError, DomainError):
            break
        t = 1.0
        for _ in range(30):
            cand = phi + t * step
            try:
                ll_c, g_c, J_c = obj.loglik_grad_theta(cand)
            except DomainError:
                ll_c = -np.inf
            if np.isfinite(ll_c) and ll_c >= ll - 1e-10 * (1 + abs(ll)):
                break
            t *= 0.5
        else:
            break
        if ll_c < ll - 1e-10 * (1 + abs(ll)):
            break
        stalled = np.max(np.abs(g_c)) >= np.max(np.abs(g)) and ll_c <= ll
        phi, ll, g, J = cand, ll_c, g_c, J_c
        steps += 1
        if stalled:
            break
    return phi, ll, g, steps


def _multistart(model, data, starts_theta, gtol, max_iter):
    obj = _Objective(model, data)
    best = None
    for theta0 in starts_theta:
        try:
            phi0 = _to_internal(np.asarray(theta0, float), model, data.d)
        except DomainError:
            continue
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            res = optimize.minimize(
                obj, phi0, jac=True, method="BFGS",
                options={"gtol": gtol, "maxiter": max_iter},
            )
        if not np.isfinite(res.fun):
            continue
        if best is None or res.fun < best.fun:
            best = res
    if best is None:
        raise ConvergenceError(f"all {len(starts_theta)} starts of the {model} fit failed")
    phi, ll, g, steps = _newton_polish(obj, best.x, gtol)
    theta, _ = _from_internal(phi, model, data.d)
    return theta, ll, int(best.nit) + steps


def _flags(theta, model, d):
    beta, S, pi, P, *_ = natural_params(theta, model, d)
    flags = []
    if abs(S[1] - S[0]) < 1e-3:
        flags.append("collapsed states")
    if pi.min() < 1e-6:
        flags.append("boundary mixing probability")
    if model == "HMM2" and np.max(np.diag(P)) > 1 - 1e-6:
        flags.append("near-absorbing chain")
    return tuple(flags)


def _finish(model, data, theta, ll, n_iter, gtol, trace=()):
    theta = _canonical(np.asarray(theta, float), model, data.d)
    _, g = _gradient(theta, model, data)
    gnorm = float(np.max(np.abs(g))) / data.n
    beta, latent = constrain(theta, model, data.d)
    flags = () if model == "GLM" else _flags(theta, model, data.d)
    return FittedModel(
        model=model,
        beta=beta,
        latent=latent,
        loglik=float(ll),
        n_iter=int(n_iter),
        converged=bool(gnorm < gtol),
        gradient_norm=gnorm,
        theta=theta,
        labels=data.labels,
        degenerate=bool(flags),
        flags=flags,
        trace=tuple(trace),
    )


def _precheck(data: CountSeries):
    data.check_rank()
    if not np.any(data.y > 0):
        raise DataError("need at least one positive count")


def glm_fit(data: CountSeries, max_iter: int = 100, gtol: float = GTOL) -> FittedModel:
    """Poisson regression by Newton-Raphson (IRLS) with step halving.

    The deviance is monitored and never allowed to increase; the sequence is
    kept in ``trace``.
    """
    _precheck(data)
    X, y = data.X, data.y.astype(float)
    beta = np.zeros(data.d)
    beta[0] = np.log(y.mean())

    def deviance(b):
        eta = X @ b
        if np.any(eta > 700):
            return np.inf
        mu = np.exp(eta)
        with np.errstate(divide="ignore", invalid="ignore"):
            term = np.where(y > 0, y * np.log(y / mu), 0.0)
        return float(2.0 * np.sum(term - (y - mu)))

    dev = deviance(beta)
    trace = [dev]
    for it in range(1, max_iter + 1):
        mu = np.exp(X @ beta)
        score = X.T @ (y - mu)
        info = X.T @ (mu[:, None] * X)
        step = np.linalg.solve(info, score)
        if np.max(np.abs(score)) < gtol * data.n:
            # under separation the score vanishes while Newton steps stay O(1)
            if np.max(np.abs(step)) > 1e-3:
                raise ConvergenceError(
                    "coefficients diverging (separation-like data); |beta| = "
                    f"{np.max(np.abs(beta)):.3g} and still moving"
                )
            break
        # a decrease this small is invisible in the deviance; take the full step
        tiny = float(score @ step) < 1e-12 * (1.0 + abs(dev))
        t = 1.0
        while True:
            cand = beta + t * step
            dev_c = deviance(cand)
            if tiny:
                dev_c = min(dev_c, dev)
            if dev_c <= dev or t < 1e-10:
                break
            t *= 0.5
        if dev_c > dev:
            break
        beta, dev = cand, dev_c
        trace.append(dev)
        if np.max(np.abs(beta)) > 50 and np.max(np.abs(step)) > 0.5:
            raise ConvergenceError(
                "coefficients diverging (separation-like data); |beta| = "
                f"{np.max(np.abs(beta)):.3g}"
            )
    else:
        it = max_iter
    fitted = _finish("GLM", data, beta, glm_loglik(beta, data), it, gtol, trace)
    if not fitted.converged:
        raise ConvergenceError(
            f"GLM did not converge in {max_iter} iterations "
            f"(gradient {fitted.gradient_norm:.3g})"
        )
    return fitted


def _random_starts(rng, k, beta, model):
    out = []
    for _ in range(k):
        s1 = rng.uniform(-2.0, -0.1)
        if model == "FMM2":
            p1 = rng.uniform(0.15, 0.85)
            out.append(np.concatenate([beta, [np.log(p1 / (1 - p1)), s1]]))
        else:
            p11, p22 = rng.uniform(0.5, 0.98, size=2)
            out.append(np.concatenate([beta, [np.log(p11 / (1 - p11)), np.log(p22 / (1 - p22)), s1]]))
    return out


def _starts(model, beta, starts, seed, extra=()):
    rng = np.random.default_rng(seed)
    if model == "FMM2":
        grid = [np.concatenate([beta, [np.log(p / (1 - p)), s]]) for s, p in FMM_GRID]
    else:
        grid = [
            np.concatenate([beta, [np.log(p / (1 - p)), np.log(p / (1 - p)), s]])
            for s, p in HMM_GRID
        ]
    out = grid[:starts]
    out += _random_starts(rng, max(0, starts - len(grid)), beta, model)
    return list(extra) + out


def fmm_fit(
    data: CountSeries,
    starts: int = 10,
    seed: int = 0,
    glm: FittedModel | None = None,
    gtol: float = GTOL,
    max_iter: int = MAX_ITER,
) -> FittedModel:
    """Best of ``starts`` quasi-Newton runs on the FMM2 likelihood."""
    _precheck(data)
    glm = glm if glm is not None else glm_fit(data)
    theta, ll, nit = _multistart(
        "FMM2", data, _starts("FMM2", glm.beta, starts, seed), gtol, max_iter
    )
    if ll < glm.loglik - 1e-6:
        # GLM is the collapsed boundary of the FMM family
        near = np.concatenate([glm.beta, [0.0, -1e-3]])
        theta2, ll2, nit2 = _multistart("FMM2", data, [near], gtol, max_iter)
        if ll2 > ll:
            theta, ll, nit = theta2, ll2, nit2
    return _finish("FMM2", data, theta, ll, nit, gtol)


def hmm_fit(
    data: CountSeries,
    starts: int = 10,
    seed: int = 0,
    glm: FittedModel | None = None,
    fmm: FittedModel | None = None,
    gtol: float = GTOL,
    max_iter: int = MAX_ITER,
) -> FittedModel:
    """Best of ``starts`` quasi-Newton runs on the stationary HMM2 likelihood.

    Passing an FMM2 fit adds it as an extra start (identical transition
    rows), which guarantees ``loglik >= fmm.loglik`` up to optimiser noise.
    """
    _precheck(data)
    glm = glm if glm is not None else glm_fit(data)
    extra = []
    if fmm is not None:
        a, s1 = fmm.theta[data.d], fmm.theta[data.d + 1]
        # identical rows: p_11 = p_1 and p_22 = 1 - p_1
        extra.append(np.concatenate([fmm.beta, [a, -a, s1]]))
    theta, ll, nit = _multistart(
        "HMM2", data, _starts("HMM2", glm.beta, starts, seed, extra), gtol, max_iter
    )
    return _finish("HMM2", data, theta, ll, nit, gtol)


def fit(model: str, data: CountSeries, starts: int = 10, seed: int = 0, **kw) -> FittedModel:
    _check_model(model)
    if model == "GLM":
        return glm_fit(data)
    if model == "FMM2":
        return fmm_fit(data, starts=starts, seed=seed, **kw)
    return hmm_fit(data, starts=starts, seed=seed, **kw)
