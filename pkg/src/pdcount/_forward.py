"""Scaled forward recursion for Poisson HMMs and its parameter derivatives.

State ``j`` at time ``t`` emits ``Pois(exp(eta[t, j]))``.  Emission densities
are shifted by their per-step maximum in log space, so neither recursion can
underflow.  The derivative pass propagates ``d alpha_hat_t / d theta``
alongside the normalised forward probabilities and returns the per-step
conditional scores ``d log Lambda_t / d theta``.

Derivative inputs describe how the natural parameters move with ``theta``:

* ``X`` (n, d): ``d eta[t, j] / d theta_k = X[t, k]`` for ``k < d``;
* ``dS`` (p, K): ``d eta[t, j] / d theta_k = dS[k, j]`` for ``k >= d``;
* ``dpi`` (p, K) and ``dP`` (p, K, K): initial and transition derivatives.
"""

import math

import numpy as np
from numba import njit


@njit(cache=True)
def _log_emission(y, eta, out):
    n, K = eta.shape
    for t in range(n):
        lg = math.lgamma(y[t] + 1.0)
        for j in range(K):
            out[t, j] = y[t] * eta[t, j] - math.exp(eta[t, j]) - lg


@njit(cache=True)
def forward_loglik(y, eta, pi, P):
    """Return ``(loglik, log_lambda)`` with ``log_lambda[t] = log P(Y_t | Y_<t)``."""
    n, K = eta.shape
    logf = np.empty((n, K))
    _log_emission(y, eta, logf)
    alpha = np.empty(K)
    phi = np.empty(K)
    log_lam = np.empty(n)
    total = 0.0
    for t in range(n):
        c = logf[t, 0]
        for j in range(1, K):
            if logf[t, j] > c:
                c = logf[t, j]
        lam = 0.0
        for j in range(K):
            if t == 0:
                pred = pi[j]
            else:
                pred = 0.0
                for i in range(K):
                    pred += alpha[i] * P[i, j]
            phi[j] = pred * math.exp(logf[t, j] - c)
            lam += phi[j]
        if not lam > 0.0:
            # every feasible state has zero predicted mass
            log_lam[t:] = -np.inf
            return -np.inf, log_lam
        for j in range(K):
            alpha[j] = phi[j] / lam
        log_lam[t] = math.log(lam) + c
        total += log_lam[t]
    return total, log_lam


@njit(cache=True)
def forward_scores(y, X, eta, pi, P, dS, dpi, dP):
    """Return ``(loglik, scores)``; ``scores[t]`` is the gradient of ``log Lambda_t``."""
    n, K = eta.shape
    d = X.shape[1]
    p = dpi.shape[0]
    logf = np.empty((n, K))
    _log_emission(y, eta, logf)
    alpha = np.empty(K)
    dalpha = np.zeros((K, p))
    phi = np.empty(K)
    dphi = np.empty((K, p))
    f = np.empty(K)
    resid = np.empty(K)
    dlam = np.empty(p)
    scores = np.empty((n, p))
    total = 0.0
    for t in range(n):
        c = logf[t, 0]
        for j in range(1, K):
            if logf[t, j] > c:
                c = logf[t, j]
        for j in range(K):
            f[j] = math.exp(logf[t, j] - c)
            resid[j] = y[t] - math.exp(eta[t, j])
        lam = 0.0
        for k in range(p):
            dlam[k] = 0.0
        for j in range(K):
            if t == 0:
                pred = pi[j]
            else:
                pred = 0.0
                for i in range(K):
                    pred += alpha[i] * P[i, j]
            phi[j] = pred * f[j]
            lam += phi[j]
            for k in range(p):
                if t == 0:
                    dpred = dpi[k, j]
                else:
                    dpred = 0.0
                    for i in range(K):
                        dpred += dalpha[i, k] * P[i, j] + alpha[i] * dP[k, i, j]
                if k < d:
                    deta = X[t, k]
                else:
                    deta = dS[k, j]
                dphi[j, k] = dpred * f[j] + phi[j] * resid[j] * deta
                dlam[k] += dphi[j, k]
        if not lam > 0.0:
            scores[:, :] = np.nan
            return -np.inf, scores
        for k in range(p):
            scores[t, k] = dlam[k] / lam
        for j in range(K):
            alpha[j] = phi[j] / lam
            for k in range(p):
                dalpha[j, k] = (dphi[j, k] - alpha[j] * dlam[k]) / lam
        total += math.log(lam) + c
    return total, scores


@njit(cache=True)
def sample_chain(u, pi, P):
    """Markov chain path driven by uniforms ``u`` (length n)."""
    n = u.shape[0]
    K = pi.shape[0]
    cum_pi = np.cumsum(pi)
    cum_P = np.empty((K, K))
    for i in range(K):
        acc = 0.0
        for j in range(K):
            acc += P[i, j]
            cum_P[i, j] = acc
    path = np.empty(n, dtype=np.int64)
    s = K - 1
    for j in range(K):
        if u[0] < cum_pi[j]:
            s = j
            break
    path[0] = s
    for t in range(1, n):
        prev = path[t - 1]
        s = K - 1
        for j in range(K):
            if u[t] < cum_P[prev, j]:
                s = j
                break
        path[t] = s
    return path
