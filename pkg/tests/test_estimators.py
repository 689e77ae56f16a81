import itertools

import numpy as np
import pytest
import statsmodels.api as sm
from hypothesis import given
from hypothesis import strategies as st
from numpy.testing import assert_allclose
from scipy import stats

from pdcount import _forward
from pdcount.core import CountSeries, LatentSpec
from pdcount.errors import ConvergenceError, DataError, DomainError, RankDeficientError
from pdcount.estimators import (
    constrain,
    fit,
    fmm_fit,
    fmm_loglik,
    forward_loglik,
    glm_fit,
    glm_loglik,
    hmm_fit,
    hmm_loglik,
    n_params,
    natural_params,
    unconstrain,
)
from pdcount.simulation import Covariate, SimConfig, simulate

from conftest import make_series


def brute_force_loglik(y, X, beta, S, pi, P):
    """Sum over every latent path."""
    y = np.asarray(y)
    eta = X @ beta
    K, n = len(S), len(y)
    logf = stats.poisson.logpmf(y[:, None], np.exp(eta[:, None] + np.asarray(S)[None, :]))
    total = 0.0
    for path in itertools.product(range(K), repeat=n):
        w = pi[path[0]] * np.exp(logf[0, path[0]])
        for t in range(1, n):
            w *= P[path[t - 1], path[t]] * np.exp(logf[t, path[t]])
        total += w
    return np.log(total)


def random_chain(rng, K):
    P = rng.dirichlet(np.ones(K) * 2, size=K)
    pi = np.linalg.matrix_power(P, 400)[0]
    S = rng.normal(0, 0.7, K)
    S -= np.log(pi @ np.exp(S))
    return S, pi, P


def random_theta(rng, model, d):
    beta = rng.normal([0.5] + [0.0] * (d - 1), 0.4)
    extra = {"FMM2": 1, "HMM2": 2}[model]
    logits = rng.normal(0, 1.5, extra)
    th = np.concatenate([beta, logits, [0.0]])
    pi1 = natural_params(np.concatenate([beta, logits, [-5.0]]), model, d)[2][0]
    # S_1 anywhere in its feasible range
    th[-1] = np.log(rng.uniform(0.05, 0.95) / pi1)
    return th


def hmm2_data(n=1000, seed=3, beta=(0.5, 1.0), S1=-0.9):
    S = [S1, np.log(2 - np.exp(S1))]
    spec = LatentSpec.hmm(S, [[0.9, 0.1], [0.1, 0.9]])
    data, _ = simulate(SimConfig(n, beta, [Covariate("binary")], spec, seed))
    return data


class TestGLM:
    def test_intercept_only(self):
        f = glm_fit(make_series([1, 2, 3]))
        assert_allclose(f.beta, [np.log(2)], atol=1e-12)
        assert f.converged and f.latent is None

    def test_binary_closed_form(self, rng):
        x = rng.integers(0, 2, 300)
        y = rng.poisson(np.exp(0.3 + 0.7 * x))
        f = glm_fit(make_series(y, x))
        assert_allclose(f.beta[1], np.log(y[x == 1].mean() / y[x == 0].mean()), atol=1e-10)
        assert_allclose(f.beta[0], np.log(y[x == 0].mean()), atol=1e-10)

    def test_matches_statsmodels(self, rng):
        n = 400
        X = np.column_stack([np.ones(n), rng.normal(size=n), np.arange(n) / n])
        y = rng.poisson(np.exp(X @ [0.4, 0.3, -0.5]))
        f = glm_fit(CountSeries(y, X))
        ref = sm.GLM(y, X, family=sm.families.Poisson()).fit(tol=1e-12)
        assert_allclose(f.beta, ref.params, atol=1e-9)
        assert_allclose(f.loglik, ref.llf, rtol=1e-12)

    def test_deviance_non_increasing(self, rng):
        X = np.column_stack([np.ones(200), rng.normal(size=200) * 2])
        y = rng.poisson(np.exp(X @ [2.0, 0.8]))
        tr = np.array(glm_fit(CountSeries(y, X)).trace)
        assert tr.size > 2 and np.all(np.diff(tr) <= 0)

    def test_rank_deficient(self):
        x = np.arange(5.0)
        with pytest.raises(RankDeficientError):
            glm_fit(make_series([1, 2, 0, 3, 1], x, 2 * x))

    def test_all_zero(self):
        with pytest.raises(DataError):
            glm_fit(make_series([0, 0, 0], [0, 1, 0]))

    def test_separation_reported(self):
        x = np.array([0, 0, 0, 1, 1, 1])
        with pytest.raises(ConvergenceError, match="diverg|converge"):
            glm_fit(make_series([2, 1, 3, 0, 0, 0], x))

    def test_glm_loglik_scipy(self, rng):
        X = np.column_stack([np.ones(20), rng.normal(size=20)])
        y = rng.poisson(2.0, 20)
        b = np.array([0.5, 0.2])
        want = stats.poisson.logpmf(y, np.exp(X @ b)).sum()
        assert_allclose(glm_loglik(b, CountSeries(y, X)), want, rtol=1e-13)


class TestLikelihoods:
    def test_hmm_brute_force_k2(self, rng):
        for n in (2, 3, 8, 10):
            X = np.column_stack([np.ones(n), rng.normal(size=n)])
            y = rng.poisson(2.0, n)
            th = random_theta(rng, "HMM2", 2)
            beta, S, pi, P, *_ = natural_params(th, "HMM2", 2)
            want = brute_force_loglik(y, X, beta, S, pi, P)
            assert_allclose(hmm_loglik(th, CountSeries(y, X)), want, atol=1e-10)

    def test_forward_brute_force_k3(self, rng):
        n = 7
        X = np.column_stack([np.ones(n), rng.normal(size=n)])
        y = rng.poisson(3.0, n)
        S, pi, P = random_chain(rng, 3)
        beta = np.array([0.6, -0.3])
        assert_allclose(forward_loglik(y, X, beta, S, pi, P), brute_force_loglik(y, X, beta, S, pi, P), atol=1e-10)

    def test_single_step(self):
        th = np.array([0.4, 0.3, -0.2, -0.5])
        beta, S, pi, *_ = natural_params(th, "HMM2", 1)
        data = make_series([3])
        want = np.log(np.sum(pi * stats.poisson.pmf(3, np.exp(0.4 + S))))
        assert_allclose(hmm_loglik(th, data), want, rtol=1e-13)

    def test_identical_rows_equal_fmm(self, rng):
        data = make_series(rng.poisson(2, 50), rng.normal(size=50))
        a = 0.7
        fmm = np.array([0.3, 0.1, a, -0.4])
        hmm = np.array([0.3, 0.1, a, -a, -0.4])
        assert_allclose(hmm_loglik(hmm, data), fmm_loglik(fmm, data), rtol=1e-12)

    def test_fmm_direct_sum(self):
        y = np.array([0, 3, 1, 7, 2, 4])
        x = np.array([0, 1, 0, 1, 1, 0.0])
        data = make_series(y, x)
        th = np.array([0.2, 0.5, 0.4, -0.6])
        p1 = 1 / (1 + np.exp(-0.4))
        s2 = np.log((1 - p1 * np.exp(-0.6)) / (1 - p1))
        mu = np.exp(0.2 + 0.5 * x)
        want = 0.0
        for t in range(6):
            want += np.log(p1 * stats.poisson.pmf(y[t], mu[t] * np.exp(-0.6))
                           + (1 - p1) * stats.poisson.pmf(y[t], mu[t] * np.exp(s2)))
        assert_allclose(fmm_loglik(th, data), want, rtol=1e-13)

    def test_fmm_collapsed_is_glm(self, rng):
        data = make_series(rng.poisson(2, 40), rng.normal(size=40))
        beta = np.array([0.5, 0.2])
        assert_allclose(fmm_loglik(np.r_[beta, 0.3, 0.0], data), glm_loglik(beta, data), rtol=1e-13)

    def test_fmm_single_component_limit(self, rng):
        data = make_series(rng.poisson(2, 40))
        # p_1 -> 1 forces S_1 -> 0, so the mixture tends to the GLM
        th = np.array([0.5, 30.0, -1e-12])
        assert_allclose(fmm_loglik(th, data), glm_loglik([0.5], data), rtol=1e-10)

    def test_relabel_invariance(self, rng):
        data = make_series(rng.poisson(2, 60), rng.normal(size=60))
        th = random_theta(rng, "HMM2", 2)
        beta, spec = constrain(th, "HMM2", 2)
        S = spec.states[::-1]
        P = spec.transition[::-1, ::-1]
        pi = spec.stationary[::-1]
        assert_allclose(forward_loglik(data.y, data.X, beta, S, pi, P), hmm_loglik(th, data), rtol=1e-12)

    def test_numba_matches_numpy_recursion(self, rng):
        n = 300
        X = np.column_stack([np.ones(n), rng.normal(size=n)])
        y = rng.poisson(np.exp(1 + 0.5 * X[:, 1]))
        S, pi, P = random_chain(rng, 3)
        beta = np.array([1.0, 0.5])
        f = stats.poisson.pmf(y[:, None], np.exp((X @ beta)[:, None] + S[None, :]))
        a, ll = pi * f[0], 0.0
        for t in range(n):
            if t:
                a = (a @ P) * f[t]
            c = a.sum()
            ll += np.log(c)
            a = a / c
        assert_allclose(forward_loglik(y, X, beta, S, pi, P), ll, rtol=1e-11)


class TestConstrain:
    def test_symmetric_null(self):
        _, spec = constrain(np.array([0.0, 0.0, 0.0, 0.0]), "HMM2", 1)
        assert_allclose(spec.states, [0.0, 0.0], atol=1e-15)

    def test_closed_form_s2(self):
        _, spec = constrain(np.array([0.0, 0.0, 0.0, -0.5]), "HMM2", 1)
        assert_allclose(spec.states[1], np.log(2 - np.exp(-0.5)), atol=1e-14)
        assert_allclose(spec.stationary @ np.exp(spec.states), 1.0, atol=1e-15)

    def test_infeasible(self):
        with pytest.raises(DomainError, match="infeasible"):
            natural_params(np.array([0.0, 0.0, 0.0, 0.8]), "HMM2", 1)

    @pytest.mark.parametrize("model", ["FMM2", "HMM2"])
    def test_roundtrip(self, rng, model):
        worst = 0.0
        for _ in range(1000):
            th = random_theta(rng, model, 2)
            beta, spec = constrain(th, model, 2)
            back = unconstrain(beta, spec, model)
            S = natural_params(th, model, 2)[1]
            if S[0] < S[1]:
                worst = max(worst, np.max(np.abs(back - th)))
            else:
                # relabelled on the way out; the round trip lands on the canonical twin
                _, again = constrain(back, model, 2)
                assert_allclose(again.states, spec.states, atol=1e-12)
        assert worst < 1e-12

    @given(st.floats(-4, 4), st.floats(-4, 4), st.floats(0.05, 0.95))
    def test_mean_one(self, a1, a2, share):
        pi1 = natural_params(np.array([0.0, a1, a2, -5.0]), "HMM2", 1)[2][0]
        th = np.array([0.0, a1, a2, np.log(share / pi1)])
        _, spec = constrain(th, "HMM2", 1)
        assert abs(spec.stationary @ np.exp(spec.states) - 1) < 1e-12

    def test_param_counts(self):
        assert [n_params(m, 3) for m in ("GLM", "FMM2", "HMM2")] == [3, 5, 6]


class TestFits:
    def test_nesting(self):
        for seed in range(3):
            data = hmm2_data(n=300, seed=seed)
            g = glm_fit(data)
            f = fmm_fit(data, glm=g)
            h = hmm_fit(data, glm=g, fmm=f)
            assert g.loglik <= f.loglik + 1e-6 <= h.loglik + 2e-6

    def test_hmm_recovers_truth(self):
        data = hmm2_data(n=2000, seed=11)
        h = hmm_fit(data)
        assert h.converged and h.gradient_norm < 1e-6
        assert_allclose(h.beta, [0.5, 1.0], atol=0.1)
        assert_allclose(h.latent.transition.diagonal(), [0.9, 0.9], atol=0.05)
        assert h.latent.states[0] < h.latent.states[1]

    def test_random_search_lower_bound(self, rng):
        data = make_series([0, 5, 6, 1, 0, 7, 8, 1])
        h = hmm_fit(data)
        best = -np.inf
        for _ in range(1000):
            th = random_theta(rng, "HMM2", 1)
            th[0] = rng.normal(1.0, 0.8)
            best = max(best, hmm_loglik(th, data))
        assert h.loglik >= best - 1e-9

    def test_constant_counts_degenerate(self):
        f = fmm_fit(make_series([3] * 40))
        assert f.degenerate
        assert_allclose(f.beta[0], np.log(3), atol=1e-6)

    def test_glm_truth_collapses(self):
        data, _ = simulate(SimConfig(800, (0.7, 0.5), [Covariate("binary")], LatentSpec.ar1(0.0, 0.0), 5))
        g = glm_fit(data)
        h = hmm_fit(data, glm=g)
        se = np.sqrt(np.diag(np.linalg.inv(data.X.T @ (np.exp(data.X @ g.beta)[:, None] * data.X))))
        assert np.all(np.abs(h.beta - g.beta) < 2 * se)
        S = h.latent.states
        share = min(h.latent.stationary)
        assert S[1] - S[0] < 0.5 or share < 0.05 or h.degenerate

    def test_deterministic(self):
        data = hmm2_data(n=300, seed=4)
        a, b = fit("HMM2", data, seed=9), fit("HMM2", data, seed=9)
        assert np.array_equal(a.theta, b.theta) and a.loglik == b.loglik

    def test_unknown_model(self):
        with pytest.raises(DomainError):
            fit("HMM3", make_series([1, 2]))


def test_zero_mass_path_is_minus_infinity():
    X = np.ones((3, 1))
    y = np.array([100.0, 1.0, 2.0])
    ll = forward_loglik(y, X, [0.0], [-50.0, 50.0], [0.0, 1.0], np.eye(2))
    assert ll == -np.inf
    eta = np.array([[-50.0, 50.0]] * 3)
    ll, sc = _forward.forward_scores(y, X, eta, np.array([0.0, 1.0]), np.eye(2),
                                     np.zeros((1, 2)), np.zeros((1, 2)), np.zeros((1, 2, 2)))
    assert ll == -np.inf and np.isnan(sc).all()
