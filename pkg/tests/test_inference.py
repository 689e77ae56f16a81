import numpy as np
import pytest
import statsmodels.api as sm
from numpy.testing import assert_allclose

from pdcount.core import CountSeries, LatentSpec
from pdcount.errors import CovarianceError, DomainError
from pdcount.estimators import fmm_fit, fmm_loglik, glm_fit, hmm_fit, hmm_loglik, loglik_and_scores
from pdcount.inference import (
    conditional_scores,
    ddw_moment_se,
    glm_scores,
    hmm_scores_lystig_hughes,
    icbrt,
    sandwich,
    white_covariance,
)
from pdcount.simulation import Covariate, SimConfig, simulate

from conftest import make_series
from test_estimators import random_theta


def fd_gradient(f, th, h=1e-5):
    g = np.empty_like(th)
    for i in range(th.size):
        e = np.zeros_like(th)
        e[i] = h
        g[i] = (f(th + e) - f(th - e)) / (2 * h)
    return g


def glmm_data(n=400, seed=1):
    cfg = SimConfig(n, (0.8, 0.5), [Covariate("normal")], LatentSpec.ar1(0.6, 0.2), seed)
    return simulate(cfg)[0]


class TestScores:
    def test_glm_toy(self):
        data = make_series([1, 2, 3])
        cs = glm_scores(glm_fit(data), data)
        assert_allclose(cs.scores[:, 0], [-1, 0, 1], atol=1e-12)
        assert_allclose(cs.H_hat, [[-2.0]], rtol=1e-12)

    def test_glm_information_reimplemented(self, rng):
        n = 200
        X = np.column_stack([np.ones(n), rng.normal(size=n), np.cos(np.arange(n) / 3)])
        y = rng.poisson(np.exp(X @ [0.5, 0.2, -0.3]))
        data = CountSeries(y, X)
        f = glm_fit(data)
        cs = glm_scores(f, data)
        mu = np.exp(X @ f.beta)
        H = np.zeros((3, 3))
        for t in range(n):
            H -= mu[t] * np.outer(X[t], X[t])
        assert_allclose(cs.H_hat, H / n, rtol=1e-12)
        assert np.max(np.abs(cs.total)) < 1e-6

    @pytest.mark.parametrize("model, ll", [("HMM2", hmm_loglik), ("FMM2", fmm_loglik)])
    def test_gradient_vs_finite_differences(self, rng, model, ll):
        for _ in range(10):
            n = int(rng.integers(20, 200))
            data = make_series(rng.poisson(rng.uniform(0.5, 6), n), rng.normal(size=n))
            th = random_theta(rng, model, 2)
            total, sc = loglik_and_scores(th, model, data)
            fd = fd_gradient(lambda t: ll(t, data), th)
            assert_allclose(sc.sum(axis=0), fd, rtol=1e-6, atol=1e-6 * max(1, np.abs(fd).max()))
            assert_allclose(total, ll(th, data), rtol=1e-12)

    def test_identical_rows_give_iid_scores(self, rng):
        n = 60
        data = make_series(rng.poisson(2, n), rng.normal(size=n))
        a = 0.4
        _, s_hmm = loglik_and_scores(np.array([0.3, 0.1, a, -a, -0.4]), "HMM2", data)
        _, s_fmm = loglik_and_scores(np.array([0.3, 0.1, a, -0.4]), "FMM2", data)
        # HMM logit derivatives are the FMM one split across the two rows
        assert_allclose(s_hmm[:, :2], s_fmm[:, :2], atol=1e-12)
        assert_allclose(s_hmm[:, 4], s_fmm[:, 3], atol=1e-12)
        # per-step FMM score depends only on y_t
        for t in range(n):
            one = CountSeries(data.y[t:t + 1], data.X[t:t + 1, :1])
            _, s1 = loglik_and_scores(np.array([0.3 + 0.1 * data.X[t, 1], a, -0.4]), "FMM2", one)
            assert_allclose(s1[0, 1:], s_fmm[t, 2:], atol=1e-12)

    def test_scores_vanish_at_optimum(self):
        cfg = SimConfig(600, (0.5, 1.0), [Covariate("binary")],
                        LatentSpec.hmm([-0.9, np.log(2 - np.exp(-0.9))], [[0.9, 0.1], [0.1, 0.9]]), 2)
        data = simulate(cfg)[0]
        h = hmm_fit(data)
        cs = hmm_scores_lystig_hughes(h, data)
        assert np.max(np.abs(cs.total)) < 1e-5
        assert np.all(np.linalg.eigvalsh(cs.H_hat) < 0)

    def test_wrong_model(self):
        data = make_series([1, 2, 3])
        with pytest.raises(DomainError):
            hmm_scores_lystig_hughes(glm_fit(data), data)


class TestSandwich:
    def test_information_equality(self, rng):
        p, n = 3, 200_000
        A = rng.normal(size=(p, p))
        J = A @ A.T + p * np.eye(p)
        s = rng.multivariate_normal(np.zeros(p), J, size=n)
        cov = sandwich(s, -J, ell=0).cov
        assert_allclose(cov * n, np.linalg.inv(J), rtol=0.02, atol=0.002)

    def test_lag_formula(self, rng):
        s = rng.normal(size=(30, 2))
        H = -np.eye(2)
        got = sandwich(s, H, ell=2).I_hat * 30
        want = s.T @ s
        for tau in (1, 2):
            for t in range(tau, 30):
                want += np.outer(s[t], s[t - tau]) + np.outer(s[t - tau], s[t])
        assert_allclose(got, want, rtol=1e-12)

    def test_ell_bound(self, rng):
        s = rng.normal(size=(27, 1))
        sandwich(s, -np.eye(1), ell=2)
        with pytest.raises(DomainError):
            sandwich(s, -np.eye(1), ell=3)

    def test_singular(self, rng):
        with pytest.raises(CovarianceError, match="eigenvalue"):
            sandwich(rng.normal(size=(50, 2)), np.array([[-1.0, 0], [0, 0]]), ell=0)

    def test_lag_terms_are_used(self, rng):
        s = rng.normal(size=(500, 2))
        s[1:] += 0.8 * s[:-1]
        H = -np.eye(2)
        a, b = sandwich(s, H, 1).cov, sandwich(s[rng.permutation(500)], H, 1).cov
        assert not np.allclose(a, b)
        a0, b0 = sandwich(s, H, 0).cov, sandwich(s[rng.permutation(500)], H, 0).cov
        assert_allclose(a0, b0, rtol=1e-12)

    def test_glm_white_matches_statsmodels_hac(self, rng):
        data = glmm_data()
        f = glm_fit(data)
        for ell in (0, 1, 3):
            ours = white_covariance(f, data, ell).cov
            ref = sm.GLM(data.y, data.X, family=sm.families.Poisson()).fit(
                cov_type="HAC", cov_kwds={"maxlags": ell, "kernel": "uniform", "use_correction": False}, tol=1e-12
            )
            assert_allclose(ours, ref.cov_params(), rtol=1e-6)

    def test_scaling_with_n(self, rng):
        data = glmm_data(n=300, seed=4)
        twice = CountSeries(np.r_[data.y, data.y], np.r_[data.X, data.X])
        a = white_covariance(glm_fit(data), data, 0).cov
        b = white_covariance(glm_fit(twice), twice, 0).cov
        assert_allclose(b, a / 2, rtol=1e-6)

    def test_rejects_non_stationary_point(self):
        data = glmm_data()
        f = glm_fit(data)
        bad = type(f)(**{**f.__dict__, "beta": f.beta + 0.1, "theta": f.theta + 0.1})
        with pytest.raises(CovarianceError, match="scores"):
            white_covariance(bad, data)

    def test_hmm_white_uses_conditional_scores(self):
        data = glmm_data(n=500, seed=7)
        h = hmm_fit(data)
        cs = conditional_scores(h, data)
        sw = white_covariance(h, data, 1)
        Hi = np.linalg.inv(cs.H_hat)
        I = sandwich(cs.scores, cs.H_hat, 1).I_hat
        assert_allclose(sw.cov, Hi @ I @ Hi / data.n, rtol=1e-10)
        assert np.all(sw.se > 0)


class TestDDW:
    def test_icbrt(self):
        assert [icbrt(n) for n in (1, 7, 8, 26, 27, 999, 1000, 1001)] == [1, 1, 2, 2, 3, 9, 10, 10]

    def test_direct_double_sum(self):
        data = glmm_data(n=120, seed=3)
        f = glm_fit(data)
        out = ddw_moment_se(f, data, max_lag=4)
        mu = np.exp(data.X @ f.beta)
        e = data.y - mu
        s2 = np.sum(e**2 - mu) / np.sum(mu**2)
        gam = {0: s2}
        for tau in range(1, 5):
            gam[tau] = np.sum(e[tau:] * e[:-tau]) / np.sum(mu[tau:] * mu[:-tau])
        n, d = data.X.shape
        W = np.zeros((d, d))
        V = np.zeros((d, d))
        for s in range(n):
            W += mu[s] * np.outer(data.X[s], data.X[s])
            for t in range(n):
                if abs(s - t) <= 4:
                    V += mu[s] * mu[t] * gam[abs(s - t)] * np.outer(data.X[s], data.X[t])
        Wi = np.linalg.inv(W)
        assert_allclose(out.cov, Wi + Wi @ V @ Wi, rtol=1e-10)
        assert out.ell == 4

    def test_default_lag(self):
        data = glmm_data(n=343, seed=2)
        assert ddw_moment_se(glm_fit(data), data).ell == 7

    def test_no_latent_gives_model_covariance(self):
        data = glmm_data(n=200, seed=5)
        f = glm_fit(data)
        out = ddw_moment_se(f, data, max_lag=3, moments=(0.0, np.zeros(3)))
        mu = np.exp(data.X @ f.beta)
        assert_allclose(out.cov, np.linalg.inv(data.X.T @ (mu[:, None] * data.X)), rtol=1e-12)

    def test_negative_sigma_truncated(self):
        data = make_series([2, 2, 2, 2, 3, 2, 2, 1, 2, 2, 2, 2])
        out = ddw_moment_se(glm_fit(data), data)
        assert "truncated" in out.flags[0]
        assert out.extras["sigma2_hat"] == 0.0

    def test_needs_glm(self):
        data = glmm_data(n=200)
        with pytest.raises(DomainError):
            ddw_moment_se(fmm_fit(data), data)
