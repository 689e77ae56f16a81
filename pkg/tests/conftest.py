import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from pdcount.core import CountSeries

settings.register_profile(
    "default", max_examples=40, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def make_series(y, *cols):
    y = np.asarray(y)
    X = np.column_stack([np.ones(y.size)] + [np.asarray(c, float) for c in cols])
    return CountSeries(y, X)


@pytest.fixture
def series():
    return make_series


def batch_mean_z(values, expected, batches=200):
    """z-score of ``mean(values)`` against ``expected`` using batch-means SEs.

    A statistic that is constant up to rounding gives 0 when it equals
    ``expected`` to 1e-9 relative, and ``inf`` otherwise.
    """
    v = np.asarray(values, float)
    m = v.size // batches
    b = v[: m * batches].reshape(batches, m).mean(axis=1)
    diff = b.mean() - expected
    se = b.std(ddof=1) / np.sqrt(batches)
    if se <= 1e-12 * max(1.0, abs(expected)):
        return 0.0 if abs(diff) <= 1e-9 * max(1.0, abs(expected)) else np.inf
    return diff / se


def empirical_factor_z(spec, mu, y):
    """z-scores of unbiased OD and AC1 statistics of counts ``y`` at means ``mu``."""
    from pdcount.core import factor_profile, latent_moments

    s2 = latent_moments(spec, 1).sigma_alpha_sq
    var = mu * (1.0 + s2 * mu)
    prof = factor_profile(spec, mu)
    e = y - mu
    od_z = batch_mean_z(e**2 / mu, prof.od)
    ac_z = batch_mean_z(e[:-1] * e[1:] / np.sqrt(var[:-1] * var[1:]), prof.ac1)
    return od_z, ac_z


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda l: int(l.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
