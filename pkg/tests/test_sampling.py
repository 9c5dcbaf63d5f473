import math

import numpy as np
import pytest
from scipy import integrate, stats

from bmilasso.sampling import (
    ChainConfig,
    cholesky_or_raise,
    make_rng,
    rhat,
    rhat_array,
    sample_gig,
    sample_gig_half,
    sample_inv_gamma,
    sample_inverse_gaussian,
    sample_mvn_precision,
)


def gig_moments(p, a, b):
    """Mean and variance of GIG(p, a, b) by quadrature of the unnormalized density."""
    logf = lambda x: (p - 1) * math.log(x) - 0.5 * (a * x + b / x)
    mode = ((p - 1) + math.sqrt((p - 1) ** 2 + a * b)) / a
    c = logf(mode)
    f = lambda x, k: x**k * math.exp(logf(x) - c)
    Z = integrate.quad(f, 0, np.inf, args=(0,), limit=400, points=None)[0]
    m1 = integrate.quad(f, 0, np.inf, args=(1,), limit=400)[0] / Z
    m2 = integrate.quad(f, 0, np.inf, args=(2,), limit=400)[0] / Z
    return m1, m2 - m1 * m1


def test_substreams_are_distinct_and_reproducible():
    a = make_rng(7, 0).random(5)
    assert np.array_equal(a, make_rng(7, 0).random(5))
    assert not np.array_equal(a, make_rng(7, 1).random(5))
    assert not np.array_equal(a, make_rng(8, 0).random(5))


def test_chain_config_validation():
    with pytest.raises(ValueError):
        ChainConfig(n_chains=1)
    with pytest.raises(ValueError):
        ChainConfig(kept=150, thin=2)
    assert ChainConfig(kept=400, thin=4).retained == 100


def test_inverse_gaussian_moments():
    rng = make_rng(1)
    mu, lam = 2.0, 3.0
    x = sample_inverse_gaussian(mu, lam, rng, size=200_000)
    assert abs(x.mean() - mu) < 4 * math.sqrt(mu**3 / lam / x.size)
    assert abs(x.var() / (mu**3 / lam) - 1) < 0.05
    assert stats.kstest(x, stats.invgauss(mu / lam, scale=lam).cdf).statistic < 0.01


def test_inverse_gaussian_extreme_ratio_stays_positive():
    x = sample_inverse_gaussian(1e8, 1e-6, make_rng(2), size=1000)
    assert np.all(x > 0) and np.all(np.isfinite(x))
    with pytest.raises(ValueError):
        sample_inverse_gaussian(-1.0, 1.0, make_rng(0))


@pytest.mark.parametrize("a,b", [(1.0, 1.0), (4.0, 0.2), (0.3, 9.0)])
def test_gig_half_against_quadrature(a, b):
    m, v = gig_moments(0.5, a, b)
    x = sample_gig_half(a, b, make_rng(3), size=200_000)
    assert abs(x.mean() - m) < 4 * math.sqrt(v / x.size)


def test_gig_half_b_zero_is_gamma():
    x = sample_gig_half(2.0, 0.0, make_rng(4), size=100_000)
    assert stats.kstest(x, stats.gamma(0.5, scale=1.0).cdf).statistic < 0.01


@pytest.mark.parametrize("p,a,b", [(-7.5, 0.3, 40.0), (3.5, 2.0, 1.0), (0.8, 5.0, 5.0), (-1.2, 1.0, 0.5), (12.0, 1.0, 30.0)])
def test_general_gig_against_quadrature(p, a, b):
    m, v = gig_moments(p, a, b)
    rng = make_rng(5)
    x = np.array([sample_gig(p, a, b, rng) for _ in range(40_000)])
    assert abs(x.mean() - m) < 4 * math.sqrt(v / x.size)
    assert abs(x.var() / v - 1) < 0.06


def test_inv_gamma_mean():
    x = sample_inv_gamma(5.0, np.full(100_000, 8.0), make_rng(6))
    assert abs(x.mean() - 2.0) < 0.03


def test_mvn_precision_moments():
    rng = make_rng(7)
    A = rng.normal(size=(3, 3))
    P = A @ A.T + 3 * np.eye(3)
    b = np.array([1.0, -2.0, 0.5])
    draws = sample_mvn_precision(np.broadcast_to(b, (100_000, 3)), np.broadcast_to(P, (100_000, 3, 3)), rng)
    cov = np.linalg.inv(P)
    assert np.allclose(draws.mean(axis=0), cov @ b, atol=4 * math.sqrt(cov.max() / 1e5) * 3)
    assert np.allclose(np.cov(draws.T), cov, rtol=0.03, atol=0.003)


def test_cholesky_reports_pivot():
    P = np.diag([1.0, -1.0, 1.0])
    with pytest.raises(np.linalg.LinAlgError, match="leading pivot 1"):
        cholesky_or_raise(P)


def _rhat_reference(x):
    # textbook split-R-hat written out element by element
    m, n = x.shape
    h = n // 2
    halves = [c[:h] for c in x] + [c[n - h :] for c in x]
    means = [sum(c) / h for c in halves]
    grand = sum(means) / len(means)
    B = h / (len(halves) - 1) * sum((mu - grand) ** 2 for mu in means)
    W = sum(sum((v - mu) ** 2 for v in c) / (h - 1) for c, mu in zip(halves, means)) / len(halves)
    return math.sqrt(((h - 1) / h * W + B / h) / W)


def test_rhat_matches_reference_and_flags_shift():
    rng = make_rng(8)
    x = rng.normal(size=(4, 200))
    assert math.isclose(rhat(x), max(1.0, _rhat_reference(x)), rel_tol=1e-12)
    assert rhat(x) < 1.05
    shifted = x + np.array([0, 0, 0, 3.0])[:, None]
    assert rhat(shifted) > 1.1


def test_rhat_constant_chains():
    assert rhat(np.zeros((3, 50))) == 1.0
    x = np.vstack([np.zeros(50), make_rng(0).normal(size=50)])
    with pytest.warns(RuntimeWarning):
        assert rhat(x) == math.inf
    # point masses are legitimate for spike-and-slab coefficients
    assert math.isfinite(rhat(x, point_mass=True))


def test_rhat_array_shape():
    x = make_rng(1).normal(size=(2, 100, 3, 4))
    assert rhat_array(x).shape == (3, 4)
