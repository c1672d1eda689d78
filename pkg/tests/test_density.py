import math

import numpy as np
import pytest

from exitlab.density import (DensityEstimate, PolicyError, check_policy, density_report, kde,
                             sample_M_at, small_ball_check, weighted_sup_distance)
from exitlab.sde import SimConfig
from exitlab.theory import GaussianReference


def normal_sample(n=100_000, var=0.5, seed=0):
    return np.random.default_rng(seed).normal(0.0, math.sqrt(var), n)


def test_kde_gaussian_oracle():
    est = kde(normal_sample())
    ref = GaussianReference(0.0, 0.5)
    assert np.max(np.abs(est.values - ref.pdf(est.grid))) <= 0.02
    assert est.grid.size == 512
    assert est.bandwidth == pytest.approx(1.06 * np.std(normal_sample(), ddof=1) * 1e5 ** -0.2)


def test_kde_normalization_and_positivity():
    est = kde(normal_sample(20_000))
    assert np.all(est.values >= 0)
    assert 0.98 <= est.integral() <= 1.001
    rng = np.random.default_rng(1)
    bimodal = np.concatenate([rng.normal(-2, 0.3, 5000), rng.normal(2, 0.3, 5000)])
    assert kde(bimodal).integral() == pytest.approx(1.0, abs=0.02)


def test_kde_errors():
    with pytest.raises(ValueError):
        kde(np.ones(5000))
    with pytest.warns(UserWarning):
        kde(normal_sample(200))


def test_weighted_distance():
    ref = GaussianReference(0.0, 0.5)
    assert weighted_sup_distance(kde(normal_sample()), ref) <= 0.05
    grid = np.linspace(-6 * ref.sd, 6 * ref.sd, 512)
    exact = DensityEstimate(grid, ref.pdf(grid), 0.0, 0)
    assert weighted_sup_distance(exact, ref) == 0.0


def test_policy_window():
    check_policy(1.5, 0.1)
    with pytest.raises(PolicyError):
        check_policy(2.5, 0.1)
    with pytest.raises(PolicyError):
        check_policy(0.5, 0.1)  # below 1 - 1/log(10) = 0.566


def test_linear_moments(linear):
    eps, n = 0.1, 100_000
    m = sample_M_at(linear, eps, 0.4, 1.5, n, SimConfig(epsilon=eps), 1)
    var = (1 - eps ** 3) / 2
    assert abs(m.mean() - 0.4) <= 3 * math.sqrt(var / n)
    assert abs(m.var(ddof=1) - var) <= 3 * var * math.sqrt(2 / (n - 1))


def test_cubic_centered(cubic):
    eps, n = 0.1, 50_000
    m = sample_M_at(cubic, eps, 0.0, 1.5, n, SimConfig(epsilon=eps, dt=5e-3), 2)
    assert abs(m.mean()) <= 3 * m.std() / math.sqrt(n)


def test_sample_rejects_bad_policy(linear):
    with pytest.raises(PolicyError):
        sample_M_at(linear, 0.1, 0.0, 2.5, 10)


def test_density_report(linear):
    est, ref, dist = density_report(linear, 0.1, 0.0, 50_000, SimConfig(epsilon=0.1, dt=5e-3), 0)
    assert ref.variance == 0.5 and est.x_start == 0.0
    assert 0.98 <= est.integral() <= 1.001
    assert dist < 0.05


def test_small_ball_linear(linear):
    eps, theta = 0.05, 0.5
    sb = small_ball_check(linear, eps, 0.0, theta, 100_000, SimConfig(epsilon=eps, dt=5e-3), 0)
    emp, theo = sb
    assert theo == pytest.approx(math.sqrt(eps) / math.sqrt(math.pi), rel=1e-12)
    assert 0.9 <= sb.ratio <= 1.1
    assert sb.T == pytest.approx(math.log(0.5 / eps) - theta * math.log(eps), rel=1e-12)


def test_small_ball_far_start(linear):
    eps = 0.05
    with pytest.warns(UserWarning, match="hits"):
        sb = small_ball_check(linear, eps, 3.0, 0.5, 100_000, SimConfig(epsilon=eps, dt=5e-3), 0)
    assert sb.hits <= 10
    assert sb.theoretical == pytest.approx(math.exp(-9) * math.sqrt(eps / math.pi), rel=1e-12)


def test_small_ball_symmetry(cubic):
    eps, cfg = 0.05, SimConfig(epsilon=0.05, dt=5e-3)
    plus = small_ball_check(cubic, eps, 0.0, 0.5, 50_000, cfg, 3, sign=1)
    minus = small_ball_check(cubic, eps, 0.0, 0.5, 50_000, cfg, 3, sign=-1)
    assert abs(plus.empirical - minus.empirical) <= 3 * math.hypot(plus.standard_error, minus.standard_error)


def test_small_ball_validation(linear):
    with pytest.raises(ValueError):
        small_ball_check(linear, 0.1, 0.0, 0.0, 10)
    with pytest.raises(ValueError):
        small_ball_check(linear, 0.1, 0.0, 0.5, 10, sign=2)
