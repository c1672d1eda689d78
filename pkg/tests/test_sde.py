import math

import numpy as np
import pytest
from scipy import stats

from exitlab.model import choose_neighborhood
from exitlab.rng import Stream
from exitlab.sde import (SimConfig, exit_summary, linear_coefficients, malliavin_derivative,
                         run_linearized, simulate_linearized, simulate_path, states_at)


def f_cubic(x):
    return x / np.sqrt(1 + x**2)


def g_cubic(y):
    return y / np.sqrt(1 - y**2)


def test_config_invariants():
    with pytest.raises(ValueError):
        SimConfig(epsilon=0.1, dt=0.02)
    with pytest.raises(ValueError):
        SimConfig(epsilon=1.0)
    with pytest.raises(ValueError):
        SimConfig(epsilon=0.1, scheme="heun")
    cfg = SimConfig(epsilon=0.1)
    assert cfg.horizon(1.0) >= 2 * math.log(10)


def test_zero_noise_follows_flow(linear):
    path = simulate_path(linear, 0.1, SimConfig(epsilon=0.0, max_time=2.0), Stream(0))
    keep = path.times <= 2.0
    err = np.abs(path.states[keep] - 0.1 * np.exp(path.times[keep]))
    assert err.max() <= 1e-3


def test_ou_law_ks(linear):
    eps = 0.1
    xs, _ = states_at(linear, 0.0, 1.0, SimConfig(epsilon=eps), 20_000, 5)
    sd = eps * math.sqrt((math.e**2 - 1) / 2)
    assert stats.kstest(xs, "norm", args=(0.0, sd)).pvalue > 0.01


def test_start_on_boundary(linear, cubic):
    for m in (linear, cubic):
        path = simulate_path(m, m.q_plus, SimConfig(epsilon=0.1), Stream(0))
        assert path.exit.tau == 0.0 and path.exit.side == 1
        tau, side = exit_summary(m, m.q_plus, SimConfig(epsilon=0.1), 50, 1)
        assert np.all(tau == 0.0) and np.all(side == 1)


def test_path_invariants(cubic):
    cfg = SimConfig(epsilon=0.1)
    nb = choose_neighborhood(cubic)
    path = simulate_path(cubic, 0.0, cfg, Stream(3, slot=2), nb)
    assert path.states.size == path.times.size == path.dw.size + 1
    assert not path.censored
    slack = 6 * math.sqrt(cfg.dt)
    assert np.all(path.states[:-1] > cubic.q_minus - slack)
    assert np.all(path.states[:-1] < cubic.q_plus + slack)
    assert path.times[-2] <= path.exit.tau <= path.times[-1] + 1e-12
    tau_v, side_v = path.exit.crossed_neighborhood
    assert 0 < tau_v < path.exit.tau
    # increments are the stream's normals scaled by sqrt(dt)
    np.testing.assert_allclose(path.dw, math.sqrt(cfg.dt) * Stream(3, slot=2).normals(path.dw.size))


def test_batch_matches_single_paths(cubic):
    cfg = SimConfig(epsilon=0.1)
    tau, side = exit_summary(cubic, 0.0, cfg, 5, 9)
    for i in range(5):
        path = simulate_path(cubic, 0.0, cfg, Stream(9, slot=i))
        assert path.exit.tau == pytest.approx(tau[i], abs=1e-12)
        assert path.exit.side == side[i]


def test_censoring(linear):
    path = simulate_path(linear, 0.0, SimConfig(epsilon=0.01, max_time=0.5), Stream(1))
    assert path.censored


def test_milstein_matches_euler_for_additive_noise(linear):
    a = simulate_path(linear, 0.0, SimConfig(epsilon=0.1), Stream(4))
    b = simulate_path(linear, 0.0, SimConfig(epsilon=0.1, scheme="milstein"), Stream(4))
    np.testing.assert_allclose(a.states, b.states, atol=1e-12)


def test_linearized_linear_model_is_a_gaussian_sum(linear):
    nb = choose_neighborhood(linear)
    cfg = SimConfig(epsilon=0.1)
    path, tr = simulate_linearized(linear, nb, 0.3, cfg, Stream(2), horizon=2.0, stop_at_exit=False)
    weights = np.exp(-tr.times[:-1])
    expected = 0.3 + np.concatenate([[0.0], np.cumsum(weights * path.dw)])
    np.testing.assert_allclose(tr.M, expected, atol=1e-12)
    assert np.all(tr.V == 0.0)


def test_duhamel_bookkeeping_and_exit_identity(cubic):
    nb = choose_neighborhood(cubic)
    cfg = SimConfig(epsilon=0.1)
    coeffs = linear_coefficients(cubic, nb.R)
    C = coeffs.sup_h / (2 * cubic.lambda_)
    for i in range(20):
        path, tr = simulate_linearized(cubic, nb, 0.0, cfg, Stream(6, slot=i), coeffs=coeffs)
        np.testing.assert_allclose(tr.M, tr.x0_lin + tr.U + tr.V, atol=1e-12)
        assert np.all(np.abs(tr.V) <= C * cfg.epsilon)
        tau = path.exit.tau
        assert nb.R == pytest.approx(cfg.epsilon * math.exp(tau) * abs(tr.m_exit), rel=1e-6)
        assert np.sign(tr.m_exit) == path.exit.side


def test_exit_identity_and_sign_coupling_batch(cubic):
    nb = choose_neighborhood(cubic)
    eps, dt = 0.1, 1e-3
    b = run_linearized(cubic, nb.R, 0.0, SimConfig(epsilon=eps, dt=dt), 8, 10_000)
    assert np.all(b.side_v != 0)
    predicted = math.log(nb.R / eps) - np.log(np.abs(b.m_exit))
    assert np.max(np.abs(b.tau_v - predicted)) <= 2 * dt
    assert np.all(np.sign(b.m_exit) == b.side_v)


def test_linear_variance_of_M(linear):
    eps, T = 0.1, 2.0
    b = run_linearized(linear, 0.5, 0.0, SimConfig(epsilon=eps), 1, 100_000, obs_times=[T],
                       stop_at_exit=False)
    m = b.m_obs[:, 0]
    exact = (1 - math.exp(-2 * T)) / 2
    se = exact * math.sqrt(2 / (m.size - 1))
    assert abs(m.var(ddof=1) - exact) <= 3 * se


def test_sup_U_gaussian_tails(cubic):
    nb = choose_neighborhood(cubic)
    coeffs = linear_coefficients(cubic, nb.R)
    C = coeffs.sup_sigma**2 / (2 * cubic.lambda_)
    b = run_linearized(cubic, nb.R, 0.0, SimConfig(epsilon=0.1, dt=5e-3), 2, 100_000,
                       horizon=1.5 * math.log(10), stop_at_exit=False, coeffs=coeffs)
    for a in (1.0, 2.0, 3.0):
        empirical = np.mean(b.sup_u >= a)
        assert 2 * empirical <= 2 * math.exp(-a**2 / (2 * C))


def test_coordinates_agree_to_first_order(cubic):
    nb = choose_neighborhood(cubic)
    eps, x_lin = 0.1, 0.5
    medians = []
    for dt in (1e-3, 5e-4):
        cfg = SimConfig(epsilon=eps, dt=dt)
        gaps = []
        for i in range(200):
            p, _ = simulate_linearized(cubic, nb, x_lin, cfg, Stream(3, slot=i))
            px = simulate_path(cubic, g_cubic(eps * x_lin), cfg, Stream(3, slot=i))
            k = int(p.exit.tau / dt)
            gaps.append(np.max(np.abs(f_cubic(px.states[:k]) - p.states[:k])))
        medians.append(np.median(gaps))
    assert 1.5 <= medians[0] / medians[1] <= 2.6


def test_exit_concentration(linear):
    tau, side = exit_summary(linear, 0.5, SimConfig(epsilon=0.05), 10_000, 3)
    assert abs(tau.mean() - math.log(2)) <= 0.05
    assert np.mean(side == 1) >= 1 - 1e-3


def test_exit_spread_scales_with_eps(linear):
    eps = np.array([0.2, 0.1, 0.05])
    sds = np.array([exit_summary(linear, 0.5, SimConfig(epsilon=e), 4000, 4)[0].std() for e in eps])
    assert sds[0] > sds[1] > sds[2]
    slope = np.polyfit(np.log(eps), np.log(sds), 1)[0]
    assert 0.8 <= slope <= 1.2


def test_malliavin_linear_is_exact(linear):
    nb = choose_neighborhood(linear)
    cfg = SimConfig(epsilon=0.1)
    coeffs = linear_coefficients(linear, nb.R)
    path, _ = simulate_linearized(linear, nb, 0.0, cfg, Stream(1), horizon=3.0, stop_at_exit=False)
    t = np.linspace(0, 3.0, 31)
    tr = malliavin_derivative(path, t, 3.0, linear, cfg, coeffs)
    np.testing.assert_allclose(tr.value, np.exp(-tr.t_grid), rtol=0, atol=1e-12)


def test_malliavin_endpoint_and_positivity(varsigma):
    nb = choose_neighborhood(varsigma)
    cfg = SimConfig(epsilon=0.2)
    coeffs = linear_coefficients(varsigma, nb.R)
    T = 2.0
    path, _ = simulate_linearized(varsigma, nb, 0.0, cfg, Stream(5), horizon=T, stop_at_exit=False)
    tr = malliavin_derivative(path, np.linspace(0, T, 21), T, varsigma, cfg, coeffs)
    assert np.all(tr.value > 0)
    k = cfg.steps(T)
    assert tr.value[-1] == pytest.approx(math.exp(-T) * coeffs.sigma_tilde(path.states[k]), rel=1e-14)
    with pytest.raises(ValueError):
        malliavin_derivative(path, [T + 0.5], T, varsigma, cfg, coeffs)


def test_malliavin_gap_shrinks_with_eps(varsigma):
    from exitlab.acceptance import malliavin_gap

    coarse = malliavin_gap(varsigma, 0.2, 200, 1)[0].mean()
    fine = malliavin_gap(varsigma, 0.1, 200, 1)[0].mean()
    assert fine < coarse


def test_linear_coefficients(linear, cubic):
    c = linear_coefficients(linear, 0.5)
    assert np.all(c.h == 0) and np.all(c.sigma_t == 1)
    nb = choose_neighborhood(cubic)
    c = linear_coefficients(cubic, nb.R)
    y = np.linspace(-nb.R, nb.R, 7)
    # sigma~ = f'(g(y)) = (1 - y^2)^(3/2), h = f''(g(y)) = -3 y (1 - y^2)^2
    np.testing.assert_allclose(c.sigma_tilde(y), (1 - y**2) ** 1.5, atol=1e-6)
    np.testing.assert_allclose(c.h_fun(y), -3 * y * (1 - y**2) ** 2, atol=1e-3)
