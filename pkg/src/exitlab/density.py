"""Density of ``M(T')`` and the small-ball law near zero."""
from dataclasses import dataclass
import math
import warnings

import numpy as np
from scipy import stats

from .model import choose_neighborhood
from .sde import run_linearized
from .theory import GaussianReference, deterministic_T, gaussian_factor

DEFAULT_POLICY = 1.5
KAPPA = 0.5
WINDOW_C = 1.0
GRID_POINTS = 512
GRID_SDS = 6.0
MIN_HITS = 25


class PolicyError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class DensityEstimate:
    grid: np.ndarray
    values: np.ndarray
    bandwidth: float
    n: int
    x_start: float = 0.0

    def integral(self):
        return float(np.trapezoid(self.values, self.grid))


def check_policy(policy, epsilon, kappa=KAPPA, c=WINDOW_C):
    """``lambda T' / log(1/eps)`` must lie in ``[1 - c/log(1/eps), 2 - kappa]``."""
    lo = 1 - c / math.log(1 / epsilon)
    hi = 2 - kappa
    if not lo <= policy <= hi:
        raise PolicyError(f"T' policy {policy} outside the admissible window [{lo:.4g}, {hi:.4g}]")


def sample_M_at(model, epsilon, x, T_prime_policy=DEFAULT_POLICY, n=100_000, cfg=None,
                seed=0, R=None):
    """``n`` draws of ``M(T')`` with ``lambda T' = policy * log(1/eps)``, starting from ``Y(0) = eps x``.

    Paths continue past the neighborhood exit with frozen coefficients.
    """
    from .sde import SimConfig

    check_policy(T_prime_policy, epsilon)
    cfg = cfg or SimConfig(epsilon=epsilon)
    if cfg.epsilon != epsilon:
        raise ValueError("cfg.epsilon disagrees with epsilon")
    R = R if R is not None else choose_neighborhood(model).R
    T_prime = T_prime_policy * math.log(1 / epsilon) / model.lambda_
    batch = run_linearized(model, R, x, cfg, seed, n, obs_times=[T_prime], horizon=T_prime,
                           stop_at_exit=False)
    return batch.m_obs[:, 0]


def kde(sample, bandwidth=None, grid_points=GRID_POINTS):
    """Gaussian kernel density on ``mean +- 6 sd``; default bandwidth ``1.06 sd n^(-1/5)``."""
    sample = np.asarray(sample, dtype=float)
    n = sample.size
    if n < 2:
        raise ValueError("need at least two points")
    sd = float(np.std(sample, ddof=1))
    if not sd > 0:
        raise ValueError("degenerate sample: zero variance")
    if n < 1000:
        warnings.warn(f"kde on only {n} points", UserWarning)
    h = 1.06 * sd * n ** -0.2 if bandwidth is None else float(bandwidth)
    mean = float(sample.mean())
    grid = np.linspace(mean - GRID_SDS * sd, mean + GRID_SDS * sd, grid_points)
    values = stats.gaussian_kde(sample, bw_method=h / sd)(grid)
    return DensityEstimate(grid=grid, values=values, bandwidth=h, n=n)


def weighted_sup_distance(est, ref):
    """``max_z |p_est(z) - p_ref(z)| exp(|x - z|)`` over the estimate's grid."""
    gap = np.abs(est.values - ref.pdf(est.grid)) * np.exp(np.abs(est.grid - ref.mean))
    return float(gap.max())


def density_report(model, epsilon, x, n, cfg=None, seed=0, policy=DEFAULT_POLICY, R=None):
    """KDE of ``M(T')``, its reference, and the weighted distance between them."""
    sample = sample_M_at(model, epsilon, x, policy, n, cfg, seed, R)
    est = kde(sample)
    est = DensityEstimate(est.grid, est.values, est.bandwidth, est.n, float(x))
    ref = GaussianReference.for_model(model, x)
    return est, ref, weighted_sup_distance(est, ref)


@dataclass(frozen=True)
class SmallBall:
    empirical: float
    theoretical: float
    hits: int
    n: int
    a: float
    T: float
    sign: int

    def __iter__(self):
        return iter((self.empirical, self.theoretical))

    @property
    def ratio(self):
        return self.empirical / self.theoretical

    @property
    def standard_error(self):
        p = self.empirical
        return math.sqrt(p * (1 - p) / self.n)

    def to_dict(self):
        return {"empirical": self.empirical, "theoretical": self.theoretical, "hits": self.hits,
                "n": self.n, "a": self.a, "T_eps": self.T, "sign": self.sign,
                "ratio": self.ratio if self.theoretical > 0 else None}


def small_ball_check(model, epsilon, x, theta, n, cfg=None, seed=0, sign=1, c=1.0, R=None):
    """Empirical ``P(0 < sign * M(T_eps) <= a)`` with ``a = c eps^theta`` against its Gaussian value."""
    from .sde import SimConfig

    if not theta > 0:
        raise ValueError("theta must be positive")
    if sign not in (1, -1):
        raise ValueError("sign must be +1 or -1")
    cfg = cfg or SimConfig(epsilon=epsilon)
    R = R if R is not None else choose_neighborhood(model).R
    a = c * epsilon**theta
    T = deterministic_T(epsilon, R, theta, model.lambda_, c)
    batch = run_linearized(model, R, x, cfg, seed, n, horizon=T, stop_at_exit=False)
    m = sign * batch.m_end
    hits = int(np.sum((m > 0) & (m <= a)))
    if hits < MIN_HITS:
        warnings.warn(f"only {hits} small-ball hits; increase n", UserWarning)
    theo = gaussian_factor(model.lambda_, model.sigma0, x) * a
    return SmallBall(hits / n, theo, hits, n, a, T, sign)
