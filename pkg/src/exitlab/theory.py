"""Closed-form reference quantities for the exit problem."""
from dataclasses import dataclass
import math

import numpy as np
from scipy import integrate


@dataclass(frozen=True)
class TheoremConstants:
    """Ingredients of the tail constant and the exit split.

    ``C_minus`` and ``C_plus`` are ``log|f(q_minus)| / lambda`` and
    ``log|f(q_plus)| / lambda``.
    """

    lambda_: float
    sigma0: float
    f_qminus: float
    f_qplus: float

    @property
    def C_minus(self):
        return math.log(abs(self.f_qminus)) / self.lambda_

    @property
    def C_plus(self):
        return math.log(abs(self.f_qplus)) / self.lambda_

    @classmethod
    def from_model(cls, model, cfg=None):
        from .flow import DEFAULT_FLOW, build_conjugation_table

        table = build_conjugation_table(model, cfg=cfg or DEFAULT_FLOW)
        return cls(model.lambda_, model.sigma0, table.f_qminus, table.f_qplus)

    def to_dict(self):
        p_minus, p_plus = exit_split(self)
        return {"lambda": self.lambda_, "sigma0": self.sigma0, "f_qminus": self.f_qminus,
                "f_qplus": self.f_qplus, "C_minus": self.C_minus, "C_plus": self.C_plus,
                "p_minus": p_minus, "p_plus": p_plus}


def gaussian_factor(lambda_, sigma0, x):
    """``sqrt(lambda/pi) exp(-lambda (x/sigma0)^2) / sigma0``: the limit density of M at x."""
    return math.sqrt(lambda_ / math.pi) * math.exp(-lambda_ * (x / sigma0) ** 2) / sigma0


def lambda_constant(constants, x):
    """Tail constant ``Lambda(x)`` with ``P(tau > (alpha/lambda) log(1/eps)) ~ Lambda eps^(alpha-1)``."""
    spread = abs(constants.f_qplus) + abs(constants.f_qminus)
    return gaussian_factor(constants.lambda_, constants.sigma0, x) * spread


def exit_split(constants):
    """Conditional exit probabilities ``(p_minus, p_plus)`` given a long survival."""
    a = abs(constants.f_qminus)
    b = abs(constants.f_qplus)
    return a / (a + b), b / (a + b)


def deterministic_T(eps, R, theta, lambda_, c=1.0):
    """``T_eps = (log(R/eps) - log a(eps)) / lambda`` with ``a(eps) = c eps^theta``."""
    a = c * eps ** theta
    return (math.log(R / eps) - math.log(a)) / lambda_


@dataclass(frozen=True)
class RecursionSchedule:
    theta: float
    N: int
    alpha_eps: float
    T_k: tuple
    H_variances: tuple

    def to_dict(self):
        return {"theta": self.theta, "N": self.N, "alpha_eps": self.alpha_eps,
                "T_k": list(self.T_k), "H_variances": list(self.H_variances)}


def h_variance(k, N, eps, alpha, lambda_, sigma0):
    if k >= N:
        return 0.0
    return (sigma0**2 / (2 * lambda_) * (1 - eps ** (2 * (N - k) * alpha))
            / (1 - eps ** (2 * alpha)))


def recursion_schedule(eps, theta, lambda_, sigma0, R=1.0):
    """Split ``T_eps`` into ``N = floor(theta) + 1`` blocks of length ``T' = T_eps / N``.

    ``alpha_eps = lambda T' / log(1/eps)``, which is ``(1 + theta) / N`` for
    ``R = 1``.  ``H_variances[k]`` is the variance of the Gaussian sum over
    the blocks after block ``k``.
    """
    N = int(math.floor(theta)) + 1 if theta >= 1 else 1
    T = deterministic_T(eps, R, theta, lambda_)
    T_prime = T / N
    alpha = lambda_ * T_prime / math.log(1 / eps)
    T_k = tuple(k * T_prime for k in range(N + 1))
    H = tuple(h_variance(k, N, eps, alpha, lambda_, sigma0) for k in range(N + 1))
    return RecursionSchedule(float(theta), N, alpha, T_k, H)


def scale_function_split(model, eps, x0, rtol=1e-10):
    """Exact ``P(exit at q_plus)`` from ``x0`` via the scale function.

    ``s'(y) = exp(-(2/eps^2) int_0^y b/sigma^2)``; both integrals by adaptive
    quadrature.  ``s'`` peaks at 0, so it never overflows.
    """
    x0 = float(x0)
    qm, qp = model.q_minus, model.q_plus
    if not qm <= x0 <= qp:
        raise ValueError(f"x0 = {x0} outside the interval")

    def ratio(u):
        return float(model.b(u)) / float(model.sigma(u)) ** 2

    def potential(y):
        val, _ = integrate.quad(ratio, 0.0, y, epsabs=0.0, epsrel=rtol, limit=200)
        return val

    k = 2.0 / eps**2

    def s_prime(y):
        return math.exp(-k * potential(y))

    width = eps / math.sqrt(model.lambda_)

    def integral(a, b):
        if a >= b:
            return 0.0
        pts = [p for p in (0.0, -width, width) if a < p < b]
        val, err = integrate.quad(s_prime, a, b, points=pts or None, epsabs=0.0,
                                  epsrel=rtol, limit=500)
        if not np.isfinite(val):
            raise ArithmeticError("scale-function quadrature did not converge")
        return val

    left = integral(qm, x0)
    total = left + integral(x0, qp)
    return left / total


@dataclass(frozen=True)
class GaussianReference:
    """Limit law of ``M``: Normal(x, sigma0^2 / (2 lambda))."""

    mean: float
    variance: float

    def __post_init__(self):
        if not self.variance > 0:
            raise ValueError("variance must be positive")

    @classmethod
    def for_model(cls, model, x):
        return cls(float(x), model.sigma0**2 / (2 * model.lambda_))

    @property
    def sd(self):
        return math.sqrt(self.variance)

    def pdf(self, z):
        z = np.asarray(z, dtype=float)
        return np.exp(-0.5 * (z - self.mean) ** 2 / self.variance) / math.sqrt(2 * math.pi * self.variance)
