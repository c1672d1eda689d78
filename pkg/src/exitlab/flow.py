"""Deterministic flow of ``x' = b(x)`` and the linearizing conjugation ``f``.

``f(x) = lim_{t->inf} exp(lambda t) S^{-t} x`` turns the flow ``S^t`` into
multiplication by ``exp(lambda t)``; ``g`` is its inverse.  All integration
uses a fixed-step classical Runge-Kutta scheme.
"""
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from numba import njit

from .expr import STACK_SIZE, eval_program


class FlowError(RuntimeError):
    pass


@dataclass(frozen=True)
class FlowSolverConfig:
    """``dt``: base RK4 step; ``tol``: tolerance for limits and root finds."""

    dt: float = 1e-3
    tol: float = 1e-10
    accelerate: bool = True

    def __post_init__(self):
        if not 0 < self.dt <= 1e-3:
            raise ValueError(f"dt must be in (0, 1e-3], got {self.dt}")
        if not self.tol >= 100 * np.finfo(float).eps:
            raise ValueError(f"tol must be >= {100 * np.finfo(float).eps:.3g}, got {self.tol}")


DEFAULT_FLOW = FlowSolverConfig()


@dataclass(frozen=True, eq=False)
class ConjugationTable:
    """Values of ``f`` on an increasing grid spanning the interval."""

    grid: np.ndarray
    f_values: np.ndarray
    f_qminus: float
    f_qplus: float
    identity: bool = False

    def to_csv(self, path):
        np.savetxt(path, np.column_stack([self.grid, self.f_values]), delimiter=",",
                   header="x,f_of_x", comments="", fmt="%.17g")


@njit(cache=True)
def _rk4_step(prog, x, h, stack):
    k1 = eval_program(prog, x, stack)
    k2 = eval_program(prog, x + 0.5 * h * k1, stack)
    k3 = eval_program(prog, x + 0.5 * h * k2, stack)
    k4 = eval_program(prog, x + h * k3, stack)
    return x + h * (k1 + 2.0 * k2 + 2.0 * k3 + k4) / 6.0


@njit(cache=True)
def _integrate(prog, xs, t, dt, lo, hi, out):
    """S^t x for each x; returns False if a trajectory leaves [lo, hi]."""
    stack = np.empty(STACK_SIZE)
    n = int(np.ceil(abs(t) / dt - 1e-9))
    if n == 0:
        out[:] = xs
        return True
    h = t / n
    for i in range(xs.shape[0]):
        x = xs[i]
        for _ in range(n):
            x = _rk4_step(prog, x, h, stack)
            if not (lo <= x <= hi):
                return False
        out[i] = x
    return True


@njit(cache=True)
def _exit_time(prog, x, dt, qm, qp, tol, t_max):
    stack = np.empty(STACK_SIZE)
    t = 0.0
    while t < t_max:
        y = _rk4_step(prog, x, dt, stack)
        if y <= qm or y >= qp:
            target = qp if y >= qp else qm
            a, b = 0.0, dt
            for _ in range(200):
                m = 0.5 * (a + b)
                ym = _rk4_step(prog, x, m, stack)
                if (ym - target) * (target - x) >= 0.0:
                    b = m
                else:
                    a = m
                if b - a < tol:
                    break
            return t + 0.5 * (a + b), (1 if target == qp else -1)
        x = y
        t += dt
    return np.nan, 0


CHECKPOINT_SPACING = 2.0  # in units of 1/lambda


@njit(cache=True)
def _backward_limit(prog, xs, lam, dt, tol, t_max, accelerate, out, t_used):
    """exp(lam t) S^{-t} x at checkpoints t = 2/lam, 4/lam, ... until two successive
    changes are below ``tol``.

    The remainder is a power series in exp(-lam t); with ``accelerate`` its
    leading term is removed by one Richardson step between checkpoints.
    """
    stack = np.empty(STACK_SIZE)
    step = CHECKPOINT_SPACING / lam
    r = np.exp(-lam * step)
    for i in range(xs.shape[0]):
        x = xs[i]
        if x == 0.0:
            out[i] = 0.0
            t_used[i] = 0.0
            continue
        t = 0.0
        y = x
        n = int(np.ceil(step / dt - 1e-9))
        h = step / n
        prev_raw = np.nan
        prev_est = np.nan
        prev_change = np.inf
        out[i] = np.nan
        t_used[i] = np.nan
        while t + step <= t_max * (1 + 1e-12):
            for _ in range(n):
                y = _rk4_step(prog, y, -h, stack)
            t += step
            raw = np.exp(lam * t) * y
            if accelerate and not np.isnan(prev_raw):
                est = (raw - r * prev_raw) / (1.0 - r)
            else:
                est = raw
            if not np.isnan(prev_est):
                change = abs(est - prev_est)
                if change < tol and prev_change < tol:
                    out[i] = est
                    t_used[i] = t
                    break
                prev_change = change
            prev_raw = raw
            prev_est = est
    return out


@njit(cache=True)
def _backward_fixed(prog, xs, lam, dt, t_final, accelerate, out):
    """Same estimate at a common final time, so stencil errors stay smooth in x."""
    stack = np.empty(STACK_SIZE)
    step = CHECKPOINT_SPACING / lam
    r = np.exp(-lam * step)
    n = int(np.ceil(step / dt - 1e-9))
    h = step / n
    m = int(round(t_final / step))
    for i in range(xs.shape[0]):
        y = xs[i]
        raw_prev = np.nan
        for k in range(m):
            for _ in range(n):
                y = _rk4_step(prog, y, -h, stack)
            if k == m - 2:
                raw_prev = np.exp(lam * (k + 1) * step) * y
        raw = np.exp(lam * m * step) * y
        if accelerate and m >= 2:
            out[i] = (raw - r * raw_prev) / (1.0 - r)
        else:
            out[i] = raw
    return out


def _bounds(model, factor=10.0):
    width = model.q_plus - model.q_minus
    return model.q_minus - factor * width, model.q_plus + factor * width


def integrate_flow(model, x0, t, cfg=DEFAULT_FLOW):
    """RK4 approximation of ``S^t x0``; negative ``t`` integrates backward.

    Raises :class:`FlowError` when the trajectory escapes a bounded
    enlargement of the interval.
    """
    xs = np.atleast_1d(np.asarray(x0, dtype=float))
    out = np.empty_like(xs)
    lo, hi = _bounds(model)
    if not _integrate(model.b.program, xs, float(t), cfg.dt, lo, hi, out):
        raise FlowError(f"trajectory from x0={x0} escapes [{lo:.3g}, {hi:.3g}] within t={t}")
    return out if np.ndim(x0) else float(out[0])


def deterministic_exit_time(model, x, cfg=DEFAULT_FLOW):
    """Time ``T(x)`` at which ``S^t x`` reaches the boundary, and the side (+1/-1)."""
    x = float(x)
    if x == 0.0:
        raise FlowError("x = 0 is the equilibrium and never exits")
    if not model.q_minus < x < model.q_plus:
        if x in (model.q_minus, model.q_plus):
            return 0.0, (1 if x == model.q_plus else -1)
        raise FlowError(f"x = {x} outside the interval")
    # near 0 the escape takes about log(1/|x|)/lambda; the cap is far above that
    t_max = (50.0 + 50.0 * np.log(1.0 + 1.0 / abs(x))) / model.lambda_
    T, side = _exit_time(model.b.program, x, cfg.dt, model.q_minus, model.q_plus, cfg.tol, t_max)
    if np.isnan(T):
        raise FlowError(f"no exit from x = {x} before t = {t_max:.3g}")
    return float(T), int(side)


def _t_max(model):
    return 50.0 / model.lambda_


def _check_domain(model, xs):
    if np.any(xs < model.q_minus - 1e-12) or np.any(xs > model.q_plus + 1e-12):
        raise FlowError("conjugation requested outside the interval")


def conjugation_values(model, xs, cfg=DEFAULT_FLOW):
    """Vectorized :func:`conjugation`."""
    xs = np.atleast_1d(np.asarray(xs, dtype=float))
    _check_domain(model, xs)
    if model.is_linear:
        return xs.copy()
    out = np.empty_like(xs)
    t_used = np.empty_like(xs)
    _backward_limit(model.b.program, xs, model.lambda_, cfg.dt, cfg.tol, _t_max(model),
                    cfg.accelerate, out, t_used)
    if np.any(np.isnan(out)):
        bad = xs[np.isnan(out)][0]
        raise FlowError(f"conjugation did not converge at x = {bad} within t_max = {_t_max(model):.3g}")
    return out


def conjugation(model, x, cfg=DEFAULT_FLOW):
    """The linearizing change of coordinates ``f(x)``; ``f(0) = 0`` exactly."""
    return float(conjugation_values(model, [x], cfg)[0])


def conjugation_derivatives(model, xs, h, cfg=DEFAULT_FLOW):
    """``f, f', f''`` at ``xs`` by central differences with step ``h``.

    All stencil points share one backward-integration time, which keeps the
    limit error a smooth function of ``x`` that the differences cancel.
    """
    xs = np.atleast_1d(np.asarray(xs, dtype=float))
    if model.is_linear:
        return xs.copy(), np.ones_like(xs), np.zeros_like(xs)
    # the endpoints converge slowest (remainder grows with |f|)
    probe = np.array([model.q_minus, model.q_plus])
    out = np.empty_like(probe)
    t_used = np.empty_like(probe)
    _backward_limit(model.b.program, probe, model.lambda_, cfg.dt, cfg.tol, _t_max(model),
                    cfg.accelerate, out, t_used)
    if np.any(np.isnan(t_used)):
        raise FlowError("conjugation did not converge while building derivatives")
    t_final = float(np.max(t_used))
    stencil = np.concatenate([xs - h, xs, xs + h])
    vals = np.empty_like(stencil)
    _backward_fixed(model.b.program, stencil, model.lambda_, cfg.dt, t_final, cfg.accelerate, vals)
    fm, f0, fp = np.split(vals, 3)
    return f0, (fp - fm) / (2 * h), (fp - 2 * f0 + fm) / h**2


def conjugation_integral_form(model, x, cfg=DEFAULT_FLOW):
    """``x - int_0^inf exp(lambda s) eta(S^{-s}x) |S^{-s}x|^2 ds`` by quadrature.

    Independent route to ``f`` used to cross-check the limit definition.
    """
    from scipy.integrate import solve_ivp, quad

    if x == 0:
        return 0.0
    lam = model.lambda_
    t_end = 40.0 / lam
    sol = solve_ivp(lambda s, y: -model.b(y), (0.0, t_end), [x], method="DOP853",
                    rtol=1e-13, atol=1e-16, dense_output=True)

    def integrand(s):
        y = float(sol.sol(s)[0])
        return np.exp(lam * s) * (float(model.b(y)) - lam * y)

    val, _ = quad(integrand, 0.0, t_end, limit=400, epsabs=1e-13, epsrel=1e-12)
    return x - val


@lru_cache(maxsize=64)
def build_conjugation_table(model, n_grid=256, cfg=DEFAULT_FLOW):
    """Tabulate ``f`` on ``n_grid`` points spanning ``[q_minus, q_plus]`` (0 included)."""
    if n_grid < 64:
        raise ValueError("n_grid must be >= 64")
    grid = np.linspace(model.q_minus, model.q_plus, n_grid)
    grid = np.union1d(grid, [0.0])
    f_values = conjugation_values(model, grid, cfg)
    if np.any(np.diff(f_values) <= 0):
        raise FlowError("conjugation table is not strictly increasing")
    f_values.setflags(write=False)
    grid.setflags(write=False)
    return ConjugationTable(grid=grid, f_values=f_values, f_qminus=float(f_values[0]),
                            f_qplus=float(f_values[-1]), identity=model.is_linear)


def inverse_conjugation(model, y, cfg=DEFAULT_FLOW, table=None):
    """``g(y)``: bracket in the table, then bisect on ``f`` itself."""
    if table is None:
        table = build_conjugation_table(model, cfg=cfg)
    y = float(y)
    if not table.f_qminus - 1e-12 <= y <= table.f_qplus + 1e-12:
        raise FlowError(f"y = {y} outside the image [{table.f_qminus:.6g}, {table.f_qplus:.6g}]")
    if y == 0.0:
        return 0.0
    if table.identity:
        return y
    k = int(np.searchsorted(table.f_values, y))
    if k < table.grid.size and table.f_values[k] == y:
        return float(table.grid[k])
    k = min(max(k, 1), table.grid.size - 1)
    a, b = float(table.grid[k - 1]), float(table.grid[k])
    # at least 20 halvings, continued until the bracket is below tol
    it = 0
    while it < 20 or (b - a > cfg.tol and it < 80):
        m = 0.5 * (a + b)
        if conjugation(model, m, cfg) < y:
            a = m
        else:
            b = m
        it += 1
    return 0.5 * (a + b)
