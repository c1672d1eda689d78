"""Path simulation in original and linearized coordinates.

Original coordinates use Euler-Maruyama (or Milstein) on
``dX = b(X) dt + eps sigma(X) dW``.  Linearized coordinates ``Y = f(X)`` are
advanced through the variation-of-constants form

    Y(t) = eps exp(lambda t) M(t),   M = x + U + V,
    U(t) = int_0^t exp(-lambda s) sigma~(Y) dW,
    V(t) = (eps/2) int_0^t exp(-lambda s) h(Y) ds,

so ``Y`` and ``M`` are tied exactly on the grid.  The noise for step ``k`` of
path ``slot`` is the counter-based normal keyed by ``(seed, level, slot, k)``;
both coordinate systems consume the same increments.
"""
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Optional

import numpy as np
from numba import njit, prange

from .expr import STACK_SIZE, eval_program
from .flow import DEFAULT_FLOW, conjugation_derivatives, conjugation_values
from .rng import Stream, normal_pair, seed_key, TAG_INCREMENT

CENSORED = 0
TABLE_POINTS = 2049
SIGMA_STEP = 1e-6


class SimulationError(RuntimeError):
    pass


@dataclass(frozen=True)
class SimConfig:
    """``dt``: time step; ``epsilon``: noise magnitude; ``max_time``: censoring time.

    ``epsilon = 0`` is accepted for deterministic checks.  When ``max_time`` is
    left as None it resolves to ``(2/lambda) log(1/eps) + 20/lambda``.
    """

    epsilon: float
    dt: float = 1e-3
    scheme: str = "euler"
    max_time: Optional[float] = None

    def __post_init__(self):
        if not 0 < self.dt <= 0.01:
            raise ValueError(f"dt must be in (0, 0.01], got {self.dt}")
        if not 0 <= self.epsilon < 1:
            raise ValueError(f"epsilon must be in [0, 1), got {self.epsilon}")
        if self.scheme not in ("euler", "milstein"):
            raise ValueError(f"unknown scheme {self.scheme!r}")
        if self.max_time is not None and not self.max_time > 0:
            raise ValueError("max_time must be positive")

    def horizon(self, lambda_):
        if self.max_time is not None:
            return self.max_time
        eps = self.epsilon if self.epsilon > 0 else 1e-3
        return (2.0 / lambda_) * np.log(1.0 / eps) + 20.0 / lambda_

    def steps(self, t):
        """Number of grid steps covering time ``t`` (grid times are ``k * dt``)."""
        return int(round(t / self.dt))


@dataclass(frozen=True)
class ExitRecord:
    tau: float
    side: int
    crossed_neighborhood: Optional[tuple] = None


@dataclass(frozen=True, eq=False)
class Path:
    times: np.ndarray
    states: np.ndarray
    dw: np.ndarray
    exit: Optional[ExitRecord]

    @property
    def censored(self):
        return self.exit is None


@dataclass(frozen=True, eq=False)
class DuhamelTrace:
    times: np.ndarray
    M: np.ndarray
    U: np.ndarray
    V: np.ndarray
    x0_lin: float
    m_exit: float = np.nan  # M at the interpolated exit from [-R, R]


@dataclass(frozen=True, eq=False)
class MalliavinTrace:
    t_grid: np.ndarray
    value: np.ndarray
    Z_terms: tuple  # (stochastic integral, drift integral) from each t to T'


@dataclass(frozen=True, eq=False)
class LinearCoefficients:
    """``sigma~``, ``h`` and their derivatives on a uniform grid over ``[-R, R]``.

    Lookups clamp to the end values, which freezes the coefficients outside
    the neighborhood.
    """

    R: float
    y0: float
    dy: float
    sigma_t: np.ndarray
    h: np.ndarray
    dsigma_t: np.ndarray
    dh: np.ndarray

    @property
    def tables(self):
        return (self.sigma_t, self.h, self.dsigma_t, self.dh)

    def _lookup(self, table, y):
        grid = self.y0 + self.dy * np.arange(table.size)
        return np.interp(y, grid, table)

    def sigma_tilde(self, y):
        return self._lookup(self.sigma_t, y)

    def h_fun(self, y):
        return self._lookup(self.h, y)

    def sigma_tilde_prime(self, y):
        return self._lookup(self.dsigma_t, y)

    def h_prime(self, y):
        return self._lookup(self.dh, y)

    @property
    def sup_sigma(self):
        return float(np.max(np.abs(self.sigma_t)))

    @property
    def sup_h(self):
        return float(np.max(np.abs(self.h)))


@lru_cache(maxsize=32)
def linear_coefficients(model, R, n=TABLE_POINTS, cfg=DEFAULT_FLOW):
    """Tabulate ``sigma~(y) = f'(g(y)) sigma(g(y))`` and ``h(y) = f''(g(y)) sigma(g(y))^2``.

    ``f'`` and ``f''`` come from central differences on the conjugation with
    step ``1e-4 R``.  The table is built on an ``x`` grid over the
    neighborhood and resampled to uniform ``y`` with a cubic spline.
    """
    from scipy.interpolate import CubicSpline
    from .model import choose_neighborhood

    R = float(R)
    ys = np.linspace(-R, R, n)
    step = 1e-4 * R
    if model.is_linear:
        sig = model.sigma(ys)
        hv = np.zeros(n)
        dsig = (model.sigma(ys + step) - model.sigma(ys - step)) / (2 * step)
        dh = np.zeros(n)
    else:
        nb = choose_neighborhood(model, R, cfg=cfg)
        # pad slightly so the spline covers [-R, R] without extrapolation
        pad = 0.02 * (nb.v_plus - nb.v_minus)
        lo = max(nb.v_minus - pad, model.q_minus + step)
        hi = min(nb.v_plus + pad, model.q_plus - step)
        xs = np.linspace(lo, hi, 513)
        f, f1, f2 = conjugation_derivatives(model, xs, step, cfg)
        sx = model.sigma(xs)
        sig_s = CubicSpline(f, f1 * sx)
        h_s = CubicSpline(f, f2 * sx**2)
        sig = sig_s(ys)
        hv = h_s(ys)
        dsig = (sig_s(ys + step) - sig_s(ys - step)) / (2 * step)
        dh = (h_s(ys + step) - h_s(ys - step)) / (2 * step)
    if np.any(sig <= 0):
        raise SimulationError(f"sigma-tilde vanishes on [-{R}, {R}]")
    arrays = [np.ascontiguousarray(a, dtype=float) for a in (sig, hv, dsig, dh)]
    for a in arrays:
        a.setflags(write=False)
    return LinearCoefficients(R, -R, 2 * R / (n - 1), *arrays)


@njit(cache=True, inline="always")
def _lookup(table, y0, inv_dy, y):
    u = (y - y0) * inv_dy
    n = table.shape[0]
    if u <= 0.0:
        return table[0]
    if u >= n - 1:
        return table[n - 1]
    k = int(u)
    w = u - k
    return table[k] + w * (table[k + 1] - table[k])


@njit(cache=True, inline="always")
def _noise(k0, k1, level, slot, step, cache):
    # steps 2j and 2j+1 share one Philox block; cache holds the odd half
    if step & 1:
        if cache[1] == step:
            return cache[0]
        z0, z1 = normal_pair(k0, k1, level, slot, step >> 1, TAG_INCREMENT)
        return z1
    z0, z1 = normal_pair(k0, k1, level, slot, step >> 1, TAG_INCREMENT)
    cache[0] = z1
    cache[1] = step + 1
    return z0


@njit(cache=True, inline="always")
def _x_step(prog_b, prog_s, x, dw, dt, eps, milstein, stack):
    s = eval_program(prog_s, x, stack)
    xn = x + eval_program(prog_b, x, stack) * dt + eps * s * dw
    if milstein:
        ds = (eval_program(prog_s, x + SIGMA_STEP, stack)
              - eval_program(prog_s, x - SIGMA_STEP, stack)) / (2 * SIGMA_STEP)
        xn += 0.5 * eps * eps * s * ds * (dw * dw - dt)
    return xn


@njit(cache=True, parallel=True)
def _x_batch(prog_b, prog_s, x0s, slots, level, k0, k1, start_step, stop_step,
             dt, eps, qm, qp, milstein, out_x, out_tau, out_side, bad):
    """Advance each path from ``start_step`` until exit or ``stop_step``.

    ``out_side`` is +1/-1 for an exit (``out_tau`` interpolated inside the
    crossing step) and 0 for a path still inside at ``stop_step``.
    """
    sq = np.sqrt(dt)
    for i in prange(x0s.shape[0]):
        stack = np.empty(STACK_SIZE)
        cache = np.zeros(2)
        cache[1] = -1.0
        x = x0s[i]
        out_side[i] = 0
        out_tau[i] = np.nan
        if x >= qp or x <= qm:
            out_side[i] = 1 if x >= qp else -1
            out_tau[i] = start_step * dt
            out_x[i] = qp if x >= qp else qm
            continue
        slot = slots[i]
        for step in range(start_step, stop_step):
            dw = sq * _noise(k0, k1, level, slot, step, cache)
            xn = _x_step(prog_b, prog_s, x, dw, dt, eps, milstein, stack)
            if not np.isfinite(xn):
                bad[i] = True
                break
            if xn >= qp or xn <= qm:
                q = qp if xn >= qp else qm
                out_tau[i] = (step + (q - x) / (xn - x)) * dt
                out_side[i] = 1 if xn >= qp else -1
                x = q
                break
            x = xn
        out_x[i] = x


@njit(cache=True)
def _x_record(prog_b, prog_s, x0, slot, level, k0, k1, n_steps, dt, eps, qm, qp,
              milstein, vm, vp, xs, dws):
    """Single path with full trajectory; returns (n_filled, tau, side, tau_v, side_v)."""
    sq = np.sqrt(dt)
    stack = np.empty(STACK_SIZE)
    cache = np.zeros(2)
    cache[1] = -1.0
    x = x0
    xs[0] = x
    tau_v = np.nan
    side_v = 0
    if not (vm < x < vp):
        tau_v = 0.0
        side_v = 1 if x >= vp else -1
    if x >= qp or x <= qm:
        return 1, 0.0, (1 if x >= qp else -1), tau_v, side_v
    for step in range(n_steps):
        dw = sq * _noise(k0, k1, level, slot, step, cache)
        dws[step] = dw
        xn = _x_step(prog_b, prog_s, x, dw, dt, eps, milstein, stack)
        if not np.isfinite(xn):
            return -1, np.nan, 0, tau_v, side_v
        if side_v == 0 and (xn >= vp or xn <= vm):
            v = vp if xn >= vp else vm
            tau_v = (step + (v - x) / (xn - x)) * dt
            side_v = 1 if xn >= vp else -1
        if xn >= qp or xn <= qm:
            q = qp if xn >= qp else qm
            xs[step + 1] = q
            return step + 2, (step + (q - x) / (xn - x)) * dt, (1 if xn >= qp else -1), tau_v, side_v
        x = xn
        xs[step + 1] = x
    return n_steps + 1, np.nan, 0, tau_v, side_v


@njit(cache=True, inline="always")
def _y_advance(tables, y0, inv_dy, x_lin, U, V, y, w, w1, dw, dt, eps, has_h):
    sig_t, h_t, _, _ = tables
    s = _lookup(sig_t, y0, inv_dy, y)
    U = U + w * s * dw
    if not has_h:
        return U, V
    hh = _lookup(h_t, y0, inv_dy, y)
    # trapezoid in time with an Euler predictor for the right end point
    v_pred = V + 0.5 * eps * w * hh * dt
    y_pred = eps * (x_lin + U + v_pred) / w1
    h1 = _lookup(h_t, y0, inv_dy, y_pred)
    return U, V + 0.25 * eps * dt * (w * hh + w1 * h1)


@njit(cache=True, parallel=True)
def _y_batch(tables, y0, inv_dy, x_lin, slots, level, k0, k1, n_steps, dt, eps, lam, R,
             stop_at_exit, obs_steps, out_tau, out_side, out_m_exit, out_obs, out_sup_u,
             out_sup_v, out_m_end, bad):
    """Linearized paths from Y(0) = eps x_lin; M recorded at ``obs_steps``."""
    sq = np.sqrt(dt)
    # exp(-lambda t) advanced by products; drift correction skipped when h vanishes
    decay = np.exp(-lam * dt)
    has_h = np.any(tables[1] != 0.0)
    n_obs = obs_steps.shape[0]
    for i in prange(slots.shape[0]):
        cache = np.zeros(2)
        cache[1] = -1.0
        slot = slots[i]
        U = 0.0
        V = 0.0
        M = x_lin
        y = eps * x_lin
        sup_u = 0.0
        sup_v = 0.0
        out_tau[i] = np.nan
        out_side[i] = 0
        out_m_exit[i] = np.nan
        for j in range(n_obs):
            out_obs[i, j] = np.nan
        w1 = 1.0
        j = 0
        while j < n_obs and obs_steps[j] == 0:
            out_obs[i, j] = M
            j += 1
        exited = False
        if abs(y) >= R:
            exited = True
            out_tau[i] = 0.0
            out_side[i] = 1 if y > 0 else -1
            out_m_exit[i] = M
        for step in range(n_steps):
            if exited and stop_at_exit:
                break
            w = w1
            w1 = w * decay
            dw = sq * _noise(k0, k1, level, slot, step, cache)
            U, V = _y_advance(tables, y0, inv_dy, x_lin, U, V, y, w, w1, dw, dt, eps, has_h)
            M_new = x_lin + U + V
            y_new = eps * M_new / w1
            if not np.isfinite(y_new):
                bad[i] = True
                break
            if abs(U) > sup_u:
                sup_u = abs(U)
            if abs(V) > sup_v:
                sup_v = abs(V)
            if not exited and abs(y_new) >= R:
                target = R if y_new > 0 else -R
                theta = (target - y) / (y_new - y)
                out_m_exit[i] = M + theta * (M_new - M)
                # exit time from the identity R = eps e^(lam tau) |M| so it holds exactly
                out_tau[i] = np.log(R / (eps * abs(out_m_exit[i]))) / lam
                out_side[i] = 1 if y_new > 0 else -1
                exited = True
            M = M_new
            y = y_new
            while j < n_obs and obs_steps[j] == step + 1:
                out_obs[i, j] = M
                j += 1
        out_sup_u[i] = sup_u
        out_sup_v[i] = sup_v
        out_m_end[i] = M


@njit(cache=True)
def _y_record(tables, y0, inv_dy, x_lin, slot, level, k0, k1, n_steps, dt, eps, lam, R,
              stop_at_exit, ys, us, vs, ms, dws):
    """Single linearized path with full trace; returns (n_filled, tau_v, side_v, m_exit)."""
    sq = np.sqrt(dt)
    decay = np.exp(-lam * dt)
    has_h = np.any(tables[1] != 0.0)
    cache = np.zeros(2)
    cache[1] = -1.0
    U = 0.0
    V = 0.0
    M = x_lin
    y = eps * x_lin
    ys[0] = y
    us[0] = 0.0
    vs[0] = 0.0
    ms[0] = M
    tau = np.nan
    side = 0
    m_exit = np.nan
    w1 = 1.0
    if abs(y) >= R:
        tau = 0.0
        side = 1 if y > 0 else -1
        m_exit = M
        if stop_at_exit:
            return 1, tau, side, m_exit
    for step in range(n_steps):
        w = w1
        w1 = w * decay
        dw = sq * _noise(k0, k1, level, slot, step, cache)
        dws[step] = dw
        U, V = _y_advance(tables, y0, inv_dy, x_lin, U, V, y, w, w1, dw, dt, eps, has_h)
        M_new = x_lin + U + V
        y_new = eps * M_new / w1
        if not np.isfinite(y_new):
            return -1, tau, side, m_exit
        if side == 0 and abs(y_new) >= R:
            target = R if y_new > 0 else -R
            theta = (target - y) / (y_new - y)
            m_exit = M + theta * (M_new - M)
            tau = np.log(R / (eps * abs(m_exit))) / lam
            side = 1 if y_new > 0 else -1
        M = M_new
        y = y_new
        ys[step + 1] = y
        us[step + 1] = U
        vs[step + 1] = V
        ms[step + 1] = M
        if side != 0 and stop_at_exit:
            return step + 2, tau, side, m_exit
    return n_steps + 1, tau, side, m_exit


def _stream_args(stream):
    return stream.level, stream.slot, stream.key[0], stream.key[1]


def simulate_path(model, x0, cfg, stream, neighborhood=None):
    """One trajectory of the original SDE until exit from the interval or ``max_time``.

    A path still inside at ``max_time`` is returned censored (``exit is None``).
    """
    x0 = float(x0)
    if not model.q_minus <= x0 <= model.q_plus:
        raise ValueError(f"x0 = {x0} outside the interval")
    n_steps = cfg.steps(cfg.horizon(model.lambda_))
    xs = np.empty(n_steps + 1)
    dws = np.empty(n_steps)
    vm, vp = (-np.inf, np.inf) if neighborhood is None else (neighborhood.v_minus, neighborhood.v_plus)
    level, slot, k0, k1 = _stream_args(stream)
    n, tau, side, tau_v, side_v = _x_record(
        model.b.program, model.sigma.program, x0, slot, level, k0, k1, n_steps, cfg.dt,
        cfg.epsilon, model.q_minus, model.q_plus, cfg.scheme == "milstein", vm, vp, xs, dws)
    if n < 0:
        raise SimulationError("non-finite state; check the model and dt")
    crossed = None if neighborhood is None or side_v == 0 else (float(tau_v), int(side_v))
    record = None if side == 0 else ExitRecord(float(tau), int(side), crossed)
    return Path(times=cfg.dt * np.arange(n), states=xs[:n], dw=dws[:max(n - 1, 0)], exit=record)


def simulate_linearized(model, neighborhood, x_lin, cfg, stream, horizon=None,
                        stop_at_exit=True, coeffs=None):
    """One path of the linearized SDE from ``Y(0) = eps * x_lin`` with its Duhamel trace.

    The path stops at the exit from ``[-R, R]`` unless ``stop_at_exit`` is
    False, in which case it runs to ``horizon`` with frozen coefficients.
    """
    if cfg.epsilon <= 0:
        raise ValueError("linearized simulation needs epsilon > 0")
    R = neighborhood.R
    if abs(cfg.epsilon * x_lin) >= R:
        raise ValueError(f"|eps x_lin| = {abs(cfg.epsilon * x_lin):.3g} must be below R = {R}")
    coeffs = coeffs or linear_coefficients(model, R)
    horizon = cfg.horizon(model.lambda_) if horizon is None else horizon
    n_steps = cfg.steps(horizon)
    arrays = [np.empty(n_steps + 1) for _ in range(4)]
    dws = np.empty(n_steps)
    level, slot, k0, k1 = _stream_args(stream)
    n, tau, side, m_exit = _y_record(
        coeffs.tables, coeffs.y0, 1.0 / coeffs.dy, float(x_lin), slot, level, k0, k1, n_steps,
        cfg.dt, cfg.epsilon, model.lambda_, R, stop_at_exit, *arrays, dws)
    if n < 0:
        raise SimulationError("non-finite state in linearized simulation")
    ys, us, vs, ms = (a[:n] for a in arrays)
    times = cfg.dt * np.arange(n)
    record = None if side == 0 else ExitRecord(float(tau), int(side), (float(tau), int(side)))
    path = Path(times=times, states=ys, dw=dws[:n - 1], exit=record)
    return path, DuhamelTrace(times=times, M=ms, U=us, V=vs, x0_lin=float(x_lin), m_exit=float(m_exit))


@dataclass(frozen=True, eq=False)
class ExitBatch:
    """Outcome of a batch of original-coordinate paths."""

    tau: np.ndarray
    side: np.ndarray
    x_end: np.ndarray

    @property
    def censored(self):
        return self.side == CENSORED


def run_exits(model, x0, cfg, seed, slots, level=0, start_step=0, stop_step=None):
    """Advance paths (one per slot) from ``x0`` (scalar or per-slot array).

    Low-level entry point shared by the direct and splitting estimators.
    """
    slots = np.asarray(slots, dtype=np.int64)
    x0s = np.broadcast_to(np.asarray(x0, dtype=float), slots.shape).copy()
    if stop_step is None:
        stop_step = cfg.steps(cfg.horizon(model.lambda_))
    k0, k1 = seed_key(seed)
    out_x = np.empty_like(x0s)
    out_tau = np.empty_like(x0s)
    out_side = np.empty(slots.shape, dtype=np.int64)
    bad = np.zeros(slots.shape, dtype=np.bool_)
    _x_batch(model.b.program, model.sigma.program, x0s, slots, int(level), k0, k1,
             int(start_step), int(stop_step), cfg.dt, cfg.epsilon, model.q_minus, model.q_plus,
             cfg.scheme == "milstein", out_x, out_tau, out_side, bad)
    if bad.any():
        raise SimulationError(f"{int(bad.sum())} paths produced non-finite states")
    return ExitBatch(tau=out_tau, side=out_side, x_end=out_x)


def exit_summary(model, x0, cfg, n, seed):
    """Exit times and sides of ``n`` independent paths from ``x0``; censored paths have side 0."""
    if n < 1:
        raise ValueError("n must be >= 1")
    batch = run_exits(model, x0, cfg, seed, np.arange(n))
    return batch.tau, batch.side


def states_at(model, x0, t, cfg, n, seed):
    """``X(t)`` for ``n`` paths (paths that exit earlier are pinned to the boundary)."""
    batch = run_exits(model, x0, cfg, seed, np.arange(n), stop_step=cfg.steps(t))
    return batch.x_end, batch.side


@dataclass(frozen=True, eq=False)
class LinearizedBatch:
    tau_v: np.ndarray
    side_v: np.ndarray
    m_exit: np.ndarray
    m_obs: np.ndarray
    obs_times: np.ndarray
    sup_u: np.ndarray
    sup_v: np.ndarray
    m_end: np.ndarray


def run_linearized(model, R, x_lin, cfg, seed, n, obs_times=(), horizon=None,
                   stop_at_exit=True, level=0, coeffs=None):
    """Batch of linearized paths; ``M`` is recorded at each of ``obs_times``."""
    if cfg.epsilon <= 0:
        raise ValueError("linearized simulation needs epsilon > 0")
    coeffs = coeffs or linear_coefficients(model, float(R))
    obs_times = np.atleast_1d(np.asarray(obs_times, dtype=float))
    obs_steps = np.array([cfg.steps(t) for t in obs_times], dtype=np.int64)
    if horizon is None:
        horizon = max(obs_times.max(initial=0.0), 0.0) if not stop_at_exit else cfg.horizon(model.lambda_)
    n_steps = max(cfg.steps(horizon), int(obs_steps.max(initial=0)))
    order = np.argsort(obs_steps, kind="stable")
    slots = np.arange(n, dtype=np.int64)
    k0, k1 = seed_key(seed)
    out = dict(tau=np.empty(n), side=np.empty(n, dtype=np.int64), m_exit=np.empty(n),
               obs=np.empty((n, obs_steps.size)), sup_u=np.empty(n), sup_v=np.empty(n),
               m_end=np.empty(n))
    bad = np.zeros(n, dtype=np.bool_)
    _y_batch(coeffs.tables, coeffs.y0, 1.0 / coeffs.dy, float(x_lin), slots, int(level), k0, k1,
             n_steps, cfg.dt, cfg.epsilon, model.lambda_, float(R), bool(stop_at_exit),
             obs_steps[order], out["tau"], out["side"], out["m_exit"], out["obs"], out["sup_u"],
             out["sup_v"], out["m_end"], bad)
    if bad.any():
        raise SimulationError(f"{int(bad.sum())} linearized paths produced non-finite states")
    m_obs = np.empty_like(out["obs"])
    m_obs[:, order] = out["obs"]
    return LinearizedBatch(out["tau"], out["side"], out["m_exit"], m_obs, obs_times,
                           out["sup_u"], out["sup_v"], out["m_end"])


def malliavin_derivative(path, t_grid, T_prime, model, cfg, coeffs):
    """Pathwise ``D_t M(T')`` from the Doleans-Dade exponential.

    ``D_t M(T') = exp(-lambda t) sigma~(Y(t)) exp(eps int_t^T' sigma~'(Y) dW
    + (eps^2/2) int_t^T' (h'(Y) - sigma~'(Y)^2) ds)``, with both integrals
    taken on the path's own grid (left-point sums) and ``t`` snapped to it.
    """
    t_grid = np.atleast_1d(np.asarray(t_grid, dtype=float))
    if np.any(t_grid > T_prime + 1e-12) or np.any(t_grid < 0):
        raise ValueError("t_grid points must lie in [0, T']")
    n_T = cfg.steps(T_prime)
    if n_T > path.dw.size:
        raise ValueError("T' exceeds the simulated horizon of the path")
    y = path.states[:n_T]
    dw = path.dw[:n_T]
    eps = cfg.epsilon
    ds = coeffs.sigma_tilde_prime(y)
    dh = coeffs.h_prime(y)
    # reverse cumulative sums give int_{t_k}^{T'} for every grid index k
    stoch = np.concatenate([np.cumsum((ds * dw)[::-1])[::-1], [0.0]])
    drift = np.concatenate([np.cumsum(((dh - ds**2) * cfg.dt)[::-1])[::-1], [0.0]])
    k = np.array([cfg.steps(t) for t in t_grid])
    y_t = path.states[k]
    value = (np.exp(-model.lambda_ * k * cfg.dt) * coeffs.sigma_tilde(y_t)
             * np.exp(eps * stoch[k] + 0.5 * eps**2 * drift[k]))
    return MalliavinTrace(t_grid=k * cfg.dt, value=value, Z_terms=(eps * stoch[k], 0.5 * eps**2 * drift[k]))
