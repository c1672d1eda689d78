"""Long-exit-time tail: direct Monte Carlo and fixed-effort splitting in survival time."""
from dataclasses import dataclass, field
import math
from typing import NamedTuple, Optional
import warnings

import numpy as np
from scipy import stats

from . import rng
from .sde import CENSORED, run_exits

Z95 = stats.norm.ppf(0.975)
THETA_CAP = 2.0
MIN_CONDITIONAL = 100


class RareEventWarning(UserWarning):
    pass


class InsufficientSampleError(RuntimeError):
    pass


def k_bound(epsilon, lambda_, theta_cap=THETA_CAP):
    """Largest ``|x|`` accepted without warning: ``sqrt(2 theta_cap log(1/eps) / lambda)``."""
    return math.sqrt(2 * theta_cap * math.log(1 / epsilon) / lambda_)


@dataclass(frozen=True)
class TailQuery:
    """The event ``tau > (alpha/lambda) log(1/eps)`` from ``X(0) = eps * x_start``."""

    alpha: float
    epsilon: float
    x_start: float
    lambda_: float

    def __post_init__(self):
        if not self.alpha > 1:
            raise ValueError(f"alpha must exceed 1, got {self.alpha}")
        if not 0 < self.epsilon < 1:
            raise ValueError(f"epsilon must be in (0, 1), got {self.epsilon}")
        bound = k_bound(self.epsilon, self.lambda_)
        if abs(self.x_start) > bound:
            warnings.warn(f"|x| = {abs(self.x_start):.3g} exceeds K(eps) = {bound:.3g}; "
                          "the tail asymptotics are not claimed there", RareEventWarning)

    @classmethod
    def for_model(cls, model, alpha, epsilon, x_start=0.0):
        return cls(float(alpha), float(epsilon), float(x_start), model.lambda_)

    @property
    def horizon(self):
        return self.alpha / self.lambda_ * math.log(1 / self.epsilon)

    @property
    def x0(self):
        return self.epsilon * self.x_start

    def to_dict(self):
        return {"alpha": self.alpha, "epsilon": self.epsilon, "x_start": self.x_start,
                "horizon": self.horizon}


@dataclass(frozen=True)
class TailEstimate:
    """``per_side`` counts exits at ``(q_minus, q_plus)`` among the final survivors."""

    p_hat: float
    ci_low: float
    ci_high: float
    method: str
    n_effective: int
    per_side: tuple
    levels: Optional[tuple] = None
    level_fractions: Optional[tuple] = None
    n_final: int = 0
    censored: int = 0
    horizon: float = float("nan")
    warnings: tuple = field(default=())
    se: float = float("nan")

    def to_dict(self):
        return {"p_hat": self.p_hat, "ci": [self.ci_low, self.ci_high], "method": self.method,
                "n_effective": self.n_effective,
                "per_side": {"q_minus": self.per_side[0], "q_plus": self.per_side[1]},
                "levels": None if self.levels is None else list(self.levels),
                "level_fractions": None if self.level_fractions is None else list(self.level_fractions),
                "n_final": self.n_final, "censored": self.censored, "horizon": self.horizon,
                "standard_error": self.se, "warnings": list(self.warnings)}


def wilson_interval(k, n, level=0.95):
    if n == 0:
        return 0.0, 1.0
    ci = stats.binomtest(int(k), int(n)).proportion_ci(confidence_level=level, method="wilson")
    return float(ci.low), float(ci.high)


@dataclass
class SplittingRun:
    """Raw output of :func:`fixed_effort`: per-level survival fractions and final survivors."""

    fractions: list
    alive: np.ndarray
    states: object
    extinct_at: Optional[int] = None


def fixed_effort(n, levels, initial, advance, resample):
    """Generic fixed-effort splitting.

    ``advance(k, states)`` runs level ``k`` for the whole population and
    returns ``(alive_mask, new_states)``.  Between levels the population is
    refilled to ``n`` by drawing survivors with ``resample(k, n)``, uniforms in
    (0, 1) keyed by the next level.  The estimate is the product of the
    returned fractions.
    """
    states = initial
    fractions = []
    alive = None
    for k in range(levels):
        alive, states = advance(k, states)
        n_alive = int(alive.sum())
        fractions.append(n_alive / n)
        if n_alive == 0:
            return SplittingRun(fractions, alive, states, extinct_at=k)
        if k < levels - 1:
            survivors = np.flatnonzero(alive)
            pick = np.minimum((resample(k + 1, n) * n_alive).astype(np.int64), n_alive - 1)
            states = _take(states, survivors[pick])
    return SplittingRun(fractions, alive, states)


def _take(states, idx):
    if isinstance(states, tuple):
        return tuple(s[idx] for s in states)
    return states[idx]


def _level_steps(query, cfg, levels):
    """Grid steps of the thresholds ``t_k = k t* / levels`` (snapped to the time grid)."""
    return [cfg.steps(k * query.horizon / levels) for k in range(levels + 1)]


def _run_tail(model, query, n, levels, cfg, seed):
    """Shared simulation for both estimators; ``levels=1`` is direct Monte Carlo."""
    bounds = _level_steps(query, cfg, levels)
    max_steps = cfg.steps(cfg.horizon(model.lambda_))
    notes = []
    if bounds[-1] > max_steps:
        notes.append(f"horizon {query.horizon:.4g} exceeds max_time; paths are censored and "
                     "counted as survivors")
    ends = [min(b, max_steps) for b in bounds]
    slots = np.arange(n, dtype=np.int64)

    def advance(k, x):
        batch = run_exits(model, x, cfg, seed, slots, level=k, start_step=ends[k],
                          stop_step=ends[k + 1])
        return batch.side == CENSORED, batch.x_end

    def resample(k, size):
        return rng.uniforms(seed, k, slots[:size])

    x_init = np.full(n, query.x0)
    run = fixed_effort(n, levels, x_init, advance, resample)
    minus = plus = censored = 0
    if run.extinct_at is None:
        # survivors keep their own stream until they leave the interval
        idx = np.flatnonzero(run.alive)
        last = levels - 1
        tail = run_exits(model, run.states[idx], cfg, seed, idx, level=last,
                         start_step=ends[-1], stop_step=max_steps)
        minus = int(np.sum(tail.side == -1))
        plus = int(np.sum(tail.side == 1))
        censored = int(np.sum(tail.side == CENSORED))
        if censored:
            notes.append(f"{censored} survivors reached max_time without exiting")
    return run, bounds, (minus, plus), censored, notes


def tail_direct(model, query, n, cfg, seed):
    """Fraction of ``n`` paths with ``tau > t*`` and its Wilson 95% interval."""
    run, bounds, per_side, censored, notes = _run_tail(model, query, n, 1, cfg, seed)
    k = int(run.alive.sum())
    if k < 25:
        notes.append(f"only {k} of {n} paths survived; increase n for a reliable estimate")
    for note in notes:
        warnings.warn(note, RareEventWarning)
    lo, hi = wilson_interval(k, n)
    return TailEstimate(p_hat=k / n, ci_low=lo, ci_high=hi, method="direct", n_effective=n,
                        per_side=per_side, n_final=k, censored=censored,
                        horizon=bounds[-1] * cfg.dt, warnings=tuple(notes),
                        se=math.sqrt(k / n * (1 - k / n) / n))


def tail_splitting(model, query, levels, paths_per_level, cfg, seed):
    """Fixed-effort splitting with thresholds equally spaced in survival time.

    The 95% interval comes from the delta method on ``log p``, treating the
    level fractions as independent.
    """
    if levels < 1:
        raise ValueError("levels must be >= 1")
    n = int(paths_per_level)
    run, bounds, per_side, censored, notes = _run_tail(model, query, n, levels, cfg, seed)
    fr = np.array(run.fractions)
    if run.extinct_at is not None:
        notes.append(f"no survivors at level {run.extinct_at}; increase paths_per_level")
        # one-sided 95% bound for the extinct level times the fractions before it
        hi = float(np.prod(fr[:-1]) * (1 - 0.05 ** (1 / n)))
        for note in notes:
            warnings.warn(note, RareEventWarning)
        return TailEstimate(0.0, 0.0, hi, "splitting", n * len(fr), per_side,
                            levels=tuple(b * cfg.dt for b in bounds[1:]),
                            level_fractions=tuple(fr), n_final=0, censored=censored,
                            horizon=bounds[-1] * cfg.dt, warnings=tuple(notes), se=hi / Z95)
    p = float(np.prod(fr))
    sd = math.sqrt(float(np.sum((1 - fr) / (n * fr))))
    lo, hi = p * math.exp(-Z95 * sd), min(1.0, p * math.exp(Z95 * sd))
    for note in notes:
        warnings.warn(note, RareEventWarning)
    return TailEstimate(p, lo, hi, "splitting", n * levels, per_side,
                        levels=tuple(b * cfg.dt for b in bounds[1:]), level_fractions=tuple(fr),
                        n_final=int(run.alive.sum()), censored=censored,
                        horizon=bounds[-1] * cfg.dt, warnings=tuple(notes), se=p * sd)


class ConditionalSplit(NamedTuple):
    p_minus: float
    p_plus: float
    ci: tuple  # Wilson 95% interval for p_plus; p_minus's is its mirror image


def conditional_exit_distribution(model, query, estimate):
    """Exit-side frequencies among paths that survived past the horizon."""
    minus, plus = estimate.per_side
    total = minus + plus
    if total < MIN_CONDITIONAL:
        raise InsufficientSampleError(
            f"only {total} long-surviving paths exited; need at least {MIN_CONDITIONAL}")
    return ConditionalSplit(minus / total, plus / total, wilson_interval(plus, total))


def unconditional_exit_split(model, epsilon, x0, n, cfg, seed):
    """Plain Monte Carlo frequency of exits at ``q_plus`` from ``x0`` with a Wilson interval.

    Censored paths count as not exiting at ``q_plus``.
    """
    batch = run_exits(model, float(x0), cfg, seed, np.arange(n))
    k = int(np.sum(batch.side == 1))
    return k / n, wilson_interval(k, n)


def exit_residuals(model, x_start, cfg, n, seed, neighborhood=None):
    """Residual ``tau_I - tau_V - T(g(+-R))`` of the exit-time representation per path.

    Paths that never leave the neighborhood or the interval are dropped.
    """
    from .flow import deterministic_exit_time
    from .model import choose_neighborhood
    from .sde import simulate_path

    nb = neighborhood or choose_neighborhood(model)
    T_side = {-1: deterministic_exit_time(model, nb.v_minus)[0],
              1: deterministic_exit_time(model, nb.v_plus)[0]}
    out = []
    for i in range(n):
        path = simulate_path(model, cfg.epsilon * x_start, cfg, rng.Stream(seed, slot=i), nb)
        if path.exit is None or path.exit.crossed_neighborhood is None:
            continue
        tau_v, side_v = path.exit.crossed_neighborhood
        out.append(path.exit.tau - tau_v - T_side[side_v])
    return np.array(out)
