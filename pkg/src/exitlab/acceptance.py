"""The acceptance criteria as runnable checks.

Each ``criterion_*`` function returns a :class:`CriterionResult`.
:func:`verify_suite` runs them all (``full``) or only the ones whose noise
levels are at least 0.1 (``quick``).
"""
from dataclasses import asdict, dataclass, field
import itertools
import math
import time
import warnings

import numpy as np
from scipy import stats

from . import density, rare, rng, sde, theory
from .flow import conjugation_values, deterministic_exit_time, integrate_flow
from .model import choose_neighborhood, preset


@dataclass
class CriterionResult:
    id: int
    name: str
    passed: bool
    measured: dict = field(default_factory=dict)
    runtime: float = 0.0

    def line(self):
        status = "PASS" if self.passed else "FAIL"
        return f"[{status}] C{self.id} {self.name} ({self.runtime:.1f} s)"

    def to_dict(self):
        return asdict(self)


def _timed(cid, name, fn):
    start = time.perf_counter()
    passed, measured = fn()
    return CriterionResult(cid, name, bool(passed), measured, time.perf_counter() - start)


def _plain(value):
    if isinstance(value, (np.floating, np.integer, np.bool_)):
        return value.item()
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    return value


# 1 -----------------------------------------------------------------------

def conjugation_identity_errors(model, n=20, seed=0, times=(0.2, 0.5, 1.0)):
    """``|f(S^t x) - exp(lambda t) f(x)|`` for random ``x`` in [-0.5, 0.5] with ``S^t x`` inside."""
    gen = np.random.default_rng(seed)
    xs, ts, ends = [], [], []
    while len(xs) < n:
        x = gen.uniform(-0.5, 0.5)
        t = float(gen.choice(times))
        # keep (x, t) only when the orbit is still inside at time t
        if x == 0.0 or deterministic_exit_time(model, x)[0] <= t:
            continue
        xs.append(x)
        ts.append(t)
        ends.append(integrate_flow(model, x, t))
    f_end = conjugation_values(model, ends)
    f_x = conjugation_values(model, xs)
    return np.abs(f_end - np.exp(model.lambda_ * np.array(ts)) * f_x)


def criterion_1(seed=0):
    def run():
        err = conjugation_identity_errors(preset("cubic"), seed=seed)
        return err.max() <= 1e-6, {"max_error": float(err.max()), "tolerance": 1e-6}
    return _timed(1, "conjugation identity", run)


# 2 -----------------------------------------------------------------------

def criterion_2(seed=0, n=100_000):
    def run():
        model = preset("linear-ou")
        eps, t, x0 = 0.1, 1.0, 0.0
        xs, _ = sde.states_at(model, x0, t, sde.SimConfig(epsilon=eps), n, seed)
        sd = eps * math.sqrt((math.e**2 - 1) / 2)
        ks = stats.kstest(xs, "norm", args=(x0 * math.e, sd))
        return ks.pvalue > 0.01, {"ks_statistic": float(ks.statistic), "p_value": float(ks.pvalue),
                                  "level": 0.01, "n": n}
    return _timed(2, "exact OU law (KS)", run)


# 3 -----------------------------------------------------------------------

def exit_identity_check(model, eps, n, seed, dt=1e-3, x_lin=0.0):
    cfg = sde.SimConfig(epsilon=eps, dt=dt)
    nb = choose_neighborhood(model)
    batch = sde.run_linearized(model, nb.R, x_lin, cfg, seed, n)
    done = batch.side_v != 0
    tau = batch.tau_v[done]
    m = batch.m_exit[done]
    predicted = (math.log(nb.R / eps) - np.log(np.abs(m))) / model.lambda_
    gap = np.abs(tau - predicted)
    violations = int(np.sum(np.sign(m) != batch.side_v[done]))
    return {"max_gap": float(gap.max()), "gap_tolerance": 2 * dt, "sign_violations": violations,
            "exited": int(done.sum()), "n": n}


def criterion_3(seed=0, n=10_000):
    def run():
        out = {}
        ok = True
        for name in ("linear-ou", "cubic"):
            res = exit_identity_check(preset(name), 0.1, n, seed)
            out[name] = res
            ok &= (res["max_gap"] <= res["gap_tolerance"] and res["sign_violations"] == 0
                   and res["exited"] == n)
        return ok, out
    return _timed(3, "exit identity and sign coupling", run)


# 4, 5 --------------------------------------------------------------------

C4_EPS = (0.2, 0.1, 0.05)


def c4_band(eps):
    """Half-width 0.25 at eps = 0.2 shrinking to 0.15 at 0.05, linear in log eps."""
    s = (math.log(0.2) - math.log(eps)) / (math.log(0.2) - math.log(0.05))
    half = 0.25 - 0.10 * s
    return 1 - half, 1 + half


def tail_scan(seed=0, eps_values=C4_EPS, alpha=1.3, levels=4, per_level=25_000):
    model = preset("linear-ou")
    lam0 = theory.lambda_constant(theory.TheoremConstants.from_model(model), 0.0)
    rows = []
    for eps in eps_values:
        q = rare.TailQuery.for_model(model, alpha, eps)
        est = rare.tail_splitting(model, q, levels, per_level, sde.SimConfig(epsilon=eps), seed)
        ratio = est.p_hat * eps ** -(alpha - 1) / lam0
        rows.append({"eps": eps, "p_hat": est.p_hat, "ci": [est.ci_low, est.ci_high],
                     "ratio": ratio, "band": list(c4_band(eps)), "n_effective": est.n_effective})
    return rows, lam0


def criterion_4(seed=0, eps_values=C4_EPS, rows=None):
    def run():
        nonlocal rows
        if rows is None:
            rows, _ = tail_scan(seed, eps_values)
        ok = all(r["band"][0] <= r["ratio"] <= r["band"][1] and r["n_effective"] >= 100_000
                 for r in rows)
        return ok, {"rows": rows, "Lambda0": 2 / math.sqrt(math.pi)}
    return _timed(4, "tail constant", run)


def criterion_5(rows):
    def run():
        x = np.log([r["eps"] for r in rows])
        y = np.log([r["p_hat"] for r in rows])
        slope = float(np.polyfit(x, y, 1)[0])
        return abs(slope - 0.3) <= 0.05, {"slope": slope, "target": 0.3, "tolerance": 0.05}
    return _timed(5, "scaling slope", run)


# 6 -----------------------------------------------------------------------

def criterion_6(seed=0, levels=4, per_level=20_000, xs=(-1.0, 0.0, 1.0)):
    def run():
        model = preset("linear-asym")
        eps, alpha = 0.05, 1.3
        target = theory.exit_split(theory.TheoremConstants.from_model(model))[1]
        rows = {}
        for x in xs:
            q = rare.TailQuery.for_model(model, alpha, eps, x)
            est = rare.tail_splitting(model, q, levels, per_level, sde.SimConfig(epsilon=eps), seed)
            split = rare.conditional_exit_distribution(model, q, est)
            rows[x] = {"p_plus": split.p_plus, "ci": list(split.ci), "count": sum(est.per_side)}
        close = all(abs(r["p_plus"] - target) <= 0.05 for r in rows.values())
        overlap = all(a["ci"][0] <= b["ci"][1] and b["ci"][0] <= a["ci"][1]
                      for a, b in itertools.combinations(rows.values(), 2))
        return close and overlap, {"target": target, "by_x": {str(k): v for k, v in rows.items()},
                                   "within_0.05": close, "cis_overlap": overlap}
    return _timed(6, "conditional exit split", run)


# 7 -----------------------------------------------------------------------

def criterion_7(seed=0, n=1_000_000, dt=2e-3):
    def run():
        model = preset("linear-ou")
        res = density.small_ball_check(model, 0.01, 0.0, 0.5, n, sde.SimConfig(epsilon=0.01, dt=dt),
                                       seed)
        return 0.9 <= res.ratio <= 1.1, res.to_dict()
    return _timed(7, "small-ball law", run)


# 8 -----------------------------------------------------------------------

def criterion_8(seeds=(1, 2, 3), n=100_000, dt=5e-3):
    def run():
        out = {}
        ok = True
        for name in ("linear-ou", "cubic"):
            model = preset(name)
            dists = []
            for s in seeds:
                pair = [density.density_report(model, eps, 0.0, n, sde.SimConfig(epsilon=eps, dt=dt), s)[2]
                        for eps in (0.2, 0.05)]
                dists.append(pair)
            decreases = sum(b < a for a, b in dists)
            majority = decreases * 2 > len(seeds)
            out[name] = {"distances": dists, "decreasing_seeds": decreases, "majority": majority}
            ok &= majority
        lin_small = max(d[1] for d in out["linear-ou"]["distances"])
        out["linear_eps0.05_max"] = lin_small
        ok &= lin_small <= 0.1
        return ok, out
    return _timed(8, "density convergence", run)


# 9 -----------------------------------------------------------------------

def malliavin_gap(model, eps, n, seed, dt=1e-3, policy=density.DEFAULT_POLICY):
    """Per-path ``int_0^T' |D_t M(T') - exp(-lambda t) sigma(0)|^2 dt`` (trapezoid).

    Also returns the largest pointwise deviation seen on any path.
    """
    cfg = sde.SimConfig(epsilon=eps, dt=dt)
    nb = choose_neighborhood(model)
    coeffs = sde.linear_coefficients(model, nb.R)
    T_prime = cfg.steps(policy * math.log(1 / eps) / model.lambda_) * cfg.dt
    t_grid = cfg.dt * np.arange(cfg.steps(T_prime) + 1)
    limit = np.exp(-model.lambda_ * t_grid) * model.sigma0
    gaps = np.empty(n)
    worst = 0.0
    for i in range(n):
        path, _ = sde.simulate_linearized(model, nb, 0.0, cfg, rng.Stream(seed, slot=i),
                                          horizon=T_prime, stop_at_exit=False, coeffs=coeffs)
        tr = sde.malliavin_derivative(path, t_grid, T_prime, model, cfg, coeffs)
        dev = tr.value - limit
        worst = max(worst, float(np.abs(dev).max()))
        gaps[i] = np.trapezoid(dev**2, tr.t_grid)
    return gaps, worst


def criterion_9(seed=0, n=1000):
    def run():
        vs = preset("varsigma")
        g02 = float(malliavin_gap(vs, 0.2, n, seed)[0].mean())
        g01 = float(malliavin_gap(vs, 0.1, n, seed)[0].mean())
        drop = 1 - g01 / g02
        _, lin_err = malliavin_gap(preset("linear-ou"), 0.1, 20, seed)
        ok = drop >= 0.3 and lin_err <= 1e-12
        return ok, {"mean_gap_eps0.2": g02, "mean_gap_eps0.1": g01, "relative_drop": drop,
                    "linear_max_deviation": lin_err}
    return _timed(9, "Malliavin derivative limit", run)


# 10 ----------------------------------------------------------------------

TOY_SURVIVE = np.array([0.6, 0.3])
TOY_MOVE = np.array([[0.7, 0.3], [0.4, 0.6]])  # row: from-state, column: to-state


def toy_exact(levels, start=0):
    """Survival probability of the toy chain by enumerating every state sequence."""
    total = 0.0
    for seq in itertools.product((0, 1), repeat=levels):
        p = 1.0
        s = start
        for nxt in seq:
            p *= TOY_SURVIVE[s] * TOY_MOVE[s, nxt]
            s = nxt
        total += p
    return total


def toy_splitting(levels, n, seed, start=0):
    """Fixed-effort splitting on the toy chain; each level survives then moves."""
    slots = np.arange(n)

    def advance(k, states):
        u_live = rng.uniforms(seed, k, slots, tag=2)
        u_move = rng.uniforms(seed, k, slots, tag=3)
        alive = u_live < TOY_SURVIVE[states]
        moved = np.where(u_move < TOY_MOVE[states, 0], 0, 1)
        return alive, moved

    run = rare.fixed_effort(n, levels, np.full(n, start), advance,
                            lambda k, size: rng.uniforms(seed, k, slots[:size]))
    return float(np.prod(run.fractions))


def criterion_10(seed=0, direct_n=1_000_000, direct_dt=5e-3, per_level=10_000, split_n=100_000,
                 toy_reps=200):
    def run():
        model = preset("linear-ou")
        out = {}
        eps, alpha = 0.25, 1.2
        q = rare.TailQuery.for_model(model, alpha, eps)
        cfg = sde.SimConfig(epsilon=eps, dt=direct_dt)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", rare.RareEventWarning)
            d = rare.tail_direct(model, q, direct_n, cfg, seed)
            s = rare.tail_splitting(model, q, 4, per_level, cfg, seed + 1)
        # the splitting interval ignores resampling correlation, so compare 3-SE intervals
        overlap = abs(d.p_hat - s.p_hat) <= 3 * (d.se + s.se)
        out["splitting_vs_direct"] = {"direct": [d.p_hat, d.ci_low, d.ci_high, d.se],
                                      "splitting": [s.p_hat, s.ci_low, s.ci_high, s.se],
                                      "ci95_overlap": d.ci_low <= s.ci_high and s.ci_low <= d.ci_high,
                                      "overlap_3se": overlap}
        p, _ = rare.unconditional_exit_split(model, 0.3, 0.3, split_n, sde.SimConfig(epsilon=0.3), seed)
        exact = theory.scale_function_split(model, 0.3, 0.3)
        se = math.sqrt(exact * (1 - exact) / split_n)
        split_ok = abs(p - exact) <= 3 * se
        out["scale_function"] = {"mc": p, "quadrature": exact, "se": se, "within_3se": split_ok}
        levels, n = 4, 200
        exact_toy = toy_exact(levels)
        ests = np.array([toy_splitting(levels, n, seed * 1000 + r) for r in range(toy_reps)])
        se_toy = ests.std(ddof=1) / math.sqrt(toy_reps)
        toy_ok = abs(ests.mean() - exact_toy) <= 3 * se_toy
        out["toy_chain"] = {"mean": float(ests.mean()), "exact": exact_toy, "se": float(se_toy),
                            "within_3se": toy_ok}
        return overlap and split_ok and toy_ok, out
    return _timed(10, "oracle equivalences", run)


# suite -------------------------------------------------------------------

def verify_suite(level="quick", seed=0, progress=None):
    """Run the criteria; ``quick`` keeps only those at noise levels >= 0.1.

    Returns a JSON-ready report with one entry per criterion.
    """
    if level not in ("quick", "full"):
        raise ValueError("level must be 'quick' or 'full'")
    results = []

    def add(res):
        res.measured = _plain(res.measured)
        results.append(res)
        if progress:
            progress(res)

    add(criterion_1(seed))
    add(criterion_2(seed))
    add(criterion_3(seed))
    if level == "full":
        rows, _ = tail_scan(seed)
        add(criterion_4(seed, rows=rows))
        add(criterion_5(rows))
        add(criterion_6(seed))
        add(criterion_7(seed))
        add(criterion_8())
    else:
        add(criterion_4(seed, eps_values=(0.2, 0.1)))
    add(criterion_9(seed))
    add(criterion_10(seed))
    return {"suite": level, "seed": seed, "passed": sum(r.passed for r in results),
            "total": len(results), "criteria": [r.to_dict() for r in results]}
