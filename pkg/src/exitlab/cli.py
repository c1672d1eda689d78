"""``exitlab`` command line."""
import argparse
from dataclasses import asdict, dataclass
import json
import math
import os
from pathlib import Path
import sys
import time
import warnings

import numpy as np

from . import __version__
from .expr import ExpressionError
from .flow import FlowError
from .model import ModelError

SCHEMA = 1
EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2
COMMANDS = ("flow", "conjugation", "simulate", "tail", "density", "smallball", "theory", "verify")


class UsageError(Exception):
    pass


@dataclass
class RunManifest:
    command: str
    model_hash: str
    seed: int
    version: str
    wall_time: float
    thread_count: int
    deterministic_reduce: bool = False
    parameters: dict = None
    units: dict = None


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _global_flags():
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--model", default="linear-ou", help="model JSON file or preset name")
    p.add_argument("--seed", type=int, default=0, help="64-bit master seed")
    p.add_argument("--threads", type=int, default=None,
                   help="worker threads (default: EXITLAB_THREADS or all cores)")
    p.add_argument("--deterministic-reduce", action="store_true",
                   help="record that results must be bit-identical across thread counts")
    p.add_argument("--out", default=None, help="output path (stdout when omitted)")
    return p


def _sim_flags(p, eps=True):
    if eps:
        p.add_argument("--eps", type=float, required=True)
    p.add_argument("--dt", type=float, default=1e-3)
    p.add_argument("--scheme", choices=("euler", "milstein"), default="euler")
    p.add_argument("--max-time", type=float, default=None)


def build_parser():
    common = _global_flags()
    parser = _Parser(prog="exitlab", description=__doc__, parents=[common])
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("flow", parents=[common], help="deterministic flow S^t x")
    p.add_argument("--x", type=float, required=True)
    p.add_argument("--t", type=float, required=True)

    p = sub.add_parser("conjugation", parents=[common], help="tabulate f as CSV")
    p.add_argument("--grid", type=int, default=256)

    p = sub.add_parser("simulate", parents=[common], help="exit times of the original SDE")
    _sim_flags(p)
    p.add_argument("--x0", type=float, default=0.0)
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--dump-path", type=int, default=None, metavar="K")

    p = sub.add_parser("tail", parents=[common], help="long-exit-time tail probability")
    _sim_flags(p)
    p.add_argument("--alpha", type=float, required=True)
    p.add_argument("--x", type=float, default=0.0, help="start point in units of eps")
    p.add_argument("--method", choices=("direct", "splitting"), default="splitting")
    p.add_argument("--levels", type=int, default=4)
    p.add_argument("--n", type=int, default=10_000, help="paths (per level for splitting)")
    p.add_argument("--residual-paths", type=int, default=0,
                   help="paths for the exit-time residual diagnostic")

    p = sub.add_parser("density", parents=[common], help="KDE of M(T') vs the Gaussian limit")
    _sim_flags(p)
    p.add_argument("--x", type=float, default=0.0)
    p.add_argument("--n", type=int, default=100_000)
    p.add_argument("--policy", type=float, default=1.5, help="lambda T' / log(1/eps)")
    p.add_argument("--R", type=float, default=None)

    p = sub.add_parser("smallball", parents=[common], help="small-ball probability of M(T_eps)")
    _sim_flags(p)
    p.add_argument("--x", type=float, default=0.0)
    p.add_argument("--theta", type=float, required=True)
    p.add_argument("--c", type=float, default=1.0, help="a(eps) = c eps^theta")
    p.add_argument("--sign", type=int, choices=(1, -1), default=1)
    p.add_argument("--n", type=int, default=100_000)
    p.add_argument("--R", type=float, default=None)

    p = sub.add_parser("theory", parents=[common], help="closed-form reference values")
    p.add_argument("--eps", type=float, required=True)
    p.add_argument("--x", type=float, default=0.0)
    p.add_argument("--alpha", type=float, required=True)
    p.add_argument("--theta", type=float, default=1.5, help="small-ball exponent for T_eps")
    p.add_argument("--R", type=float, default=None)

    p = sub.add_parser("verify", parents=[common], help="run the acceptance suite")
    p.add_argument("--suite", choices=("quick", "full"), default="quick")
    return parser


def _threads(args):
    import numba

    n = args.threads
    if n is None and os.environ.get("EXITLAB_THREADS"):
        n = int(os.environ["EXITLAB_THREADS"])
    limit = numba.config.NUMBA_NUM_THREADS
    n = limit if n is None else n
    if n < 1:
        raise UsageError("--threads must be >= 1")
    n = min(n, limit)
    numba.set_num_threads(n)
    return n


def _sim_config(args):
    from .sde import SimConfig

    try:
        return SimConfig(epsilon=args.eps, dt=args.dt, scheme=args.scheme, max_time=args.max_time)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def _jsonable(value):
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, (np.floating, float)):
        v = float(value)
        return v if math.isfinite(v) else None
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, np.bool_):
        return bool(value)
    return value


def _emit_json(args, result, manifest):
    doc = {"schema": SCHEMA, "manifest": asdict(manifest), "result": result}
    text = json.dumps(_jsonable(doc), indent=2, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n")
    else:
        print(text)


def _emit_csv(args, header, columns, manifest, fmt="%.17g"):
    data = np.column_stack(columns)
    if args.out:
        np.savetxt(args.out, data, delimiter=",", header=header, comments="", fmt=fmt)
        side = Path(str(args.out) + ".manifest.json")
        side.write_text(json.dumps(_jsonable({"schema": SCHEMA, "manifest": asdict(manifest)}),
                                   indent=2, sort_keys=True) + "\n")
    else:
        np.savetxt(sys.stdout, data, delimiter=",", header=header, comments="", fmt=fmt)


# commands ----------------------------------------------------------------

def cmd_flow(args, model):
    from .flow import deterministic_exit_time, integrate_flow

    end = integrate_flow(model, args.x, args.t)
    out = {"x": args.x, "t": args.t, "S_t_x": end}
    if args.x != 0 and model.q_minus < args.x < model.q_plus:
        T, side = deterministic_exit_time(model, args.x)
        out.update(exit_time=T, exit_side=side)
    return "json", out, {"t": "time", "x": "state"}, f"S^{args.t} {args.x} = {end:.10g}"


def cmd_conjugation(args, model):
    from .flow import build_conjugation_table

    table = build_conjugation_table(model, args.grid)
    summary = f"f(q_minus) = {table.f_qminus:.10g}, f(q_plus) = {table.f_qplus:.10g}"
    return "csv", ("x,f_of_x", [table.grid, table.f_values]), {"x": "state", "f_of_x": "state"}, summary


def cmd_simulate(args, model):
    from .rng import Stream
    from .sde import exit_summary, simulate_path

    cfg = _sim_config(args)
    if args.n < 1:
        raise UsageError("--n must be >= 1")
    tau, side = exit_summary(model, args.x0, cfg, args.n, args.seed)
    if args.dump_path is not None:
        k = args.dump_path
        if not 0 <= k < args.n:
            raise UsageError(f"--dump-path must be in [0, {args.n})")
        path = simulate_path(model, args.x0, cfg, Stream(args.seed, slot=k))
        target = Path(f"{args.out}.path{k}.csv") if args.out else Path(f"path{k}.csv")
        np.savetxt(target, np.column_stack([path.times, path.states]), delimiter=",",
                   header="t,x", comments="", fmt="%.17g")
    censored = (side == 0).astype(int)
    cols = [np.arange(args.n), np.where(censored, np.nan, tau), side, censored]
    summary = (f"{args.n} paths, {int(np.sum(side == 1))} exits at q_plus, "
               f"{int(np.sum(side == -1))} at q_minus, {int(censored.sum())} censored")
    units = {"tau": "time", "side": "+1 q_plus, -1 q_minus, 0 censored"}
    return "csv", ("path_id,tau,side,censored", cols), units, summary


def cmd_tail(args, model):
    from .rare import (InsufficientSampleError, TailQuery, conditional_exit_distribution,
                       exit_residuals, tail_direct, tail_splitting)
    from .theory import TheoremConstants, exit_split, lambda_constant

    cfg = _sim_config(args)
    try:
        query = TailQuery.for_model(model, args.alpha, args.eps, args.x)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    start = time.perf_counter()
    if args.method == "direct":
        est = tail_direct(model, query, args.n, cfg, args.seed)
    else:
        if args.levels < 1:
            raise UsageError("--levels must be >= 1")
        est = tail_splitting(model, query, args.levels, args.n, cfg, args.seed)
    elapsed = time.perf_counter() - start
    consts = TheoremConstants.from_model(model)
    lam = lambda_constant(consts, args.x)
    p_minus, p_plus = exit_split(consts)
    out = {"query": query.to_dict(), **est.to_dict(),
           "theory": {"Lambda": lam, "Lambda_eps_power": lam * args.eps ** (args.alpha - 1),
                      "split": {"p_minus": p_minus, "p_plus": p_plus}},
           "wall_time": elapsed}
    try:
        cond = conditional_exit_distribution(model, query, est)
        out["conditional"] = {"p_minus": cond.p_minus, "p_plus": cond.p_plus, "ci_plus": list(cond.ci)}
    except InsufficientSampleError as exc:
        out["conditional"] = {"error": str(exc)}
    if args.residual_paths > 0:
        res = exit_residuals(model, args.x, cfg, args.residual_paths, args.seed)
        out["residual"] = {"n": int(res.size), "mean": float(res.mean()) if res.size else None,
                           "sd": float(res.std(ddof=1)) if res.size > 1 else None}
    summary = f"p_hat = {est.p_hat:.6g} [{est.ci_low:.6g}, {est.ci_high:.6g}] ({est.method})"
    return "json", out, {"horizon": "time", "p_hat": "probability"}, summary


def cmd_density(args, model):
    from .density import density_report

    cfg = _sim_config(args)
    est, ref, dist = density_report(model, args.eps, args.x, args.n, cfg, args.seed, args.policy,
                                    args.R)
    p_ref = ref.pdf(est.grid)
    gap = np.abs(est.values - p_ref) * np.exp(np.abs(est.grid - ref.mean))
    summary = f"weighted sup distance {dist:.6g}, bandwidth {est.bandwidth:.4g}, n = {est.n}"
    units = {"z": "M (dimensionless)", "p_emp": "density", "p_ref": "density"}
    return "csv", ("z,p_emp,p_ref,weighted_gap", [est.grid, est.values, p_ref, gap]), units, summary


def cmd_smallball(args, model):
    from .density import small_ball_check

    cfg = _sim_config(args)
    res = small_ball_check(model, args.eps, args.x, args.theta, args.n, cfg, args.seed, args.sign,
                           args.c, args.R)
    summary = f"empirical {res.empirical:.6g} vs theoretical {res.theoretical:.6g}"
    return "json", res.to_dict(), {"a": "M units", "T_eps": "time"}, summary


def cmd_theory(args, model):
    from .model import choose_neighborhood
    from .theory import (TheoremConstants, deterministic_T, exit_split, lambda_constant,
                         recursion_schedule)

    if not 0 < args.eps < 1:
        raise UsageError("--eps must be in (0, 1)")
    consts = TheoremConstants.from_model(model)
    lam = lambda_constant(consts, args.x)
    R = choose_neighborhood(model, args.R).R
    p_minus, p_plus = exit_split(consts)
    out = {"Lambda": lam, "Lambda_eps_power": lam * args.eps ** (args.alpha - 1),
           "split": {"p_minus": p_minus, "p_plus": p_plus},
           "C_minus": consts.C_minus, "C_plus": consts.C_plus,
           "f_qminus": consts.f_qminus, "f_qplus": consts.f_qplus, "R": R,
           "T_eps": deterministic_T(args.eps, R, args.theta, model.lambda_),
           "schedule": recursion_schedule(args.eps, args.theta, model.lambda_, model.sigma0, R).to_dict()}
    return "json", out, {"T_eps": "time"}, f"Lambda({args.x}) = {lam:.10g}"


def cmd_verify(args, model):
    from .acceptance import verify_suite

    report = verify_suite(args.suite, args.seed,
                          progress=lambda r: print(r.line(), file=sys.stderr, flush=True))
    summary = f"{report['passed']}/{report['total']} criteria passed"
    return "json", report, {}, summary


HANDLERS = {name: globals()[f"cmd_{name}"] for name in COMMANDS}


def run(argv=None):
    """Execute one command; returns 0 on success, 1 on usage errors, 2 on numerical failures."""
    from .model import load_model
    from .rare import InsufficientSampleError
    from .sde import SimulationError

    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(f"choose a command: {', '.join(COMMANDS)}")
        threads = _threads(args)
        model = load_model(args.model)
        start = time.perf_counter()
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            kind, payload, units, summary = HANDLERS[args.command](args, model)
        for w in caught:
            print(f"warning: {w.message}", file=sys.stderr)
        params = {k: v for k, v in vars(args).items()
                  if k not in ("model", "seed", "threads", "out", "command", "deterministic_reduce")}
        manifest = RunManifest(command=args.command, model_hash=model.content_hash,
                               seed=args.seed, version=__version__,
                               wall_time=time.perf_counter() - start, thread_count=threads,
                               deterministic_reduce=args.deterministic_reduce,
                               parameters=params, units=units)
        if kind == "json":
            _emit_json(args, payload, manifest)
        else:
            _emit_csv(args, payload[0], payload[1], manifest)
        print(summary, file=sys.stdout if args.out else sys.stderr)
        return EXIT_OK
    except (UsageError, FileNotFoundError, ModelError, ExpressionError, ValueError) as exc:
        print(f"exitlab: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FlowError, SimulationError, InsufficientSampleError, ArithmeticError) as exc:
        print(f"exitlab: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
