"""Command-line experiment runner.

Subcommands::

    pullsim equilibrium --config two_pool.json
    pullsim fluid       --config two_pool.json --horizon 20 --dt 1e-3 --out traj.csv
    pullsim simulate    --config two_pool.json --policy pull --n 1000 --horizon 200 --seeds 4
    pullsim couple      --config two_pool.json --n 20 --horizon 1000 --seeds 100
    pullsim sweep       --config two_pool.json --policy pull --n-list 100,1000 --horizon 100

Exit status: 0 on success, 1 for configuration or usage errors, 2 when an
internal invariant breaks (for example a coupling dominance violation).
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import errors
from .coupling import run_coupled
from .engine import FluidObserver, run_replication
from .fluid import MeanFieldState, equilibrium_state, integrate_fluid
from .metrics import estimate_steady_state
from .model import load_config, scale, solve_equilibrium, validate
from .policies import make_policy
from .rng import seed_plan

SWEEP_METRICS = ("waiting_prob", "blocking_prob", "p1", "p2", "p3")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}\n{self.format_usage()}")


def _common(p):
    p.add_argument("--config", required=True, help="system configuration JSON")
    p.add_argument("--out", help="output path (stdout when omitted)")


def _sim_flags(p, n_list=False):
    p.add_argument("--policy", default="pull", help="pull | pull-gen | jsq:<d> | random")
    if n_list:
        p.add_argument("--n-list", required=True, help="comma-separated server counts")
    else:
        p.add_argument("--n", type=int, required=True, help="total number of servers")
    p.add_argument("--horizon", type=float, default=100.0)
    p.add_argument("--seeds", type=int, default=1, help="number of replications")
    p.add_argument("--root-seed", type=int, default=0)
    p.add_argument("--warmup", type=float, default=0.2, help="warm-up fraction of the horizon")
    p.add_argument("--batches", type=int, default=20)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="pullsim", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("equilibrium", help="solve for the fluid equilibrium point")
    _common(p)

    p = sub.add_parser("fluid", help="integrate the fluid ODE and write a trajectory CSV")
    _common(p)
    p.add_argument("--horizon", type=float, default=20.0, help="final time")
    p.add_argument("--dt", type=float, default=1e-3, help="integration step")
    p.add_argument("--sample-dt", type=float, default=0.1, help="spacing of recorded states")
    p.add_argument("--k-max", type=int, default=64)
    p.add_argument("--start", choices=("idle", "equilibrium"), default="idle")

    p = sub.add_parser("simulate", help="run replications and write a metrics report")
    _common(p)
    _sim_flags(p)
    p.add_argument("--trace", action="store_true", help="also write the event trace of replication 0")
    p.add_argument("--dt", type=float, help="observer grid spacing for a fluid-scaled state CSV")

    p = sub.add_parser("couple", help="check pathwise dominance of coupled PULL systems")
    _common(p)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--horizon", type=float, default=1000.0)
    p.add_argument("--seeds", type=int, default=10)
    p.add_argument("--root-seed", type=int, default=0)
    p.add_argument("--large-init", type=int, default=3, help="initial queue at every server of the larger system")

    p = sub.add_parser("sweep", help="simulate over several n and write a long-format CSV")
    _common(p)
    _sim_flags(p, n_list=True)
    return parser


def _threads() -> int:
    env = os.environ.get("PULLSIM_THREADS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def _run_one(job):
    scaled, config, policy, horizon, seed, warmup, batches, trace, grid = job
    observers = [FluidObserver(grid)] if grid is not None else []
    return run_replication(
        scaled, config, policy, horizon, seed, observers,
        trace=trace, warmup=warmup, n_batches=batches,
    )


def run_replications(jobs):
    """Run jobs, possibly in parallel; results come back in job order."""
    workers = min(_threads(), len(jobs))
    if workers <= 1:
        return [_run_one(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_run_one, jobs))


def _emit(text: str, out) -> None:
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def _sibling(out, suffix):
    if not out:
        return None
    p = Path(out)
    return p.with_name(p.stem + suffix)


def _load(path):
    return validate(load_config(path))


def cmd_equilibrium(args):
    config = _load(args.config)
    eq = solve_equilibrium(config)
    x = equilibrium_state(config, k_max=2).x
    payload = {
        "nu": list(eq.nu),
        "idle_fraction": eq.idle_fraction,
        "pressure": eq.pressure,
        "x_star": x.tolist(),
    }
    _emit(json.dumps(payload, indent=2) + "\n", args.out)
    return 0


def cmd_fluid(args):
    config = _load(args.config)
    if args.start == "idle":
        x0 = MeanFieldState.idle(config, args.k_max)
    else:
        x0 = equilibrium_state(config, args.k_max)
    traj = integrate_fluid(x0, config, args.horizon, args.dt, sample_dt=args.sample_dt)
    buf = io.StringIO()
    traj.to_csv(buf)
    _emit(buf.getvalue(), args.out)
    if traj.stopped:
        print(f"integration stopped at t={traj.tau}: idle mass exhausted", file=sys.stderr)
    return 0


def _simulate(config, n, args, trace=False, grid=None):
    scaled = scale(config, n)
    make_policy(args.policy)  # fail fast on a bad policy string
    seeds = [seed_plan(args.root_seed, i) for i in range(args.seeds)]
    jobs = [
        (scaled, config, args.policy, args.horizon, s, args.warmup, args.batches,
         trace and i == 0, grid if i == 0 else None)
        for i, s in enumerate(seeds)
    ]
    results = run_replications(jobs)
    report = estimate_steady_state([r.record for r in results], args.warmup, args.batches)
    return scaled, seeds, results, report


def cmd_simulate(args):
    config = _load(args.config)
    grid = None
    if args.dt:
        grid = np.arange(0.0, args.horizon + 0.5 * args.dt, args.dt)
    scaled, seeds, results, report = _simulate(config, args.n, args, args.trace, grid)
    if args.out and str(args.out).endswith(".csv"):
        _emit(report.to_csv(), args.out)
    else:
        payload = {
            "n": scaled.n,
            "pool_sizes": list(scaled.pool_sizes),
            "policy": make_policy(args.policy).name,
            "horizon": args.horizon,
            "warmup": args.warmup,
            "seeds": seeds,
            "counters": [r.counters for r in results],
            "report": report.to_dict(),
        }
        _emit(json.dumps(payload, indent=2, sort_keys=True) + "\n", args.out)
    if args.trace:
        buf = io.StringIO()
        results[0].trace.to_csv(buf)
        target = _sibling(args.out, ".trace.csv")
        if target:
            target.write_text(buf.getvalue())
        else:
            sys.stdout.write(buf.getvalue())
    if grid is not None:
        buf = io.StringIO()
        results[0].observers[0].to_csv(buf)
        target = _sibling(args.out, ".fluid.csv")
        if target:
            target.write_text(buf.getvalue())
        else:
            sys.stdout.write(buf.getvalue())
    return 0


def cmd_couple(args):
    config = _load(args.config)
    scaled = scale(config, args.n)
    large0 = [
        min(args.large_init, int(config.pools[j].buffer) if not config.pools[j].unbounded else args.large_init)
        for j in scaled.pool_of
    ]
    total_events = 0
    total_viol = 0
    lines = []
    for i in range(args.seeds):
        seed = seed_plan(args.root_seed, i)
        rep = run_coupled(scaled, config, [0] * scaled.n, large0, args.horizon, seed)
        total_events += rep.events
        total_viol += rep.violations
        lines.append(f"seed={seed} events={rep.events} violations={rep.violations} "
                     f"verdict={'ok' if rep.ok else 'VIOLATION'}")
    summary = {"seeds": args.seeds, "events": total_events, "violations": total_viol}
    text = "\n".join(lines) + "\n" + json.dumps(summary, sort_keys=True) + "\n"
    _emit(text, args.out)
    return 0 if total_viol == 0 else 2


def cmd_sweep(args):
    config = _load(args.config)
    try:
        n_list = [int(v) for v in args.n_list.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"--n-list must be comma-separated integers, got {args.n_list!r}")
    if not n_list:
        raise UsageError("--n-list must not be empty")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["n", "policy", "pool", "metric", "value", "ci"])
    name = make_policy(args.policy).name
    for n in n_list:
        _, _, _, rep = _simulate(config, n, args)
        for j in range(len(config.pools)):
            values = {
                "waiting_prob": (rep.pool_waiting[j], rep.pool_waiting_ci[j]),
                "blocking_prob": (rep.pool_blocking[j], rep.pool_blocking_ci[j]),
            }
            for k in (1, 2, 3):
                ci = rep.tail_ci[j][k] if k < len(rep.tail_ci[j]) else 0.0
                values[f"p{k}"] = (rep.p(k, j), ci)
            for metric in SWEEP_METRICS:
                v, ci = values[metric]
                w.writerow([n, name, j, metric, repr(float(v)), repr(float(ci))])
    _emit(buf.getvalue(), args.out)
    return 0


COMMANDS = {
    "equilibrium": cmd_equilibrium,
    "fluid": cmd_fluid,
    "simulate": cmd_simulate,
    "couple": cmd_couple,
    "sweep": cmd_sweep,
}

_CONFIG_ERRORS = (
    errors.ValidationError,
    errors.ConfigError,
    errors.NotSubcritical,
    errors.NTooSmall,
    errors.NoIdleMass,
    errors.InsufficientBatches,
    errors.InitialStateNotDominated,
)
_INTERNAL_ERRORS = (
    errors.DominanceViolation,
    errors.InvariantViolation,
    errors.PhantomDeparture,
    errors.LedgerInconsistent,
    errors.InvalidState,
)


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(str(exc).rstrip(), file=sys.stderr)
        return 1
    except _INTERNAL_ERRORS as exc:
        print(f"internal invariant violated: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    except _CONFIG_ERRORS as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError, KeyError, TypeError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
