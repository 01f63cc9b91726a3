"""Command-line benchmark harness.

Subcommands: `run` (one closed-loop scenario, JSON report), `sweep`
(parameter sweep to CSV), `breakdown` (per-phase timing CSV), `verify`
(invariant suite). Exit codes: 0 success, 2 argument or configuration
error, 3 infeasible or non-converged run, 4 verification failure.
"""

from __future__ import annotations

import argparse
import sys

from . import bench
from .errors import ConfigError, LocalityMpcError
from .strategies import STRATEGY_NAMES

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_INFEASIBLE = 3
EXIT_VERIFY_FAILED = 4

_STRATEGY_CHOICES = STRATEGY_NAMES + ("all",)


def _add_scenario_flags(sub, n_as_list=False):
    if n_as_list:
        sub.add_argument("--n", default="10",
                         help="network sizes, comma separated (default 10)")
    else:
        sub.add_argument("--n", type=int, default=10, help="network size (default 10)")
    sub.add_argument("--t-horizon", type=int, default=5, help="MPC horizon (default 5)")
    sub.add_argument("--d", type=int, default=2, help="locality hop radius (default 2)")
    sub.add_argument("--t-sim", type=int, default=20,
                     help="closed-loop steps (default 20)")
    sub.add_argument("--strategy", choices=_STRATEGY_CHOICES, default="patch-local")
    sub.add_argument("--workers", type=int, default=None,
                     help="worker pool size (default: LOCALITY_MPC_WORKERS or CPU count)")
    sub.add_argument("--seed", type=int, default=1)
    sub.add_argument("--repeats", type=int, default=10)
    sub.add_argument("--rho", type=float, default=1.0)
    sub.add_argument("--eps", type=float, default=1e-4,
                     help="primal and dual tolerance (infinity norm)")
    sub.add_argument("--max-iter", type=int, default=5000)
    sub.add_argument("--coupling-radius", type=int, default=1)
    sub.add_argument("--out", default=None, help="output path (default stdout)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="locality-mpc",
        description="Locality-aware distributed MPC benchmark harness.")
    subs = parser.add_subparsers(dest="command", required=True)

    run = subs.add_parser("run", help="run one closed-loop scenario")
    _add_scenario_flags(run)
    run.set_defaults(func=cmd_run)

    sweep = subs.add_parser("sweep", help="sweep N, T, or d and emit CSV")
    _add_scenario_flags(sweep)
    sweep.add_argument("--config", default=None,
                       help="sweep configuration file (key = value lines)")
    sweep.add_argument("--svg", default=None, help="optional SVG chart path")
    sweep.set_defaults(func=cmd_sweep)

    breakdown = subs.add_parser("breakdown", help="per-phase runtime CSV")
    _add_scenario_flags(breakdown, n_as_list=True)
    breakdown.add_argument("--svg", default=None, help="optional SVG chart path")
    breakdown.set_defaults(func=cmd_breakdown)

    verify = subs.add_parser("verify", help="run the invariant suite")
    verify.add_argument("--quick", action="store_true",
                        help="smaller subset, completes in under a minute")
    verify.add_argument("--inject-fault", action="store_true",
                        help="test hook: perturb a solution so the audit must fail")
    verify.add_argument("--workers", type=int, default=None)
    verify.set_defaults(func=cmd_verify)
    return parser


def _scenario_from_args(args, strategy: str) -> bench.Scenario:
    return bench.Scenario(n=args.n, horizon=args.t_horizon, d=args.d,
                          t_sim=args.t_sim, seed=args.seed, strategy=strategy,
                          workers=args.workers, rho=args.rho, eps=args.eps,
                          max_iters=args.max_iter,
                          coupling_radius=args.coupling_radius)


def cmd_run(args) -> int:
    strategies = list(STRATEGY_NAMES) if args.strategy == "all" else [args.strategy]
    results = []
    try:
        for strategy in strategies:
            scn = _scenario_from_args(args, strategy)
            traj, report = bench.run_scenario(scn, audit=True)
            system = bench.build_chain_network(scn.n, scn.coupling_radius)
            firsts = traj.states[:, bench.first_state_indices(system.partition)]
            band = {"min": float(firsts.min()), "max": float(firsts.max())}
            results.append((traj, report, band))
    except LocalityMpcError as err:
        bench.write_text(bench.error_record(err), args.out)
        return EXIT_INFEASIBLE
    bench.write_text(bench.run_report_json(results), args.out)
    return EXIT_OK


def cmd_sweep(args) -> int:
    try:
        if args.config:
            cfg = bench.parse_config(args.config)
        else:
            cfg = bench.SweepConfig(n=args.n, horizon=args.t_horizon, d=args.d,
                                    t_sim=args.t_sim, repeats=args.repeats,
                                    seed=args.seed)
            if args.strategy != "all":
                cfg.strategies = [args.strategy]
    except ConfigError as err:
        sys.stderr.write(f"config error: {err}\n")
        return EXIT_USAGE
    rows = bench.sweep_rows(cfg, workers=args.workers)
    bench.write_text(bench.format_csv(rows), args.out or cfg.out)
    if args.svg:
        bench.render_sweep_svg(rows, cfg, args.svg)
    if any(r[11] == "false" for r in rows):
        return EXIT_INFEASIBLE
    return EXIT_OK


def cmd_breakdown(args) -> int:
    try:
        sizes = [int(v) for v in str(args.n).split(",") if v.strip()]
    except ValueError:
        sys.stderr.write(f"invalid --n list: {args.n!r}\n")
        return EXIT_USAGE
    strategies = list(STRATEGY_NAMES) if args.strategy == "all" else [args.strategy]
    base = _scenario_from_args(args, strategies[0])
    base = bench.replace(base, n=sizes[0])
    try:
        rows = bench.breakdown_rows(sizes, strategies, base, workers=args.workers)
    except LocalityMpcError as err:
        bench.write_text(bench.error_record(err), args.out)
        return EXIT_INFEASIBLE
    bench.write_text(bench.format_csv(rows), args.out)
    if args.svg:
        bench.render_breakdown_svg(rows, sizes, strategies, args.svg)
    return EXIT_OK


def cmd_verify(args) -> int:
    from .verify import run_verification

    results = run_verification(quick=args.quick, inject_fault=args.inject_fault,
                               workers=args.workers)
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return EXIT_VERIFY_FAILED if failed else EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
