"""Self-contained verification suite behind the `verify` subcommand.

Each check is a small, independently runnable probe of an invariant the
package promises: analytical support bounds, schedule-constant ledgers,
bitwise agreement across strategies and worker counts, agreement with the
dense reference solve, fixed-point audits, closed-loop constraint
satisfaction, padding integrity, the phase breakdown structure, and (on
parallel hosts) the sequential-versus-patch speedup.
"""

from __future__ import annotations

import os
import time
from dataclasses import dataclass

import numpy as np

from .admm import (admm_solve, closed_loop_cost, dlmpc_simulate, verify_fixed_point)
from .bench import (Scenario, SweepConfig, first_state_indices, make_benchmark_spec,
                    run_scenario, sample_initial_state, sweep_rows)
from .errors import LocalityMpcError
from .oracle import simulate_with_oracle
from .sls_core import (LayoutTables, PhiTriple, build_dynamics_operator,
                       precompute_column_solvers, precompute_row_data, row_index_map)
from .strategies import (Executor, ExecStrategy, STRATEGY_NAMES, build_patches)
from .system_model import build_chain_network, build_locality_mask, lemma1_bounds

EXPECTED_HOST_SYNCS = {"sequential": 0, "naive": 4, "padded": 4,
                       "fused": 1, "patch-local": 0}


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float


def _check(name):
    def deco(fn):
        fn.check_name = name
        return fn
    return deco


@_check("longest-vector bounds")
def check_lemma_bounds(quick: bool, workers=None) -> str:
    sizes = (3, 10, 25) if quick else range(3, 51)
    ds = range(0, 4) if quick else range(0, 5)
    horizons = (2, 5) if quick else range(2, 11)
    for n in sizes:
        system = build_chain_network(n)
        for d in ds:
            for t in horizons:
                mask = build_locality_mask(system, d, t)
                row_bound, col_bound = lemma1_bounds(2, 2, d, t)
                if mask.d_row > row_bound or mask.d_col > col_bound:
                    raise AssertionError(
                        f"N={n} d={d} T={t}: ({mask.d_row}, {mask.d_col}) "
                        f"exceeds ({row_bound}, {col_bound})")
    return "supports within analytical bounds on all swept chains"


@_check("ledger exactness")
def check_ledger_exactness(quick: bool, workers=None) -> str:
    for strategy in STRATEGY_NAMES:
        scn = Scenario(n=4, horizon=3, d=1, t_sim=2, seed=3,
                       strategy=strategy, workers=workers)
        _, report = run_scenario(scn)
        led = report.ledger
        if led.host_syncs_per_iter != EXPECTED_HOST_SYNCS[strategy]:
            raise AssertionError(f"{strategy}: host_syncs_per_iter = "
                                 f"{led.host_syncs_per_iter}")
        if strategy == "patch-local" and led.flag_reads_per_iter != 1:
            raise AssertionError("patch-local: flag_reads_per_iter != 1")
        if not led.counts_consistent():
            raise AssertionError(f"{strategy}: event totals drifted from the "
                                 f"per-iteration constants")
    return "host syncs (0/4/4/1/0), patch flag reads, and event totals all exact"


@_check("cross-strategy determinism")
def check_determinism(quick: bool, workers=None) -> str:
    seeds = range(1, 3) if quick else range(1, 11)
    n = 6 if quick else 10
    for seed in seeds:
        outcomes = []
        for strategy in STRATEGY_NAMES:
            scn = Scenario(n=n, horizon=5, d=2, t_sim=20, seed=seed,
                           strategy=strategy, workers=workers)
            traj, report = run_scenario(scn)
            outcomes.append((traj, report))
        ref_traj, ref_report = outcomes[0]
        for traj, report in outcomes[1:]:
            if not (np.array_equal(ref_traj.states, traj.states)
                    and np.array_equal(ref_traj.inputs, traj.inputs)):
                raise AssertionError(f"seed {seed}: trajectories differ "
                                     f"({report.scenario['strategy']})")
            if report.closed_loop_cost != ref_report.closed_loop_cost:
                raise AssertionError(f"seed {seed}: costs differ")
            if report.per_step_iters != ref_report.per_step_iters:
                raise AssertionError(f"seed {seed}: iteration counts differ")
    return f"{len(list(seeds))} seeds x 5 strategies bitwise identical"


@_check("worker-count independence")
def check_worker_independence(quick: bool, workers=None) -> str:
    results = []
    for count in (1, 2, 8):
        scn = Scenario(n=6, horizon=4, d=1, t_sim=5, seed=5,
                       strategy="patch-local", workers=count)
        traj, _ = run_scenario(scn)
        results.append(traj)
    for traj in results[1:]:
        if not np.array_equal(results[0].states, traj.states):
            raise AssertionError("trajectories depend on worker count")
    return "identical results with 1, 2, and 8 workers"


@_check("reference-solve equivalence")
def check_oracle_equivalence(quick: bool, workers=None) -> str:
    grid = [(2, 3, 1), (3, 4, 2)] if quick else [
        (n, t, d) for n in (2, 3, 4) for t in (3, 4) for d in (1, 2)]
    worst = 0.0
    for n, t, d in grid:
        system = build_chain_network(n)
        spec = make_benchmark_spec(system, t, eps=1e-6, bounded=False)
        mask = build_locality_mask(system, d, t)
        x0 = sample_initial_state(system.partition, np.random.default_rng(11 + n))
        traj, _ = dlmpc_simulate(system, spec, mask, x0, 8,
                                 ExecStrategy("fused", workers))
        ref = simulate_with_oracle(system, spec, mask, x0, 8)
        cost = closed_loop_cost(traj)
        ref_cost = closed_loop_cost(ref)
        rel = abs(cost - ref_cost) / max(1.0, ref_cost)
        worst = max(worst, rel)
        if rel > 1e-4:
            raise AssertionError(f"N={n} T={t} d={d}: relative gap {rel:.2e}")
    return f"closed-loop cost within 1e-4 of the dense solve (worst {worst:.2e})"


@_check("fixed-point audit")
def check_fixed_point(quick: bool, workers=None, inject_fault: bool = False) -> str:
    system = build_chain_network(6)
    spec = make_benchmark_spec(system, 4)
    mask = build_locality_mask(system, 1, 4)
    tables = LayoutTables(mask)
    operator = build_dynamics_operator(system, 4)
    col_solvers = precompute_column_solvers(operator, mask)
    metas = row_index_map(system.partition, 4, spec)
    x0 = sample_initial_state(system.partition, np.random.default_rng(2))
    row_data = precompute_row_data(x0, spec, tables, metas)
    triple = PhiTriple(tables)
    admm_solve(row_data, col_solvers, triple, spec, ExecStrategy("sequential"))
    if inject_fault:
        # Test hook: corrupt one permitted cell; the audit must notice.
        r = int(np.nonzero(tables.row_valid[:, 0])[0][0])
        triple.phi_r[r, 0] += 0.1
    report = verify_fixed_point(triple, row_data, operator, spec)
    if not report.passed:
        raise AssertionError(
            f"audit residuals {report.dynamics_residual:.2e} / "
            f"{report.resolve_residual:.2e} / {report.consensus_gap:.2e} "
            f"exceed {report.threshold:.1e}")
    return (f"residuals {report.dynamics_residual:.1e} / "
            f"{report.resolve_residual:.1e} / {report.consensus_gap:.1e} "
            f"within {report.threshold:.0e}")


@_check("closed-loop state band")
def check_constraints(quick: bool, workers=None) -> str:
    seeds = range(1, 4) if quick else range(1, 11)
    lo, hi = -0.2 - 1e-6, 1.2 + 1e-6
    for seed in seeds:
        scn = Scenario(n=10, horizon=5, d=2, t_sim=20, seed=seed,
                       strategy="patch-local", workers=workers)
        traj, _ = run_scenario(scn)
        firsts = traj.states[:, first_state_indices(build_chain_network(10).partition)]
        if firsts.min() < lo or firsts.max() > hi:
            raise AssertionError(f"seed {seed}: first states reached "
                                 f"[{firsts.min():.4f}, {firsts.max():.4f}]")
    return "all first-state components stayed within [-0.2, 1.2]"


@_check("support containment")
def check_support_containment(quick: bool, workers=None) -> str:
    iterations = 20 if quick else 100
    system = build_chain_network(5)
    spec = make_benchmark_spec(system, 4)
    mask = build_locality_mask(system, 1, 4)
    tables = LayoutTables(mask)
    operator = build_dynamics_operator(system, 4)
    col_solvers = precompute_column_solvers(operator, mask)
    metas = row_index_map(system.partition, 4, spec)
    x0 = sample_initial_state(system.partition, np.random.default_rng(9))
    row_data = precompute_row_data(x0, spec, tables, metas)
    triple = PhiTriple(tables)
    from .admm import AdmmWorkspace
    with Executor(ExecStrategy("fused", workers)) as executor:
        ws = AdmmWorkspace(triple, col_solvers, spec,
                           patches=build_patches(tables), row_data=row_data)
        for _ in range(iterations):
            executor.run_iteration(ws)
            if triple.padding_leak() != 0.0:
                raise AssertionError("mass leaked outside the mask")
            if triple.layout_disagreement() != 0.0:
                raise AssertionError("row and column layouts disagree")
    return f"{iterations} iterations with zero out-of-support mass in both layouts"


@_check("phase breakdown structure")
def check_breakdown(quick: bool, workers=None) -> str:
    from .report import PHASES

    scn = Scenario(n=10, horizon=5, d=2, t_sim=20, seed=1,
                   strategy="sequential", workers=workers)
    _, report = run_scenario(scn)
    missing = [p for p in PHASES if p not in report.phase_times_ms]
    if missing:
        raise AssertionError(f"missing phases: {missing}")
    total = report.total_wall_ms
    phase_sum = sum(report.phase_times_ms.values())
    if not 0.95 * total <= phase_sum <= total * 1.0 + 1e-9:
        raise AssertionError(f"phases sum to {phase_sum:.1f} ms of {total:.1f} ms total")
    largest = max(report.phase_times_ms, key=report.phase_times_ms.get)
    if largest != "optimize":
        raise AssertionError(f"largest sequential phase is {largest}, not optimize")
    return "four phases (precompute split), sum within 5% of total, optimize largest"


@_check("patch-local speedup")
def check_speedup(quick: bool, workers=None) -> str:
    if quick:
        return "skipped in quick mode"
    threads = os.cpu_count() or 1
    if threads < 8:
        return f"skipped: host has {threads} hardware threads (< 8)"
    times = {}
    for strategy in ("sequential", "patch-local"):
        scn = Scenario(n=50, horizon=5, d=1, t_sim=20, seed=1,
                       strategy=strategy, workers=workers)
        _, report = run_scenario(scn)
        times[strategy] = report.phase_times_ms["optimize"]
    ratio = times["sequential"] / times["patch-local"]
    if times["patch-local"] >= times["sequential"]:
        raise AssertionError(f"patch-local optimize {times['patch-local']:.0f} ms "
                             f"not below sequential {times['sequential']:.0f} ms")
    return (f"optimize phase: sequential {times['sequential']:.0f} ms, "
            f"patch-local {times['patch-local']:.0f} ms ({ratio:.1f}x)")


@_check("scaling shape")
def check_scaling(quick: bool, workers=None) -> str:
    if quick:
        return "skipped in quick mode"
    cfg = SweepConfig(vary="N", values=[10, 25, 50, 100], repeats=1, t_sim=5)
    rows = sweep_rows(cfg, workers=workers, audit=False)
    inversions = {}
    for strategy in cfg.strategies:
        walls = []
        for value in cfg.values:
            match = [float(r[7]) for r in rows
                     if r[0] == strategy and int(r[1]) == value and r[6] == "total"]
            walls.append(match[0])
        inversions[strategy] = sum(1 for a, b in zip(walls, walls[1:]) if b < a)
    bad = {s: k for s, k in inversions.items() if k > 1}
    if bad:
        raise AssertionError(f"runtime not monotone in N (inversions: {bad})")
    return "total runtime grows with N for every strategy (<= 1 inversion allowed)"


ALL_CHECKS = (check_lemma_bounds, check_ledger_exactness, check_determinism,
              check_worker_independence, check_oracle_equivalence,
              check_fixed_point, check_constraints, check_support_containment,
              check_breakdown, check_speedup, check_scaling)


def run_verification(quick: bool = False, inject_fault: bool = False,
                     workers=None, out=print) -> list:
    """Run every check, print one pass/fail line each, return the results."""
    results = []
    for fn in ALL_CHECKS:
        start = time.perf_counter()
        kwargs = {"quick": quick, "workers": workers}
        if fn is check_fixed_point:
            kwargs["inject_fault"] = inject_fault
        try:
            detail = fn(**kwargs)
            passed = True
        except (AssertionError, LocalityMpcError) as err:
            detail = str(err)
            passed = False
        elapsed = time.perf_counter() - start
        results.append(CheckResult(fn.check_name, passed, detail, elapsed))
        out(f"[{'PASS' if passed else 'FAIL'}] {fn.check_name:<28s} "
            f"({elapsed:6.2f}s)  {detail}")
    return results
