"""Benchmark harness: the chain scenario, sweeps, breakdowns, CSV/SVG output.

The benchmark plant is the two-state chain. Costs are all-ones on the
horizon blocks (block 0 carries no cost; it is pinned to the measured
state), inputs are penalized on every input block, and the first state of
every subsystem is kept inside [-0.2, 1.2] on blocks 1..horizon-1.
Initial conditions are sampled per subsystem: first state uniform in
[0, 1], remaining states uniform in [-0.5, 0.5].
"""

from __future__ import annotations

import csv
import io
import json
import math
import sys
from dataclasses import dataclass, field, replace

import numpy as np

from .admm import dlmpc_simulate
from .errors import ConfigError, LocalityMpcError
from .sls_core import ProblemSpec
from .strategies import STRATEGY_NAMES, ExecStrategy
from .system_model import SubsystemPartition, build_chain_network, build_locality_mask

CSV_HEADER = ("strategy", "N", "T", "d", "seed", "repeat", "phase", "wall_ms",
              "iters_total", "host_syncs_per_iter", "cost", "converged")

STATE_BAND = (-0.2, 1.2)

DEFAULT_SWEEP_VALUES = {"N": [10, 25, 50, 100], "T": [3, 5, 7, 10], "d": [1, 2, 3, 4]}


def make_benchmark_spec(system_or_partition, horizon: int, rho: float = 1.0,
                        eps: float = 1e-4, max_iters: int = 5000,
                        bounded: bool = True) -> ProblemSpec:
    """Unit-weight costs and the first-state box band of the chain benchmark.

    With `bounded` off, all bounds are infinite (the configuration the
    dense reference solve requires).
    """
    part = getattr(system_or_partition, "partition", system_or_partition)
    n_x, n_u, t = part.n_states, part.n_inputs, int(horizon)
    state_weights = np.zeros((n_x, t))
    state_weights[:, 1:t - 1] = 1.0
    terminal = np.ones(n_x)
    input_weights = np.ones((n_u, t - 1))
    state_lo = np.full((n_x, t), -np.inf)
    state_hi = np.full((n_x, t), np.inf)
    if bounded:
        firsts = [a for a, _ in part.state_ranges]
        state_lo[firsts, 1:] = STATE_BAND[0]
        state_hi[firsts, 1:] = STATE_BAND[1]
    input_lo = np.full((n_u, t - 1), -np.inf)
    input_hi = np.full((n_u, t - 1), np.inf)
    return ProblemSpec(t, state_weights, input_weights, terminal,
                       state_lo, state_hi, input_lo, input_hi,
                       rho=rho, eps_pri=eps, eps_dual=eps, max_iters=max_iters)


def sample_initial_state(partition: SubsystemPartition, rng) -> np.ndarray:
    """Seeded initial condition, strictly inside the first-state band."""
    x0 = np.empty(partition.n_states)
    for a, b in partition.state_ranges:
        x0[a] = rng.uniform(0.0, 1.0)
        for s in range(a + 1, b):
            x0[s] = rng.uniform(-0.5, 0.5)
    return x0


def first_state_indices(partition: SubsystemPartition):
    return [a for a, _ in partition.state_ranges]


@dataclass(frozen=True)
class Scenario:
    """One benchmark run: plant size, horizon, locality, solver settings."""

    n: int = 10
    horizon: int = 5
    d: int = 2
    t_sim: int = 20
    seed: int = 1
    strategy: str = "patch-local"
    workers: int | None = None
    rho: float = 1.0
    eps: float = 1e-4
    max_iters: int = 5000
    coupling_radius: int = 1
    bounded: bool = True
    warm_start: bool = True


def run_scenario(scn: Scenario, audit: bool = False):
    """Build the chain benchmark and run the closed loop; returns (traj, report)."""
    system = build_chain_network(scn.n, scn.coupling_radius)
    spec = make_benchmark_spec(system, scn.horizon, rho=scn.rho, eps=scn.eps,
                               max_iters=scn.max_iters, bounded=scn.bounded)
    mask = build_locality_mask(system, scn.d, scn.horizon)
    rng = np.random.default_rng(scn.seed)
    x0 = sample_initial_state(system.partition, rng)
    strategy = ExecStrategy(scn.strategy, scn.workers)
    traj, report = dlmpc_simulate(system, spec, mask, x0, scn.t_sim, strategy,
                                  warm_start=scn.warm_start, audit=audit)
    report.scenario.update({"N": scn.n, "T": scn.horizon, "d": scn.d,
                            "seed": scn.seed, "coupling_radius": scn.coupling_radius,
                            "max_iters": scn.max_iters})
    return traj, report


# ---------------------------------------------------------------------------
# Sweep configuration files: `key = value` lines, `#` comments.
# ---------------------------------------------------------------------------

@dataclass
class SweepConfig:
    vary: str = "N"
    values: list = field(default_factory=lambda: list(DEFAULT_SWEEP_VALUES["N"]))
    n: int = 10
    horizon: int = 5
    d: int = 2
    t_sim: int = 20
    strategies: list = field(default_factory=lambda: list(STRATEGY_NAMES))
    repeats: int = 10
    seed: int = 1
    out: str | None = None


_CONFIG_KEYS = ("vary", "values", "n", "t_horizon", "d", "t_sim",
                "strategies", "repeats", "seed", "out")


def parse_config(path: str) -> SweepConfig:
    """Parse a sweep configuration file, rejecting anything unrecognized."""
    cfg = SweepConfig()
    explicit_values = False
    with open(path, encoding="utf-8") as fh:
        for ln, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"malformed line {ln}: expected key = value", ln)
            key, _, value = (part.strip() for part in line.partition("="))
            if key not in _CONFIG_KEYS:
                raise ConfigError(f"unknown key {key} at line {ln}", ln)
            try:
                if key == "vary":
                    if value not in ("N", "T", "d"):
                        raise ConfigError(f"unknown parameter {value} at line {ln}", ln)
                    cfg.vary = value
                elif key == "values":
                    cfg.values = [int(v.strip()) for v in value.split(",") if v.strip()]
                    explicit_values = True
                elif key == "strategies":
                    names = ([s.strip() for s in value.split(",") if s.strip()]
                             if value != "all" else list(STRATEGY_NAMES))
                    for name in names:
                        if name not in STRATEGY_NAMES:
                            raise ConfigError(f"unknown strategy {name} at line {ln}", ln)
                    cfg.strategies = names
                elif key == "t_horizon":
                    cfg.horizon = int(value)
                elif key == "out":
                    cfg.out = value
                else:
                    setattr(cfg, key, int(value))
            except ValueError:
                raise ConfigError(f"invalid value for {key} at line {ln}", ln) from None
    if not explicit_values:
        cfg.values = list(DEFAULT_SWEEP_VALUES[cfg.vary])
    if not cfg.values:
        raise ConfigError("values must be nonempty")
    if cfg.repeats < 1:
        raise ConfigError("repeats must be >= 1")
    return cfg


def scenario_for_sweep_point(cfg: SweepConfig, value: int, strategy: str,
                             repeat: int, workers=None, **overrides) -> Scenario:
    fixed = {"n": cfg.n, "horizon": cfg.horizon, "d": cfg.d}
    fixed[{"N": "n", "T": "horizon", "d": "d"}[cfg.vary]] = value
    return Scenario(n=fixed["n"], horizon=fixed["horizon"], d=fixed["d"],
                    t_sim=cfg.t_sim, seed=cfg.seed + repeat, strategy=strategy,
                    workers=workers, **overrides)


# ---------------------------------------------------------------------------
# CSV emission (shared schema for sweep and breakdown).
# ---------------------------------------------------------------------------

def format_csv(rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    writer.writerows(rows)
    return buf.getvalue()


def csv_row(scn: Scenario, repeat: int, phase: str, wall_ms: float,
            iters_total: int, host_syncs: int, cost: float, converged: bool):
    return (scn.strategy, scn.n, scn.horizon, scn.d, scn.seed, repeat, phase,
            f"{wall_ms:.3f}", iters_total, host_syncs,
            "nan" if math.isnan(cost) else f"{cost:.10g}",
            "true" if converged else "false")


def sweep_rows(cfg: SweepConfig, workers=None, audit: bool = True,
               progress=None):
    """All CSV rows of a sweep; failures become rows, not aborts."""
    rows = []
    for value in cfg.values:
        for strategy in cfg.strategies:
            for rep in range(cfg.repeats):
                scn = scenario_for_sweep_point(cfg, value, strategy, rep, workers)
                try:
                    _, report = run_scenario(scn, audit=audit)
                    rows.append(csv_row(scn, rep, "total", report.total_wall_ms,
                                        report.iters_total,
                                        report.ledger.host_syncs_per_iter,
                                        report.closed_loop_cost, True))
                    rows.append(csv_row(scn, rep, "mean_per_mpc_iter",
                                        report.mean_per_mpc_step_ms(),
                                        report.iters_total,
                                        report.ledger.host_syncs_per_iter,
                                        report.closed_loop_cost, True))
                except LocalityMpcError:
                    rows.append(csv_row(scn, rep, "total", 0.0, 0, -1,
                                        float("nan"), False))
                if progress is not None:
                    progress(scn)
    return rows


def breakdown_rows(sizes, strategies, base: Scenario, workers=None):
    """Per-phase CSV rows (plus a total row) for each (size, strategy)."""
    from .report import PHASES

    rows = []
    for n in sizes:
        for strategy in strategies:
            scn = replace(base, n=n, strategy=strategy, workers=workers)
            _, report = run_scenario(scn, audit=False)
            for phase in PHASES:
                rows.append(csv_row(scn, 0, phase, report.phase_times_ms[phase],
                                    report.iters_total,
                                    report.ledger.host_syncs_per_iter,
                                    report.closed_loop_cost, True))
            rows.append(csv_row(scn, 0, "total", report.total_wall_ms,
                                report.iters_total,
                                report.ledger.host_syncs_per_iter,
                                report.closed_loop_cost, True))
    return rows


# ---------------------------------------------------------------------------
# SVG emission (matplotlib; CSV stays the canonical output).
# ---------------------------------------------------------------------------

def render_sweep_svg(rows, cfg: SweepConfig, path: str):
    import matplotlib
    matplotlib.use("svg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4))
    for strategy in cfg.strategies:
        xs, ys = [], []
        for value in cfg.values:
            walls = [float(r[7]) for r in rows
                     if r[0] == strategy and r[6] == "total" and r[11] == "true"
                     and _varied_of(r, cfg.vary) == value]
            if walls:
                xs.append(value)
                ys.append(sum(walls) / len(walls))
        ax.plot(xs, ys, marker="o", label=strategy)
    ax.set_xlabel(cfg.vary)
    ax.set_ylabel("total wall time [ms]")
    ax.set_yscale("log")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)


def _varied_of(row, vary):
    return int(row[{"N": 1, "T": 2, "d": 3}[vary]])


def render_breakdown_svg(rows, sizes, strategies, path: str):
    import matplotlib
    matplotlib.use("svg")
    import matplotlib.pyplot as plt

    from .report import PHASES

    fig, axes = plt.subplots(1, len(sizes), figsize=(5 * len(sizes), 4), squeeze=False)
    for ax, n in zip(axes[0], sizes):
        bottoms = np.zeros(len(strategies))
        for phase in PHASES:
            heights = []
            for strategy in strategies:
                vals = [float(r[7]) for r in rows
                        if r[0] == strategy and int(r[1]) == n and r[6] == phase]
                heights.append(vals[0] if vals else 0.0)
            ax.bar(strategies, heights, bottom=bottoms, label=phase)
            bottoms += np.array(heights)
        ax.set_title(f"N = {n}")
        ax.set_ylabel("wall time [ms]")
        ax.tick_params(axis="x", rotation=30)
    axes[0][-1].legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)


# ---------------------------------------------------------------------------
# Output helpers shared by the CLI commands.
# ---------------------------------------------------------------------------

def write_text(text: str, path: str | None):
    if path is None or path == "-":
        sys.stdout.write(text)
    else:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)


def error_record(err: Exception) -> str:
    record = {"error": {"type": type(err).__name__, "message": str(err)}}
    step = getattr(err, "step", None)
    if step is not None:
        record["error"]["step"] = step
    return json.dumps(record, indent=2) + "\n"


def run_report_json(results) -> str:
    """JSON document for one or more (scenario, trajectory, report) triples."""
    docs = []
    for traj, report, band in results:
        doc = report.as_dict()
        doc["trajectory"] = {
            "states": traj.states.tolist(),
            "inputs": traj.inputs.tolist(),
        }
        doc["first_state_band"] = band
        docs.append(doc)
    return json.dumps(docs if len(docs) > 1 else docs[0], indent=2) + "\n"
