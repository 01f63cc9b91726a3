"""Execution strategies: how the four solver stages are scheduled.

Five schedules are modeled. `sequential` is the single-threaded baseline
with no device: it walks work items one at a time. The other four model
device offload over a worker pool, differing in how many kernel launches
and coordinator-visible gathers (host syncs) one iteration costs:

  naive        one kernel per stage (rows / columns / elements / columns),
               a host sync after every kernel;
  padded       the same staging, but every work item addresses the uniform
               padded stride instead of per-item exact sizes, shrinking the
               per-item setup work;
  fused        a row kernel, one host sync carrying the row-to-column
               exchange, then a single combined column kernel running the
               projection, dual update, and convergence check per column;
  patch-local  a single kernel of column patches: each patch recomputes the
               row solves of its member rows into patch-local scratch
               (duplicating rows shared between patches), so no host sync is
               needed at all and the coordinator only reads the reduced
               convergence flag.

A host sync is counted whenever stage outputs must be gathered into the
coordinator-visible layout before the next stage can be scheduled; it is a
property of the schedule and the mask, never of timing. Per-column writes
back into the row layout touch disjoint cells, so fused and patch-local
perform them inside the work items without a gather.

Every stage is a parallel-for over work items with barrier semantics: the
pool splits items into contiguous shards, one per worker, and the stage
completes when all shards have. Work items never write overlapping cells,
and reductions over columns use max, so results are independent of worker
count and dispatch order.
"""

from __future__ import annotations

import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

WORKERS_ENV_VAR = "LOCALITY_MPC_WORKERS"

STRATEGY_NAMES = ("sequential", "naive", "padded", "fused", "patch-local")

# Per-iteration schedule constants: (host syncs, kernel launches, flag reads).
_SCHEDULE_COUNTS = {
    "sequential": (0, 0, 0),
    "naive": (4, 4, 0),
    "padded": (4, 4, 0),
    "fused": (1, 2, 1),
    "patch-local": (0, 1, 1),
}


def default_worker_count() -> int:
    env = os.environ.get(WORKERS_ENV_VAR)
    if env:
        try:
            n = int(env)
            if n >= 1:
                return n
        except ValueError:
            pass
    return os.cpu_count() or 1


@dataclass(frozen=True)
class ExecStrategy:
    """A schedule variant plus the worker pool size it runs on."""

    variant: str
    worker_count: int | None = None   # None: environment override or CPU count

    def __post_init__(self):
        if self.variant not in STRATEGY_NAMES:
            raise ValueError(f"unknown strategy {self.variant!r}; "
                             f"choose from {', '.join(STRATEGY_NAMES)}")
        if self.worker_count is not None and self.worker_count < 1:
            raise ValueError("worker_count must be >= 1")

    def resolved_workers(self) -> int:
        if self.variant == "sequential":
            return 1
        return self.worker_count if self.worker_count is not None else default_worker_count()


@dataclass
class SyncLedger:
    """Communication and timing account of one strategy session.

    The per-iteration counts are schedule constants; the event totals are
    incremented as the schedule runs and must equal count * iterations.
    Stage wall times accumulate per stage name; duplicated row computations
    accumulate across the whole session (patch-local only).
    """

    variant: str
    host_syncs_per_iter: int
    kernel_launches_per_iter: int
    flag_reads_per_iter: int
    iterations: int = 0
    duplicated_row_computations: int = 0
    host_sync_events: int = 0
    kernel_launch_events: int = 0
    flag_read_events: int = 0
    setup_wall_time: float = 0.0
    stage_wall_times: dict = field(default_factory=dict)

    @classmethod
    def for_variant(cls, variant: str) -> "SyncLedger":
        syncs, launches, flags = _SCHEDULE_COUNTS[variant]
        return cls(variant, syncs, launches, flags)

    def add_stage_time(self, stage: str, seconds: float):
        self.stage_wall_times[stage] = self.stage_wall_times.get(stage, 0.0) + seconds

    def counts_consistent(self) -> bool:
        return (self.host_sync_events == self.host_syncs_per_iter * self.iterations
                and self.kernel_launch_events == self.kernel_launches_per_iter * self.iterations
                and self.flag_read_events == self.flag_reads_per_iter * self.iterations)

    def as_dict(self):
        return {
            "variant": self.variant,
            "host_syncs_per_iter": self.host_syncs_per_iter,
            "kernel_launches_per_iter": self.kernel_launches_per_iter,
            "flag_reads_per_iter": self.flag_reads_per_iter,
            "iterations": self.iterations,
            "duplicated_row_computations": self.duplicated_row_computations,
            "setup_wall_time_ms": self.setup_wall_time * 1e3,
            "stage_wall_times_ms": {k: v * 1e3 for k, v in self.stage_wall_times.items()},
        }


@dataclass
class ColumnPatch:
    """The row computations attached to one column's work item."""

    column: int
    member_rows: np.ndarray
    scratch: np.ndarray | None = None   # allocated lazily by the kernel


def build_patches(tables) -> list:
    """One patch per column; members are exactly the column's support rows."""
    return [ColumnPatch(c, tables.cs[c, :tables.col_len[c]].copy())
            for c in range(tables.n_cols)]


def patch_duplication(patches) -> int:
    """Duplicated row computations one patch sweep incurs."""
    total = sum(int(p.member_rows.size) for p in patches)
    distinct = int(np.unique(np.concatenate([p.member_rows for p in patches])).size)
    return total - distinct


def prepare_work_items(strategy: ExecStrategy, tables, ledger: SyncLedger):
    """Model the per-item setup a schedule performs before launching kernels.

    The exact-size schedules (sequential walks ragged items; naive passes
    each thread its own input length) compute and store one size per work
    item. The padded schedules only need the two longest-vector strides.
    The cost lands in the ledger's setup account so the difference stays
    inspectable.
    """
    start = time.perf_counter()
    if strategy.variant in ("sequential", "naive"):
        sizes = ([int(n) for n in tables.row_len], [int(n) for n in tables.col_len])
    else:
        sizes = (int(tables.d_row), int(tables.d_col))
    ledger.setup_wall_time += time.perf_counter() - start
    return sizes


def reduce_convergence(pri_c: np.ndarray, dual_c: np.ndarray,
                       eps_pri: float, eps_dual: float):
    """Order-independent global decision from per-column residual pairs."""
    pri = float(np.max(pri_c))
    dual = float(np.max(dual_c))
    return pri, dual, (pri <= eps_pri and dual <= eps_dual)


class WorkerPool:
    """Static-partition parallel-for with barrier semantics."""

    def __init__(self, worker_count: int):
        self.worker_count = max(1, int(worker_count))
        self._pool = (ThreadPoolExecutor(max_workers=self.worker_count,
                                         thread_name_prefix="locality-mpc")
                      if self.worker_count > 1 else None)

    def parallel_for(self, n_items: int, body):
        """Run body(lo, hi) over contiguous shards covering [0, n_items)."""
        if n_items <= 0:
            return
        if self._pool is None:
            body(0, n_items)
            return
        shard = -(-n_items // self.worker_count)
        futures = [self._pool.submit(body, lo, min(lo + shard, n_items))
                   for lo in range(0, n_items, shard)]
        for f in futures:
            f.result()

    def close(self):
        if self._pool is not None:
            self._pool.shutdown(wait=True)


class Executor:
    """Runs solver iterations under one strategy, keeping the ledger."""

    def __init__(self, strategy: ExecStrategy):
        start = time.perf_counter()
        self.strategy = strategy
        self.workers = strategy.resolved_workers()
        self.pool = WorkerPool(self.workers)
        self.ledger = SyncLedger.for_variant(strategy.variant)
        self.ledger.setup_wall_time += time.perf_counter() - start

    def close(self):
        self.pool.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    # -- ledger-event helpers ---------------------------------------------------------

    def _launch(self, stage_name: str, n_items: int, body):
        start = time.perf_counter()
        self.pool.parallel_for(n_items, body)
        self.ledger.kernel_launch_events += 1
        self.ledger.add_stage_time(stage_name, time.perf_counter() - start)

    def _host_sync(self):
        self.ledger.host_sync_events += 1

    def _flag_read(self):
        self.ledger.flag_read_events += 1

    # -- iteration schedules ------------------------------------------------------------

    def run_iteration(self, ws):
        """One full solver iteration; returns the reduced (pri, dual)."""
        dispatch = {
            "sequential": self._iter_sequential,
            "naive": self._iter_staged,
            "padded": self._iter_staged,
            "fused": self._iter_fused,
            "patch-local": self._iter_patch_local,
        }
        dispatch[self.strategy.variant](ws)
        self.ledger.iterations += 1
        return ws.reduce_residuals()

    def _timed(self, stage_name: str, fn, *args):
        start = time.perf_counter()
        fn(*args)
        self.ledger.add_stage_time(stage_name, time.perf_counter() - start)

    def _iter_sequential(self, ws):
        start = time.perf_counter()
        for r in range(ws.n_rows):
            ws.phi_rows(slice(r, r + 1))
        self.ledger.add_stage_time("phi", time.perf_counter() - start)
        self._timed("exchange", ws.exchange_phi_to_col)
        start = time.perf_counter()
        for c in range(ws.n_cols):
            ws.psi_cols(slice(c, c + 1))
        self.ledger.add_stage_time("psi", time.perf_counter() - start)
        start = time.perf_counter()
        for c in range(ws.n_cols):
            ws.lambda_cols(slice(c, c + 1))
        self.ledger.add_stage_time("lambda", time.perf_counter() - start)
        start = time.perf_counter()
        for c in range(ws.n_cols):
            ws.conv_cols(slice(c, c + 1))
        self.ledger.add_stage_time("conv", time.perf_counter() - start)
        self._timed("exchange", ws.exchange_psi_lam_to_row)

    def _iter_staged(self, ws):
        # naive and padded share the staging; they differ in per-item setup
        # cost, which is a setup-phase property, not an arithmetic one.
        self._launch("phi", ws.n_rows, lambda lo, hi: ws.phi_rows(slice(lo, hi)))
        self._host_sync()
        self._timed("exchange", ws.exchange_phi_to_col)
        self._launch("psi", ws.n_cols, lambda lo, hi: ws.psi_cols(slice(lo, hi)))
        self._host_sync()
        self._launch("lambda", ws.n_elems, lambda lo, hi: ws.lambda_elems(slice(lo, hi)))
        self._host_sync()
        self._launch("conv", ws.n_cols, lambda lo, hi: ws.conv_cols(slice(lo, hi)))
        self._host_sync()
        self._timed("exchange", ws.exchange_psi_lam_to_row)

    def _iter_fused(self, ws):
        self._launch("phi", ws.n_rows, lambda lo, hi: ws.phi_rows(slice(lo, hi)))
        self._host_sync()
        self._timed("exchange", ws.exchange_phi_to_col)
        self._launch("fused", ws.n_cols, lambda lo, hi: ws.fused_cols(slice(lo, hi)))
        self._flag_read()

    def _iter_patch_local(self, ws):
        self._launch("patch", ws.n_cols, lambda lo, hi: ws.patch_cols(slice(lo, hi)))
        # Make the scattered row layout current: a device-side pointer swap,
        # not a data transfer, so it does not count as a host sync.
        ws.swap_row_buffers()
        self._flag_read()
        self.ledger.duplicated_row_computations += ws.duplicated_rows_per_iter
