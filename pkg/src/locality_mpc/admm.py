"""Consensus ADMM over the masked response, and the MPC outer loop.

One iteration runs four stages: a row-parallel explicit solve of the
cost-and-bounds subproblem, a column-parallel projection onto the dynamics
constraint, the elementwise dual update, and a per-column convergence
check. Between the row stage and the column stages sits a layout exchange.
All stage kernels operate on the padded layouts and take arbitrary
row/column batches; batching never changes the arithmetic performed for an
individual row or column, which is what lets every execution strategy
produce bitwise-identical iterates.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import strategies as _strategies
from .errors import NotConverged, RowInfeasible
from .sls_core import (INPUT, ColumnPrecomp, LayoutTables, PhiTriple, ProblemSpec,
                       RowData, RowPrecomp, ascending_dot, build_dynamics_operator,
                       precompute_column_solvers, precompute_row_data, row_index_map)
from .system_model import LocalityMask, LtiSystem


def phi_row_solve(row: RowPrecomp, v: np.ndarray, rho: float = 1.0) -> np.ndarray:
    """Explicit minimizer of the row subproblem.

    Solves  min_p  w*(p.a)^2 + (rho/2)*||p - v||^2  subject to
    lo <= p.a <= hi. Decomposing p along a, the scalar y = p.a has the
    unconstrained optimum rho*(v.a)/(rho + 2*w*||a||^2); clamping it to
    [lo, hi] and lifting back gives the unique constrained minimizer

        p = v + ((clamp(y0) - v.a) / ||a||^2) * a.

    For a == 0 the constraint is vacuous at the origin (feasibility was
    checked at precompute time) and the minimizer is v itself.
    """
    v = np.asarray(v, dtype=np.float64)
    if v.shape != row.a.shape:
        raise ValueError("v must match the row support length")
    if row.a_dot_a == 0.0:
        if row.lo > 0.0 or row.hi < 0.0:
            raise RowInfeasible(row.row)
        return v.copy()
    c = float(ascending_dot(v, row.a))
    y0 = rho * c / (rho + 2.0 * row.weight * row.a_dot_a)
    y = min(max(y0, row.lo), row.hi)
    return v + ((y - c) / row.a_dot_a) * row.a


def psi_column_solve(col: ColumnPrecomp, k: np.ndarray) -> np.ndarray:
    """Minimum-norm correction of k onto the column's dynamics constraint."""
    k = np.asarray(k, dtype=np.float64)
    if k.shape != (col.support.size,):
        raise ValueError("k must match the column support length")
    resid = col.rhs - (col.g * k).sum(axis=1)
    return k + (col.projector * resid).sum(axis=1)


def lambda_update(lam: np.ndarray, phi: np.ndarray, psi: np.ndarray) -> np.ndarray:
    """Dual ascent step lam + (phi - psi), elementwise on a shared support."""
    if not (lam.shape == phi.shape == psi.shape):
        raise ValueError("support mismatch in dual update")
    return lam + (phi - psi)

def column_residuals(triple: PhiTriple, c: int, psi_prev: np.ndarray, rho: float):
    """Per-column residual pair: (max |phi-psi|, rho * max |psi - psi_prev|)."""
    n = int(triple.tables.col_len[c])
    pri = float(np.max(np.abs(triple.phi_c[c, :n] - triple.psi_c[c, :n])))
    dual = rho * float(np.max(np.abs(triple.psi_c[c, :n] - psi_prev[:n])))
    return pri, dual


class _ColumnGroup:
    """Columns sharing a constraint shape, stacked for batched projection.

    Grouping same-shaped columns lets a shard project many columns with a
    handful of array operations. The inner reductions run over each
    column's own contiguous data, so the batched results match the
    column-at-a-time results bit for bit.
    """

    def __init__(self, cols, col_solvers, tables):
        self.cols = np.asarray(cols, dtype=np.int64)      # sorted
        self.g = np.stack([col_solvers[c].g for c in cols])
        self.projector = np.stack([col_solvers[c].projector for c in cols])
        self.rhs = np.stack([col_solvers[c].rhs for c in cols])
        n = self.g.shape[2]
        # Flat positions of each column's first n support cells in the
        # column-major layout (support length is uniform within a group).
        self.cell_flat = (self.cols[:, None] * tables.d_col + np.arange(n)[None, :])


class AdmmWorkspace:
    """Stage kernels bound to one session: iterates, precomputed data, buffers.

    Execution strategies drive these kernels with whatever batching they
    model; the kernels themselves are scheduling-agnostic. The workspace is
    reused across MPC steps (swap in fresh per-step row data with
    `set_row_data`).
    """

    def __init__(self, triple: PhiTriple, col_solvers, spec: ProblemSpec,
                 patches=None, row_data: RowData | None = None):
        self.triple = triple
        self.tables: LayoutTables = triple.tables
        self.col_solvers = col_solvers
        self.rho = float(spec.rho)
        self.n_rows = self.tables.n_rows
        self.n_cols = self.tables.n_cols
        self.n_elems = self.tables.n_elems
        self.pri_c = np.zeros(self.n_cols)
        self.dual_c = np.zeros(self.n_cols)
        self.row_data = row_data
        self.patches = patches
        self._dup_per_iter = None
        self._groups = self._build_column_groups() if col_solvers is not None else []
        if patches is not None:
            self._build_patch_tables()
            # Patch schedules scatter into alternate row buffers while every
            # patch still reads the current ones (the double-buffer device
            # idiom); the coordinator swaps pointers between iterations.
            self._psi_r_next = np.zeros_like(triple.psi_r)
            self._lam_r_next = np.zeros_like(triple.lam_r)

    def set_row_data(self, row_data: RowData):
        self.row_data = row_data

    def _build_column_groups(self):
        by_shape = {}
        for c, pre in enumerate(self.col_solvers):
            by_shape.setdefault(pre.g.shape, []).append(c)
        return [_ColumnGroup(cols, self.col_solvers, self.tables)
                for _, cols in sorted(by_shape.items())]

    def _build_patch_tables(self):
        """Concatenated member tables so one shard handles whole columns at once."""
        tb = self.tables
        members = [p.member_rows for p in self.patches]
        lens = np.array([m.size for m in members])
        self._patch_offsets = np.concatenate([[0], np.cumsum(lens)])
        self._patch_rows = np.concatenate(members)
        self._patch_out_slot = np.concatenate(
            [tb.col_slot_in_row[c, :lens[c]] for c in range(self.n_cols)])
        self._patch_phic_dst = np.concatenate(
            [c * tb.d_col + np.arange(lens[c]) for c in range(self.n_cols)])
        self._patch_owned = tb.owner_col[self._patch_rows] == np.concatenate(
            [np.full(lens[c], c) for c in range(self.n_cols)])

    # -- row stage -----------------------------------------------------------------

    def _phi_compute(self, idx) -> np.ndarray:
        """Row solve for a batch of rows; returns padded values, writes nothing."""
        rd = self.row_data
        t = self.triple
        v = t.psi_r[idx] - t.lam_r[idx]
        a = rd.a_pad[idx]
        ada = rd.a_dot_a[idx]
        c = ascending_dot(v, a)
        y0 = self.rho * c / (self.rho + 2.0 * rd.weight[idx] * ada)
        y = np.clip(y0, rd.lo[idx], rd.hi[idx])
        safe = np.where(ada > 0.0, ada, 1.0)
        scale = np.where(ada > 0.0, (y - c) / safe, 0.0)
        return v + scale[..., None] * a

    def phi_rows(self, idx):
        self.triple.phi_r[idx] = self._phi_compute(idx)

    # -- column stages ---------------------------------------------------------------

    def psi_cols(self, idx):
        """Project a batch of columns, group-batched over equal shapes."""
        t = self.triple
        phi_flat = t.phi_c.ravel()
        lam_flat = t.lam_c.ravel()
        psi_flat = t.psi_c.ravel()
        prev_flat = t.psi_prev_c.ravel()
        for grp, i0, i1 in self._group_ranges(idx):
            cells = grp.cell_flat[i0:i1]
            k = phi_flat[cells] + lam_flat[cells]
            resid = grp.rhs[i0:i1] - (grp.g[i0:i1] * k[:, None, :]).sum(axis=2)
            prev_flat[cells] = psi_flat[cells]
            psi_flat[cells] = k + (grp.projector[i0:i1] * resid[:, None, :]).sum(axis=2)

    def _group_ranges(self, idx):
        if isinstance(idx, slice):
            lo, hi, _ = idx.indices(self.n_cols)
            for grp in self._groups:
                i0 = int(np.searchsorted(grp.cols, lo))
                i1 = int(np.searchsorted(grp.cols, hi))
                if i1 > i0:
                    yield grp, i0, i1
        else:
            wanted = np.asarray(idx)
            for grp in self._groups:
                sel = np.nonzero(np.isin(grp.cols, wanted))[0]
                if sel.size:
                    # contiguous runs keep the stacked views cheap
                    for i0, i1 in _runs(sel):
                        yield grp, i0, i1

    def lambda_cols(self, idx):
        t = self.triple
        t.lam_c[idx] += t.phi_c[idx] - t.psi_c[idx]

    def lambda_elems(self, idx):
        t = self.triple
        flat = self.tables.elem_flat_col[idx]
        t.lam_c.ravel()[flat] += t.phi_c.ravel()[flat] - t.psi_c.ravel()[flat]

    def conv_cols(self, idx):
        t = self.triple
        self.pri_c[idx] = np.abs(t.phi_c[idx] - t.psi_c[idx]).max(axis=-1)
        self.dual_c[idx] = self.rho * np.abs(t.psi_c[idx] - t.psi_prev_c[idx]).max(axis=-1)

    def fused_cols(self, idx):
        """Projection, dual update, and residuals in sequence per column batch,
        then the device-side scatter of the batch back into the row layout."""
        self.psi_cols(idx)
        self.lambda_cols(idx)
        self.conv_cols(idx)
        self.triple.scatter_psi_lam_cols_to_row(_materialize(idx, self.n_cols))

    def patch_cols(self, idx):
        """Full iteration for a batch of column patches.

        The shard recomputes the row solves of every member row of its
        columns in one batch (rows shared between patches appear once per
        patch: the duplicated work), assembles the columns, publishes the
        rows each patch canonically owns, and finishes the column stages
        without any coordinator-side exchange. Reads of the row layout see
        the previous iteration throughout; the scatter lands in the
        alternate buffers, which the coordinator swaps in afterwards.
        """
        t = self.triple
        if not isinstance(idx, slice):
            raise TypeError("patch shards are contiguous column ranges")
        lo, hi, _ = idx.indices(self.n_cols)
        a, b = int(self._patch_offsets[lo]), int(self._patch_offsets[hi])
        rows = self._patch_rows[a:b]
        out = self._phi_compute(rows)
        t.phi_c.ravel()[self._patch_phic_dst[a:b]] = \
            out[np.arange(b - a), self._patch_out_slot[a:b]]
        own = self._patch_owned[a:b]
        t.phi_r[rows[own]] = out[own]
        self.psi_cols(idx)
        self.lambda_cols(idx)
        self.conv_cols(idx)
        self.triple.scatter_psi_lam_cols_to_row(
            _materialize(idx, self.n_cols), self._psi_r_next, self._lam_r_next)

    def swap_row_buffers(self):
        """Pointer swap making the freshly scattered row layout current."""
        t = self.triple
        t.psi_r, self._psi_r_next = self._psi_r_next, t.psi_r
        t.lam_r, self._lam_r_next = self._lam_r_next, t.lam_r

    # -- exchanges and reductions ----------------------------------------------------

    def exchange_phi_to_col(self):
        self.triple.exchange_phi_row_to_col()

    def exchange_psi_lam_to_row(self):
        self.triple.exchange_psi_lam_col_to_row()

    def reduce_residuals(self):
        return float(self.pri_c.max()), float(self.dual_c.max())

    @property
    def duplicated_rows_per_iter(self) -> int:
        if self._dup_per_iter is None:
            if self.patches is None:
                self._dup_per_iter = 0
            else:
                total = sum(int(p.member_rows.size) for p in self.patches)
                distinct = int(np.unique(np.concatenate(
                    [p.member_rows for p in self.patches])).size)
                self._dup_per_iter = total - distinct
        return self._dup_per_iter


def _materialize(idx, n):
    if isinstance(idx, slice):
        return np.arange(*idx.indices(n))
    return np.asarray(idx)


def _runs(sorted_positions):
    """Maximal contiguous [i0, i1) runs of a sorted integer index array."""
    out = []
    start = prev = int(sorted_positions[0])
    for p in sorted_positions[1:]:
        p = int(p)
        if p != prev + 1:
            out.append((start, prev + 1))
            start = p
        prev = p
    out.append((start, prev + 1))
    return out


@dataclass
class AdmmState:
    """Outcome of one consensus solve."""

    triple: PhiTriple
    iterations: int
    residual_history: list   # per iteration: (pri, dual) infinity norms
    converged: bool


def admm_solve(row_data: RowData, col_solvers, triple: PhiTriple,
               spec: ProblemSpec, strategy=None, executor=None,
               workspace: AdmmWorkspace | None = None) -> AdmmState:
    """Iterate the four stages under the given execution strategy.

    Starts from the triple as passed in (zero it for a cold start; leave a
    previous solution in place to warm start). Converges when both the
    primal and dual infinity-norm residuals, reduced over columns, fall
    within the tolerances. Raises NotConverged at the iteration cap.
    """
    own_executor = executor is None
    if own_executor:
        executor = _strategies.Executor(strategy or _strategies.ExecStrategy("sequential"))
    if workspace is None:
        patches = (_strategies.build_patches(triple.tables)
                   if executor.strategy.variant == "patch-local" else None)
        workspace = AdmmWorkspace(triple, col_solvers, spec, patches=patches)
    workspace.set_row_data(row_data)
    try:
        history = []
        converged = False
        for _ in range(spec.max_iters):
            pri, dual = executor.run_iteration(workspace)
            history.append((pri, dual))
            if pri <= spec.eps_pri and dual <= spec.eps_dual:
                converged = True
                break
        if not converged:
            raise NotConverged(history)
        return AdmmState(triple, len(history), history, True)
    finally:
        if own_executor:
            executor.close()


def extract_control(triple: PhiTriple, x_tau: np.ndarray, row_metas) -> np.ndarray:
    """First-block input gains applied to the measured state."""
    tb = triple.tables
    x_tau = np.asarray(x_tau, dtype=np.float64)
    first = [(r, m.signal) for r, m in enumerate(row_metas)
             if m.kind == INPUT and m.time == 0]
    u = np.zeros(len(first))
    for r, signal in first:
        n = int(tb.row_len[r])
        u[signal] = float(ascending_dot(triple.phi_r[r, :n], x_tau[tb.rs[r, :n]]))
    return u


def step_dynamics(system: LtiSystem, x: np.ndarray, u: np.ndarray) -> np.ndarray:
    """One plant step x+ = A x + B u, evaluated on the sparse blocks."""
    x = np.asarray(x, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)
    if x.shape != (system.n_states,) or u.shape != (system.n_inputs,):
        raise ValueError("state/input dimensions do not match the system")
    return system.a @ x + system.b @ u


@dataclass
class Trajectory:
    """Closed-loop record over the simulated steps."""

    states: np.ndarray        # (t_sim + 1, n_states)
    inputs: np.ndarray        # (t_sim, n_inputs)
    step_iterations: list     # solver iterations per MPC step


def closed_loop_cost(traj: Trajectory) -> float:
    """Sum of squared states (all stored steps) plus squared inputs."""
    return float(np.sum(traj.states ** 2) + np.sum(traj.inputs ** 2))


@dataclass
class FixedPointReport:
    """Residuals of an independent audit of a converged solve.

    dynamics_residual: worst violation of the achievability constraint by
    the projected iterate; resolve_residual: worst change when re-running
    the explicit row solve at the final dual point; consensus_gap: worst
    disagreement between the two iterates.
    """

    dynamics_residual: float
    resolve_residual: float
    consensus_gap: float
    threshold: float

    @property
    def passed(self) -> bool:
        return (self.dynamics_residual <= self.threshold
                and self.resolve_residual <= self.threshold
                and self.consensus_gap <= self.threshold)

    def as_dict(self):
        return {
            "dynamics_residual": self.dynamics_residual,
            "resolve_residual": self.resolve_residual,
            "consensus_gap": self.consensus_gap,
            "threshold": self.threshold,
            "passed": self.passed,
        }


def verify_fixed_point(triple: PhiTriple, row_data: RowData, operator,
                       spec: ProblemSpec) -> FixedPointReport:
    """Audit a solve without trusting the iteration that produced it.

    Applies the raw dynamics operator to the dense projected iterate,
    re-solves every row at the final dual point, and measures the
    consensus gap. All three must sit within 10x the primal tolerance for
    an accepted solve.
    """
    tb = triple.tables
    dyn = float(np.max(np.abs(operator.residual(triple.psi_dense()))))

    ws = AdmmWorkspace(triple, col_solvers=None, spec=spec, row_data=row_data)
    fresh = ws._phi_compute(slice(0, tb.n_rows))
    resolve = float(np.max(np.abs((fresh - triple.phi_r)[tb.row_valid]), initial=0.0))

    gap = float(np.max(np.abs((triple.phi_r - triple.psi_r)[tb.row_valid]), initial=0.0))
    return FixedPointReport(dyn, resolve, gap, 10.0 * spec.eps_pri)


def dlmpc_simulate(system: LtiSystem, spec: ProblemSpec, mask: LocalityMask,
                   x0: np.ndarray, t_sim: int, strategy,
                   warm_start: bool = True, audit: bool = False):
    """Closed-loop MPC: precompute once, then solve / apply / step t_sim times.

    Each step re-solves the horizon problem from the measured state; the
    consensus iterates carry over between steps when `warm_start` is set
    (the first step always starts from zero). Returns the trajectory and an
    instrumented report whose phase split covers strategy setup, the
    session-wide precomputation, the per-step precomputation, the solver
    iterations, and the plant stepping. With `audit`, every converged solve
    is independently checked and the worst residuals are reported.
    """
    from .report import PHASES, RunReport

    x0 = np.asarray(x0, dtype=np.float64)
    if x0.shape != (system.n_states,):
        raise ValueError("x0 length must equal the global state dimension")
    if t_sim < 1:
        raise ValueError("t_sim must be >= 1")
    if isinstance(strategy, str):
        strategy = _strategies.ExecStrategy(strategy)

    total_start = time.perf_counter()
    phases = dict.fromkeys(PHASES, 0.0)

    start = time.perf_counter()
    executor = _strategies.Executor(strategy)
    tables = LayoutTables(mask)
    triple = PhiTriple(tables)
    patches = (_strategies.build_patches(tables)
               if strategy.variant == "patch-local" else None)
    _strategies.prepare_work_items(strategy, tables, executor.ledger)
    phases["setup"] = time.perf_counter() - start

    start = time.perf_counter()
    operator = build_dynamics_operator(system, spec.horizon)
    col_solvers = precompute_column_solvers(operator, mask)
    metas = row_index_map(system.partition, spec.horizon, spec)
    workspace = AdmmWorkspace(triple, col_solvers, spec, patches=patches)
    phases["precompute_global"] = time.perf_counter() - start

    states = [x0]
    inputs = []
    iters = []
    audit_worst = {"dynamics_residual": 0.0, "resolve_residual": 0.0,
                   "consensus_gap": 0.0} if audit else None
    x = x0
    try:
        for step in range(t_sim):
            start = time.perf_counter()
            try:
                row_data = precompute_row_data(x, spec, tables, metas)
            except RowInfeasible as err:
                err.step = step
                raise
            phases["precompute_per_step"] += time.perf_counter() - start

            if not warm_start:
                triple.zero_()
            start = time.perf_counter()
            try:
                state = admm_solve(row_data, col_solvers, triple, spec,
                                   executor=executor, workspace=workspace)
            except NotConverged as err:
                raise NotConverged(err.residual_history, step=step) from None
            phases["optimize"] += time.perf_counter() - start
            iters.append(state.iterations)

            if audit:
                rep = verify_fixed_point(triple, row_data, operator, spec)
                audit_worst["dynamics_residual"] = max(
                    audit_worst["dynamics_residual"], rep.dynamics_residual)
                audit_worst["resolve_residual"] = max(
                    audit_worst["resolve_residual"], rep.resolve_residual)
                audit_worst["consensus_gap"] = max(
                    audit_worst["consensus_gap"], rep.consensus_gap)

            start = time.perf_counter()
            u = extract_control(triple, x, metas)
            x = step_dynamics(system, x, u)
            inputs.append(u)
            states.append(x)
            phases["dynamics"] += time.perf_counter() - start
    finally:
        executor.close()

    traj = Trajectory(np.array(states), np.array(inputs), iters)
    report = RunReport(
        scenario={"strategy": strategy.variant,
                  "worker_count": executor.workers,
                  "t_sim": t_sim,
                  "warm_start": warm_start,
                  "rho": spec.rho,
                  "eps": spec.eps_pri},
        phase_times_ms={k: v * 1e3 for k, v in phases.items()},
        per_step_iters=iters,
        ledger=executor.ledger,
        closed_loop_cost=closed_loop_cost(traj),
        converged_all_steps=True,
        total_wall_ms=(time.perf_counter() - total_start) * 1e3,
        audit_worst=audit_worst,
    )
    return traj, report
