"""Decision-variable structure for the stacked closed-loop response.

The response matrix has one row per (state, time) and (input, time) pair
and one column per initial-state coordinate. Feasible responses satisfy an
affine recursion tying each state block to the previous state/input blocks;
that recursion is materialized here as a sparse operator. The consensus
solver keeps three iterates on the mask support simultaneously in a padded
row-major and a padded column-major layout so that row-parallel and
column-parallel stages both address fixed-stride buffers.

Conventions: state blocks are x_0..x_{horizon-1} with x_0 pinned to the
measured state, input blocks are u_0..u_{horizon-2}. Bounds and weights at
block 0 are typically inert (the block is pinned); the last state block
carries the terminal weight.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

from .errors import LocalityInfeasible, RowInfeasible
from .system_model import LocalityMask, LtiSystem, SubsystemPartition

STATE = "state"
INPUT = "input"

# Relative threshold for rank decisions in the column reductions.
RANK_RTOL = 1e-10
# Consistency threshold for dropped (dependent) constraint rows.
CONSISTENCY_TOL = 1e-8


def ascending_dot(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Dot product over the last axis, accumulated in ascending index order.

    Strictly sequential accumulation makes the result independent of how
    work items are batched, which is what guarantees bitwise-identical
    iterates across execution strategies and worker counts.
    """
    acc = x[..., 0] * y[..., 0]
    for j in range(1, x.shape[-1]):
        acc = acc + x[..., j] * y[..., j]
    return acc


@dataclass
class ProblemSpec:
    """Horizon, diagonal costs, box bounds, and solver parameters.

    Weights are per signal and per horizon block (columns index time);
    `terminal_weights` is added onto the last state block. Bounds may be
    +/-inf. The penalty `rho` and the infinity-norm tolerances govern the
    consensus iteration.
    """

    horizon: int
    state_weights: np.ndarray        # (n_states, horizon)
    input_weights: np.ndarray        # (n_inputs, horizon-1)
    terminal_weights: np.ndarray     # (n_states,)
    state_lo: np.ndarray             # (n_states, horizon)
    state_hi: np.ndarray
    input_lo: np.ndarray             # (n_inputs, horizon-1)
    input_hi: np.ndarray
    rho: float = 1.0
    eps_pri: float = 1e-4
    eps_dual: float = 1e-4
    max_iters: int = 5000

    def __post_init__(self):
        t = self.horizon
        n_x = self.state_weights.shape[0]
        n_u = self.input_weights.shape[0]
        if t < 2:
            raise ValueError("horizon must be >= 2")
        if self.state_weights.shape != (n_x, t) or self.state_lo.shape != (n_x, t) \
                or self.state_hi.shape != (n_x, t):
            raise ValueError("state arrays must have shape (n_states, horizon)")
        if self.input_weights.shape != (n_u, t - 1) or self.input_lo.shape != (n_u, t - 1) \
                or self.input_hi.shape != (n_u, t - 1):
            raise ValueError("input arrays must have shape (n_inputs, horizon-1)")
        if self.terminal_weights.shape != (n_x,):
            raise ValueError("terminal_weights must have shape (n_states,)")
        if np.any(self.state_weights < 0) or np.any(self.input_weights < 0) \
                or np.any(self.terminal_weights < 0):
            raise ValueError("weights must be nonnegative")
        if np.any(self.state_lo > self.state_hi) or np.any(self.input_lo > self.input_hi):
            raise ValueError("lower bounds must not exceed upper bounds")
        if not self.rho > 0:
            raise ValueError("rho must be positive")
        if not (self.eps_pri > 0 and self.eps_dual > 0):
            raise ValueError("tolerances must be positive")

    @property
    def n_states(self) -> int:
        return self.state_weights.shape[0]

    @property
    def n_inputs(self) -> int:
        return self.input_weights.shape[0]

    def row_weight(self, kind: str, signal: int, time: int) -> float:
        if kind == STATE:
            w = float(self.state_weights[signal, time])
            if time == self.horizon - 1:
                w += float(self.terminal_weights[signal])
            return w
        return float(self.input_weights[signal, time])

    def row_bounds(self, kind: str, signal: int, time: int):
        if kind == STATE:
            return float(self.state_lo[signal, time]), float(self.state_hi[signal, time])
        return float(self.input_lo[signal, time]), float(self.input_hi[signal, time])


@dataclass(frozen=True)
class RowMeta:
    """Identity of one stacked-response row."""

    kind: str                 # STATE or INPUT
    subsystem: int
    time: int
    signal: int               # global state or input index
    weight: float = 0.0
    lo: float = -np.inf
    hi: float = np.inf


def row_index_map(partition: SubsystemPartition, horizon: int,
                  spec: ProblemSpec | None = None):
    """Stacked row order: state blocks time-major, then input blocks.

    Produces n_states*horizon + n_inputs*(horizon-1) entries. When `spec`
    is given, each row carries its resolved cost weight and bounds
    (terminal weight folded into the last state block).
    """
    if horizon < 2:
        raise ValueError("horizon must be >= 2")
    sown = partition.state_owner()
    iown = partition.input_owner()
    rows = []
    for t in range(horizon):
        for s in range(partition.n_states):
            if spec is None:
                rows.append(RowMeta(STATE, int(sown[s]), t, s))
            else:
                lo, hi = spec.row_bounds(STATE, s, t)
                rows.append(RowMeta(STATE, int(sown[s]), t, s,
                                    spec.row_weight(STATE, s, t), lo, hi))
    for t in range(horizon - 1):
        for k in range(partition.n_inputs):
            if spec is None:
                rows.append(RowMeta(INPUT, int(iown[k]), t, k))
            else:
                lo, hi = spec.row_bounds(INPUT, k, t)
                rows.append(RowMeta(INPUT, int(iown[k]), t, k,
                                    spec.row_weight(INPUT, k, t), lo, hi))
    return rows


@dataclass(frozen=True)
class DynamicsOperator:
    """Affine achievability constraint on the stacked response.

    `z` has one row per (state, time) pair: the time-0 rows pin the first
    state block to the identity, and each later row encodes that the state
    block equals A times the previous state block plus B times the previous
    input block. `rhs` holds the identity block on top and zeros below. A
    response assembled from any open-loop simulation of (A, B) satisfies
    z @ response == rhs.
    """

    z: sp.csr_matrix          # (n_states*horizon, n_rows)
    rhs: np.ndarray           # (n_states*horizon, n_cols)
    horizon: int

    @property
    def n_rows(self) -> int:
        return self.z.shape[1]

    @property
    def n_cols(self) -> int:
        return self.rhs.shape[1]

    def residual(self, dense_response: np.ndarray) -> np.ndarray:
        """z @ response - rhs for a dense (n_rows, n_cols) response."""
        return self.z @ dense_response - self.rhs


def build_dynamics_operator(system: LtiSystem, horizon: int) -> DynamicsOperator:
    if horizon < 2:
        raise ValueError("horizon must be >= 2")
    n_x, n_u = system.n_states, system.n_inputs
    t = int(horizon)
    n_rows = n_x * t + n_u * (t - 1)

    def xrow(s, tt):
        return tt * n_x + s

    def urow(k, tt):
        return n_x * t + tt * n_u + k

    data, rows, cols = [], [], []
    a = system.a.tocsr()
    b = system.b.tocsr()
    for s in range(n_x):
        rows.append(s)
        cols.append(xrow(s, 0))
        data.append(1.0)
    for tt in range(1, t):
        for s in range(n_x):
            cr = tt * n_x + s
            rows.append(cr)
            cols.append(xrow(s, tt))
            data.append(1.0)
            for j, v in zip(a.indices[a.indptr[s]:a.indptr[s + 1]],
                            a.data[a.indptr[s]:a.indptr[s + 1]]):
                rows.append(cr)
                cols.append(xrow(int(j), tt - 1))
                data.append(-float(v))
            for k, v in zip(b.indices[b.indptr[s]:b.indptr[s + 1]],
                            b.data[b.indptr[s]:b.indptr[s + 1]]):
                rows.append(cr)
                cols.append(urow(int(k), tt - 1))
                data.append(-float(v))
    z = sp.csr_matrix((data, (rows, cols)), shape=(n_x * t, n_rows))
    rhs = np.zeros((n_x * t, n_x))
    rhs[:n_x, :n_x] = np.eye(n_x)
    return DynamicsOperator(z, rhs, t)


@dataclass(frozen=True)
class ColumnPrecomp:
    """Per-column projector onto the dynamics constraint, built once per session.

    `g` is the dense operator restricted to the column's support after a
    rank-revealing row reduction (full row rank); `projector` equals
    g^T (g g^T)^{-1}, so the feasibility projection of a point k is
    k + projector @ (rhs - g @ k).
    """

    column: int
    support: np.ndarray         # global row indices (sorted)
    constraint_rows: np.ndarray  # operator rows kept after reduction
    g: np.ndarray               # (rank, support_size)
    rhs: np.ndarray             # (rank,)
    projector: np.ndarray       # (support_size, rank)


def precompute_column_solvers(op: DynamicsOperator, mask: LocalityMask):
    """Feasibility projectors for every column of the masked response.

    Entries outside a column's support are pinned to zero, so each
    operator row intersecting the support must hold among the support
    entries alone. Rows are reduced to an independent set; if a dropped
    row is inconsistent with the reduced system the mask cannot support
    any feasible response for that column.
    """
    z_csc = op.z.tocsc()
    out = []
    for c in range(mask.n_cols):
        sup = mask.col_supports[c]
        sub = z_csc[:, sup]
        touch = np.unique(sub.tocoo().row)
        g0 = np.asarray(sub.toarray()[touch])
        rhs0 = op.rhs[touch, c]

        q, r, piv = sla.qr(g0.T, mode="economic", pivoting=True)
        diag = np.abs(np.diag(r))
        tol = RANK_RTOL * (diag[0] if diag.size else 1.0)
        rank = int(np.count_nonzero(diag > tol))
        if rank == 0:
            raise LocalityInfeasible(c, float(np.max(np.abs(rhs0), initial=0.0)))
        keep = np.sort(piv[:rank])
        g = g0[keep]
        rhs = rhs0[keep]
        cho = sla.cho_factor(g @ g.T)
        projector = sla.cho_solve(cho, g).T
        # Dropped rows are linear combinations of the kept ones; the full
        # system is consistent iff the reduced min-norm solution satisfies it.
        particular = projector @ rhs
        resid = float(np.max(np.abs(g0 @ particular - rhs0)))
        if resid > CONSISTENCY_TOL * max(1.0, float(np.max(np.abs(rhs0), initial=0.0))):
            raise LocalityInfeasible(c, resid)
        out.append(ColumnPrecomp(c, sup, touch[keep], g, rhs, projector))
    return out


@dataclass(frozen=True)
class RowPrecomp:
    """Per-row data for the explicit row solve at one MPC step."""

    row: int
    support: np.ndarray
    a: np.ndarray            # measured state restricted to the support
    a_dot_a: float
    weight: float
    lo: float
    hi: float


class RowData:
    """Padded per-row solve data for one measured state.

    Batched arrays are laid out on the padded row width so every execution
    strategy addresses identical fixed-stride buffers.
    """

    def __init__(self, tables: "LayoutTables", a_pad, a_dot_a, weight, lo, hi):
        self.tables = tables
        self.a_pad = a_pad          # (n_rows, d_row)
        self.a_dot_a = a_dot_a      # (n_rows,)
        self.weight = weight
        self.lo = lo
        self.hi = hi

    def __len__(self):
        return self.a_pad.shape[0]

    def row(self, r: int) -> RowPrecomp:
        n = int(self.tables.row_len[r])
        sup = self.tables.rs[r, :n].astype(np.int64)
        return RowPrecomp(r, sup, self.a_pad[r, :n].copy(), float(self.a_dot_a[r]),
                          float(self.weight[r]), float(self.lo[r]), float(self.hi[r]))


def precompute_row_data(x_tau: np.ndarray, spec: ProblemSpec,
                        tables: "LayoutTables", row_metas) -> RowData:
    """Restrict the measured state to each row's support and resolve costs.

    Raises RowInfeasible when a row's restricted state is exactly zero but
    its bounds exclude zero; no response can then satisfy the constraint.
    """
    x_tau = np.asarray(x_tau, dtype=np.float64)
    a_pad = np.where(tables.row_valid, x_tau[tables.rs_safe], 0.0)
    a_dot_a = ascending_dot(a_pad, a_pad)
    weight = np.empty(len(row_metas))
    lo = np.empty(len(row_metas))
    hi = np.empty(len(row_metas))
    for r, m in enumerate(row_metas):
        weight[r] = spec.row_weight(m.kind, m.signal, m.time)
        lo[r], hi[r] = spec.row_bounds(m.kind, m.signal, m.time)
    bad = np.nonzero((a_dot_a == 0.0) & ((lo > 0.0) | (hi < 0.0)))[0]
    if bad.size:
        raise RowInfeasible(int(bad[0]))
    return RowData(tables, a_pad, a_dot_a, weight, lo, hi)


class LayoutTables:
    """Index tables tying the padded row-major and column-major layouts.

    rs[r, k] is the k-th permitted column of row r (-1 past the support);
    cs[c, j] the j-th permitted row of column c. The flat gather tables map
    each valid cell of one layout to its twin in the other, enabling exact
    (copy-only) layout exchanges and per-column scatters.
    """

    def __init__(self, mask: LocalityMask):
        self.mask = mask
        n_rows, n_cols = mask.n_rows, mask.n_cols
        d_row, d_col = mask.d_row, mask.d_col
        self.n_rows, self.n_cols = n_rows, n_cols
        self.d_row, self.d_col = d_row, d_col

        self.rs = np.full((n_rows, d_row), -1, dtype=np.int64)
        self.row_len = np.zeros(n_rows, dtype=np.int64)
        for r, sup in enumerate(mask.row_supports):
            self.rs[r, :len(sup)] = sup
            self.row_len[r] = len(sup)
        self.row_valid = self.rs >= 0
        self.rs_safe = np.where(self.row_valid, self.rs, 0)

        self.cs = np.full((n_cols, d_col), -1, dtype=np.int64)
        self.col_len = np.zeros(n_cols, dtype=np.int64)
        for c, sup in enumerate(mask.col_supports):
            self.cs[c, :len(sup)] = sup
            self.col_len[c] = len(sup)
        self.col_valid = self.cs >= 0
        self.cs_safe = np.where(self.col_valid, self.cs, 0)

        # Column slot of each (row r, column c) support cell inside row r's
        # padded row, and flat twins in both directions.
        self.col_slot_in_row = np.zeros((n_cols, d_col), dtype=np.int64)
        self.c2r_flat = np.zeros((n_cols, d_col), dtype=np.int64)
        for c in range(n_cols):
            sup = mask.col_supports[c]
            for j, r in enumerate(sup):
                slot = int(np.searchsorted(mask.row_supports[r], c))
                self.col_slot_in_row[c, j] = slot
                self.c2r_flat[c, j] = r * d_row + slot
        self.r2c_flat = np.zeros((n_rows, d_row), dtype=np.int64)
        for r in range(n_rows):
            sup = mask.row_supports[r]
            for k, c in enumerate(sup):
                j = int(np.searchsorted(mask.col_supports[c], r))
                self.r2c_flat[r, k] = c * d_col + j

        # Flat indices of valid column-layout cells, for element-parallel work.
        self.elem_flat_col = np.nonzero(self.col_valid.ravel())[0]
        self.n_elems = int(self.elem_flat_col.size)
        # The canonical owner of a row is the patch of its smallest
        # permitted column; supports are sorted so that is slot 0.
        self.owner_col = self.rs[:, 0].copy()

    # -- owner publication helper -------------------------------------------------

    def rows_owned_by(self, c: int) -> np.ndarray:
        members = self.cs[c, :self.col_len[c]]
        return members[self.owner_col[members] == c]


class PhiTriple:
    """The three consensus iterates on a shared mask support, dual-layout.

    Each of (phi, psi, lam) is stored zero-padded both row-major
    (n_rows x d_row) and column-major (n_cols x d_col). Cells outside the
    support stay exactly zero in both layouts; after a stage plus its
    exchange the two layouts agree cell-for-cell.
    """

    def __init__(self, tables: LayoutTables):
        t = tables
        self.tables = t
        self.phi_r = np.zeros((t.n_rows, t.d_row))
        self.psi_r = np.zeros((t.n_rows, t.d_row))
        self.lam_r = np.zeros((t.n_rows, t.d_row))
        self.phi_c = np.zeros((t.n_cols, t.d_col))
        self.psi_c = np.zeros((t.n_cols, t.d_col))
        self.lam_c = np.zeros((t.n_cols, t.d_col))
        self.psi_prev_c = np.zeros((t.n_cols, t.d_col))

    def zero_(self):
        for arr in (self.phi_r, self.psi_r, self.lam_r,
                    self.phi_c, self.psi_c, self.lam_c, self.psi_prev_c):
            arr[:] = 0.0

    # -- layout exchanges (exact copies, coordinator-side) ------------------------

    def exchange_phi_row_to_col(self):
        t = self.tables
        vals = self.phi_r.ravel()[np.where(t.col_valid, t.c2r_flat, 0)]
        vals[~t.col_valid] = 0.0
        self.phi_c[:] = vals

    def exchange_psi_lam_col_to_row(self):
        t = self.tables
        src = np.where(t.row_valid, t.r2c_flat, 0)
        vals = self.psi_c.ravel()[src]
        vals[~t.row_valid] = 0.0
        self.psi_r[:] = vals
        vals = self.lam_c.ravel()[src]
        vals[~t.row_valid] = 0.0
        self.lam_r[:] = vals

    def scatter_psi_lam_cols_to_row(self, cols, psi_dst=None, lam_dst=None):
        """Write the given columns' psi/lam entries into a row layout.

        Support cells belong to exactly one column, so concurrent calls on
        disjoint column sets write disjoint row-layout cells. Alternate
        destination buffers support double-buffered schedules whose work
        items still read the current row layout while scattering.
        """
        t = self.tables
        psi_dst = self.psi_r if psi_dst is None else psi_dst
        lam_dst = self.lam_r if lam_dst is None else lam_dst
        valid = t.col_valid[cols]
        flat = t.c2r_flat[cols][valid]
        psi_dst.ravel()[flat] = self.psi_c[cols][valid]
        lam_dst.ravel()[flat] = self.lam_c[cols][valid]

    # -- dense views and integrity checks ------------------------------------------

    def _dense_from_row(self, arr_r: np.ndarray) -> np.ndarray:
        t = self.tables
        dense = np.zeros((t.n_rows, t.n_cols))
        idx = np.arange(t.n_rows)[:, None] * t.n_cols + t.rs_safe
        dense.ravel()[idx[t.row_valid]] = arr_r[t.row_valid]
        return dense

    def _dense_from_col(self, arr_c: np.ndarray) -> np.ndarray:
        t = self.tables
        dense = np.zeros((t.n_rows, t.n_cols))
        idx = t.cs_safe * t.n_cols + np.arange(t.n_cols)[:, None]
        dense.ravel()[idx[t.col_valid]] = arr_c[t.col_valid]
        return dense

    def phi_dense(self) -> np.ndarray:
        return self._dense_from_row(self.phi_r)

    def psi_dense(self) -> np.ndarray:
        return self._dense_from_col(self.psi_c)

    def lam_dense(self) -> np.ndarray:
        return self._dense_from_col(self.lam_c)

    def padding_leak(self) -> float:
        """Largest magnitude found in any out-of-support cell, both layouts."""
        t = self.tables
        leak = 0.0
        for arr in (self.phi_r, self.psi_r, self.lam_r):
            if (~t.row_valid).any():
                leak = max(leak, float(np.max(np.abs(arr[~t.row_valid]), initial=0.0)))
        for arr in (self.phi_c, self.psi_c, self.lam_c):
            if (~t.col_valid).any():
                leak = max(leak, float(np.max(np.abs(arr[~t.col_valid]), initial=0.0)))
        return leak

    def layout_disagreement(self) -> float:
        """Largest cellwise difference between row- and column-major copies."""
        gap = 0.0
        for arr_r, arr_c in ((self.phi_r, self.phi_c), (self.psi_r, self.psi_c),
                             (self.lam_r, self.lam_c)):
            gap = max(gap, float(np.max(np.abs(
                self._dense_from_row(arr_r) - self._dense_from_col(arr_c)))))
        return gap
