"""Dense KKT reference solve for equality-constrained instances.

Ground truth for small problems with no active box bounds: stack the
support entries of every column into one variable vector, assemble the
quadratic cost from the row subproblems and the block-diagonal dynamics
constraints, and solve the KKT system directly. The solve path shares
nothing with the consensus iteration beyond the problem statement itself
(operator, mask, costs), so agreement between the two is a meaningful
check.
"""

from __future__ import annotations

import numpy as np

from .admm import Trajectory, step_dynamics
from .errors import OracleFailure
from .sls_core import (INPUT, ProblemSpec, build_dynamics_operator, row_index_map)
from .system_model import LocalityMask, LtiSystem

# Practical ceiling for the stacked dense system.
MAX_SUPPORT_ENTRIES = 6000


def kkt_oracle_equality(spec: ProblemSpec, system: LtiSystem, mask: LocalityMask,
                        x_tau: np.ndarray) -> np.ndarray:
    """Reference response matrix from a direct factorization.

    Minimizes the sum over rows of weight * (row . x_tau)^2 subject to the
    dynamics constraints restricted to each column's support. All bounds
    must be infinite. Returns the dense (n_rows, n_cols) response. The
    solution is computed by least squares on the KKT system (the cost can
    be singular on the feasible set, e.g. for x_tau = 0, in which case any
    feasible point is optimal); constraint and stationarity residuals are
    checked and OracleFailure is raised if either is violated.
    """
    x_tau = np.asarray(x_tau, dtype=np.float64)
    n_entries = mask.n_entries
    if n_entries > MAX_SUPPORT_ENTRIES:
        raise ValueError(f"instance too large for the dense oracle "
                         f"({n_entries} support entries)")
    metas = row_index_map(system.partition, spec.horizon, spec)
    for m in metas:
        if np.isfinite(m.lo) or np.isfinite(m.hi):
            raise ValueError("the equality oracle requires all bounds infinite")

    op = build_dynamics_operator(system, spec.horizon)
    z_csc = op.z.tocsc()

    offsets = np.zeros(mask.n_cols + 1, dtype=np.int64)
    for c in range(mask.n_cols):
        offsets[c + 1] = offsets[c] + len(mask.col_supports[c])
    n = int(offsets[-1])

    # Position of each (row, column) support entry in the stacked vector.
    pos = {}
    for c in range(mask.n_cols):
        for j, r in enumerate(mask.col_supports[c]):
            pos[(int(r), c)] = int(offsets[c] + j)

    h = np.zeros((n, n))
    for r, sup in enumerate(mask.row_supports):
        w = metas[r].weight
        if w == 0.0:
            continue
        vec = np.zeros(n)
        for c in sup:
            vec[pos[(r, int(c))]] = x_tau[c]
        h += 2.0 * w * np.outer(vec, vec)

    blocks = []
    m_total = 0
    for c in range(mask.n_cols):
        sup = mask.col_supports[c]
        sub = z_csc[:, sup]
        touch = np.unique(sub.tocoo().row)
        g = np.asarray(sub.toarray()[touch])
        blocks.append((g, op.rhs[touch, c]))
        m_total += len(touch)

    kkt = np.zeros((n + m_total, n + m_total))
    rhs = np.zeros(n + m_total)
    kkt[:n, :n] = h
    row0 = n
    for c, (g, r0) in enumerate(blocks):
        m = g.shape[0]
        c0, c1 = offsets[c], offsets[c + 1]
        kkt[row0:row0 + m, c0:c1] = g
        kkt[c0:c1, row0:row0 + m] = g.T
        rhs[row0:row0 + m] = r0
        row0 += m

    sol, *_ = np.linalg.lstsq(kkt, rhs, rcond=None)
    z = sol[:n]
    nu = sol[n:]

    scale = max(1.0, float(np.max(np.abs(rhs))))
    feas = float(np.max(np.abs(kkt[n:, :n] @ z - rhs[n:])))
    stat = float(np.max(np.abs(h @ z + kkt[:n, n:] @ nu)))
    if feas > 1e-8 * scale:
        raise OracleFailure(f"KKT solve violates the constraints (residual {feas:.3e})")
    if stat > 1e-6 * max(scale, float(np.max(np.abs(h), initial=1.0))):
        raise OracleFailure(f"KKT solve violates stationarity (residual {stat:.3e})")

    dense = np.zeros((mask.n_rows, mask.n_cols))
    for c in range(mask.n_cols):
        dense[mask.col_supports[c], c] = z[offsets[c]:offsets[c + 1]]
    return dense


def simulate_with_oracle(system: LtiSystem, spec: ProblemSpec, mask: LocalityMask,
                         x0: np.ndarray, t_sim: int) -> Trajectory:
    """Closed loop driven by the dense reference solve at every step."""
    metas = row_index_map(system.partition, spec.horizon, spec)
    first_input_rows = [(r, m.signal) for r, m in enumerate(metas)
                        if m.kind == INPUT and m.time == 0]
    x = np.asarray(x0, dtype=np.float64)
    states, inputs = [x], []
    for _ in range(t_sim):
        dense = kkt_oracle_equality(spec, system, mask, x)
        u = np.zeros(system.n_inputs)
        for r, signal in first_input_rows:
            u[signal] = float(dense[r] @ x)
        x = step_dynamics(system, x, u)
        inputs.append(u)
        states.append(x)
    return Trajectory(np.array(states), np.array(inputs), [0] * t_sim)
