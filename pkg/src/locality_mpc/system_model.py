"""Interconnected LTI systems and their locality structure.

A plant is a sparse pair (A, B) partitioned into subsystems that interact
along an undirected graph. The controller synthesis works on the stacked
closed-loop response matrix, whose rows correspond to states/inputs at
horizon steps and whose columns correspond to initial-state coordinates.
Locality restricts entry (r, c) to subsystem pairs within graph distance d
(closed ball, so d=0 means self-only). This module builds the benchmark
chain plant, hop distances, the resulting sparsity masks, and the
analytical bounds on the longest row/column supports.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

UNREACHABLE = math.inf

# Benchmark chain blocks: two states per node, neighbor coupling feeds the
# second state with the sum of the neighbor's states.
CHAIN_A_DIAG = np.array([[1.0, 0.1], [-0.3, 0.7]])
CHAIN_A_COUPLING = np.array([[0.0, 0.0], [0.1, 0.1]])


@dataclass(frozen=True)
class SubsystemPartition:
    """Assignment of contiguous global state/input index ranges to subsystems.

    Ranges are half-open (start, stop), ordered by subsystem, and jointly
    cover the global state and input vectors. Every subsystem owns at least
    one state; a subsystem may own no inputs.
    """

    state_ranges: tuple
    input_ranges: tuple

    def __post_init__(self):
        if len(self.state_ranges) != len(self.input_ranges):
            raise ValueError("state and input range lists must have equal length")
        if not self.state_ranges:
            raise ValueError("partition needs at least one subsystem")
        pos = 0
        for i, (a, b) in enumerate(self.state_ranges):
            if a != pos or b <= a:
                raise ValueError(f"state ranges must tile [0, n_states); bad range {i}")
            pos = b
        pos = 0
        for i, (a, b) in enumerate(self.input_ranges):
            if a != pos or b < a:
                raise ValueError(f"input ranges must tile [0, n_inputs); bad range {i}")
            pos = b

    @property
    def subsystem_count(self) -> int:
        return len(self.state_ranges)

    @property
    def n_states(self) -> int:
        return self.state_ranges[-1][1]

    @property
    def n_inputs(self) -> int:
        return self.input_ranges[-1][1]

    def state_owner(self) -> np.ndarray:
        """Owning subsystem of each global state index."""
        owner = np.empty(self.n_states, dtype=np.int32)
        for i, (a, b) in enumerate(self.state_ranges):
            owner[a:b] = i
        return owner

    def input_owner(self) -> np.ndarray:
        owner = np.empty(self.n_inputs, dtype=np.int32)
        for i, (a, b) in enumerate(self.input_ranges):
            owner[a:b] = i
        return owner

    @classmethod
    def uniform(cls, n_subsystems: int, states_per: int, inputs_per: int) -> "SubsystemPartition":
        s = tuple((i * states_per, (i + 1) * states_per) for i in range(n_subsystems))
        u = tuple((i * inputs_per, (i + 1) * inputs_per) for i in range(n_subsystems))
        return cls(s, u)


@dataclass(frozen=True)
class SubsystemGraph:
    """Undirected, unweighted interconnection graph over subsystems."""

    node_count: int
    adjacency: tuple  # per node: sorted numpy array of neighbor ids

    def __post_init__(self):
        if len(self.adjacency) != self.node_count:
            raise ValueError("adjacency list length must equal node_count")
        for i, nbrs in enumerate(self.adjacency):
            for j in nbrs:
                if j == i:
                    raise ValueError(f"self-loop at node {i}")
                if not 0 <= j < self.node_count:
                    raise ValueError(f"neighbor {j} of node {i} out of range")
                if i not in self.adjacency[j]:
                    raise ValueError(f"edge ({i},{j}) is not symmetric")

    @classmethod
    def from_edges(cls, node_count: int, edges) -> "SubsystemGraph":
        nbrs = [set() for _ in range(node_count)]
        for i, j in edges:
            if i != j:
                nbrs[i].add(j)
                nbrs[j].add(i)
        adj = tuple(np.array(sorted(s), dtype=np.int32) for s in nbrs)
        return cls(node_count, adj)

    @property
    def max_degree(self) -> int:
        return max((len(n) for n in self.adjacency), default=0)

    def ball(self, node: int, radius: int) -> np.ndarray:
        """Sorted ids of all nodes within `radius` hops of `node` (inclusive)."""
        seen = {node}
        frontier = deque([(node, 0)])
        while frontier:
            v, dist = frontier.popleft()
            if dist == radius:
                continue
            for w in self.adjacency[v]:
                if w not in seen:
                    seen.add(w)
                    frontier.append((w, dist + 1))
        return np.array(sorted(seen), dtype=np.int32)


def graph_distance(graph: SubsystemGraph, i: int, j: int):
    """Hop count of the shortest path between nodes i and j.

    Returns 0 for i == j and UNREACHABLE (math.inf) when the nodes lie in
    different connected components.
    """
    n = graph.node_count
    if not (0 <= i < n and 0 <= j < n):
        raise ValueError(f"node ids ({i}, {j}) out of range for {n} nodes")
    if i == j:
        return 0
    seen = {i}
    frontier = deque([(i, 0)])
    while frontier:
        v, dist = frontier.popleft()
        for w in graph.adjacency[v]:
            if w == j:
                return dist + 1
            if w not in seen:
                seen.add(w)
                frontier.append((w, dist + 1))
    return UNREACHABLE


@dataclass(frozen=True)
class LtiSystem:
    """Block-sparse discrete-time plant x+ = A x + B u over a subsystem graph.

    Block (i, j) of A may be nonzero only for j within the graph
    neighborhood of i (or j = i); B blocks follow the same rule. The graph
    must contain every off-diagonal block coupling actually present.
    """

    a: sp.csr_matrix
    b: sp.csr_matrix
    partition: SubsystemPartition
    graph: SubsystemGraph

    def __post_init__(self):
        p = self.partition
        if self.a.shape != (p.n_states, p.n_states):
            raise ValueError("A shape inconsistent with partition")
        if self.b.shape != (p.n_states, p.n_inputs):
            raise ValueError("B shape inconsistent with partition")
        if self.graph.node_count != p.subsystem_count:
            raise ValueError("graph node count must match subsystem count")
        sown = p.state_owner()
        iown = p.input_owner()
        coo = self.a.tocoo()
        for r, c in zip(sown[coo.row], sown[coo.col]):
            if r != c and c not in self.graph.adjacency[r]:
                raise ValueError(f"A couples subsystems ({r},{c}) outside the graph")
        coo = self.b.tocoo()
        for r, c in zip(sown[coo.row], iown[coo.col]):
            if r != c and c not in self.graph.adjacency[r]:
                raise ValueError(f"B couples subsystems ({r},{c}) outside the graph")

    @property
    def n_states(self) -> int:
        return self.partition.n_states

    @property
    def n_inputs(self) -> int:
        return self.partition.n_inputs


def build_chain_network(n_subsystems: int, coupling_radius: int = 1,
                        two_inputs: bool = False) -> LtiSystem:
    """Benchmark plant: a chain of two-state nodes.

    Each node carries the diagonal block CHAIN_A_DIAG; nodes within
    `coupling_radius` on the chain couple through CHAIN_A_COUPLING. By
    default each node has a single input acting on both states (B block
    [1, 1]^T); with `two_inputs` each node gets two inputs and an identity
    B block. The interconnection graph links every coupled pair, so for
    coupling_radius=1 it is the plain chain.
    """
    n = int(n_subsystems)
    if n < 1:
        raise ValueError("need at least one subsystem")
    if coupling_radius < 1:
        raise ValueError("coupling_radius must be >= 1")
    inputs_per = 2 if two_inputs else 1
    part = SubsystemPartition.uniform(n, 2, inputs_per)
    edges = [(i, j) for i in range(n) for j in range(i + 1, min(n, i + coupling_radius + 1))]
    graph = SubsystemGraph.from_edges(n, edges)

    a = sp.lil_matrix((2 * n, 2 * n))
    b = sp.lil_matrix((2 * n, inputs_per * n))
    for i in range(n):
        a[2 * i:2 * i + 2, 2 * i:2 * i + 2] = CHAIN_A_DIAG
        lo = max(0, i - coupling_radius)
        hi = min(n, i + coupling_radius + 1)
        for j in range(lo, hi):
            if j != i:
                a[2 * i:2 * i + 2, 2 * j:2 * j + 2] = CHAIN_A_COUPLING
        if two_inputs:
            b[2 * i, 2 * i] = 1.0
            b[2 * i + 1, 2 * i + 1] = 1.0
        else:
            b[2 * i, i] = 1.0
            b[2 * i + 1, i] = 1.0
    return LtiSystem(a.tocsr(), b.tocsr(), part, graph)


def phi_row_owners(partition: SubsystemPartition, horizon: int) -> np.ndarray:
    """Owning subsystem per stacked response row.

    Row order: all state blocks time-major (time 0..horizon-1, states in
    global order inside each block), then all input blocks time-major
    (time 0..horizon-2).
    """
    sown = partition.state_owner()
    iown = partition.input_owner()
    return np.concatenate([np.tile(sown, horizon), np.tile(iown, horizon - 1)])


@dataclass(frozen=True)
class LocalityMask:
    """Sparsity support of the stacked response under a d-hop locality rule.

    Entry (r, c) is permitted iff the subsystem owning row r and the
    subsystem owning column c are within graph distance d. Rows of the same
    subsystem share a single support array (columns, sorted ascending), and
    likewise for columns; `row_supports[r]` may therefore alias
    `row_supports[r']`.
    """

    n_rows: int
    n_cols: int
    d: int
    row_supports: tuple  # per row: sorted np.ndarray of permitted columns
    col_supports: tuple  # per column: sorted np.ndarray of permitted rows
    d_row: int = field(init=False)
    d_col: int = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "d_row", max(len(s) for s in self.row_supports))
        object.__setattr__(self, "d_col", max(len(s) for s in self.col_supports))

    @property
    def n_entries(self) -> int:
        return sum(len(s) for s in self.row_supports)


def build_locality_mask(system: LtiSystem, d: int, horizon: int) -> LocalityMask:
    """Locality mask for `system` with hop radius d over the given horizon.

    Uses the closed-ball convention: distance <= d is permitted, so d=0
    keeps only each subsystem's own columns.
    """
    if horizon < 2:
        raise ValueError("horizon must be >= 2")
    if d < 0:
        raise ValueError("hop radius must be >= 0")
    part, graph = system.partition, system.graph
    n = part.subsystem_count
    n_x, n_u = part.n_states, part.n_inputs
    t = int(horizon)
    n_rows = n_x * t + n_u * (t - 1)

    balls = [graph.ball(i, d) for i in range(n)]

    # Column support shared by all rows of subsystem i: the states of every
    # subsystem within the ball, ascending because balls are sorted and
    # state ranges are ordered.
    cols_of = [
        np.concatenate([np.arange(*part.state_ranges[j]) for j in balls[i]]).astype(np.int64)
        for i in range(n)
    ]
    # Row support shared by all columns of subsystem i: state rows then
    # input rows of every ball member, time-major like the row ordering.
    rows_of = []
    for i in range(n):
        chunks = []
        for tt in range(t):
            base = tt * n_x
            for j in balls[i]:
                a, b = part.state_ranges[j]
                chunks.append(np.arange(base + a, base + b))
        for tt in range(t - 1):
            base = n_x * t + tt * n_u
            for j in balls[i]:
                a, b = part.input_ranges[j]
                if b > a:
                    chunks.append(np.arange(base + a, base + b))
        rows_of.append(np.concatenate(chunks).astype(np.int64))

    owners_row = phi_row_owners(part, t)
    owners_col = part.state_owner()
    row_supports = tuple(cols_of[owners_row[r]] for r in range(n_rows))
    col_supports = tuple(rows_of[owners_col[c]] for c in range(n_x))
    return LocalityMask(n_rows, n_x, d, row_supports, col_supports)


def longest_vector_lengths(mask: LocalityMask):
    """Exact maxima of row/column support cardinalities, (d_row, d_col)."""
    d_row = max(len(s) for s in mask.row_supports)
    d_col = max(len(s) for s in mask.col_supports)
    return d_row, d_col


def lemma1_bounds(s: int, l: int, d: int, horizon: int):
    """Analytical bounds on (d_row, d_col) for a d-localized mask.

    With at most s states/inputs per subsystem and maximum node degree l,
    a d-hop ball holds at most 1 + l + ... + l^d nodes, hence

        row_bound = s * (l^(d+1) - 1) / (l - 1)
        col_bound = (2*horizon - 1) * row_bound

    For the degenerate degrees the geometric sum collapses: l = 1 gives
    row_bound = s*(d+1) and l = 0 gives row_bound = s. Returned as exact
    integers.
    """
    if s < 1 or horizon < 2 or d < 0 or l < 0:
        raise ValueError("need s >= 1, horizon >= 2, d >= 0, l >= 0")
    if l == 0:
        row_bound = s
    elif l == 1:
        row_bound = s * (d + 1)
    else:
        row_bound = s * ((l ** (d + 1) - 1) // (l - 1))
    return row_bound, (2 * horizon - 1) * row_bound
