import numpy as np
import pytest
import scipy.sparse as sp

import locality_mpc as lm


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def build_bundle(n, horizon, d, bounded=True, eps=1e-4, coupling_radius=1,
                 max_iters=5000):
    """Everything a solve needs on the chain benchmark, as a dict."""
    system = lm.build_chain_network(n, coupling_radius)
    spec = lm.make_benchmark_spec(system, horizon, eps=eps, bounded=bounded,
                                  max_iters=max_iters)
    mask = lm.build_locality_mask(system, d, horizon)
    tables = lm.LayoutTables(mask)
    operator = lm.build_dynamics_operator(system, horizon)
    col_solvers = lm.precompute_column_solvers(operator, mask)
    metas = lm.row_index_map(system.partition, horizon, spec)
    return {"system": system, "spec": spec, "mask": mask, "tables": tables,
            "operator": operator, "col_solvers": col_solvers, "metas": metas}


def random_chain_system(n, rng, coupling_radius=1):
    """A chain-sparsity LTI system with random blocks (not the benchmark)."""
    part = lm.SubsystemPartition.uniform(n, 2, 1)
    edges = [(i, j) for i in range(n)
             for j in range(i + 1, min(n, i + coupling_radius + 1))]
    graph = lm.SubsystemGraph.from_edges(n, edges)
    a = sp.lil_matrix((2 * n, 2 * n))
    b = sp.lil_matrix((2 * n, n))
    for i in range(n):
        a[2 * i:2 * i + 2, 2 * i:2 * i + 2] = rng.uniform(-0.5, 0.5, (2, 2))
        b[2 * i:2 * i + 2, i] = rng.uniform(-1, 1, (2, 1))
        for j in range(max(0, i - coupling_radius), min(n, i + coupling_radius + 1)):
            if j != i:
                a[2 * i:2 * i + 2, 2 * j:2 * j + 2] = rng.uniform(-0.2, 0.2, (2, 2))
    return lm.LtiSystem(a.tocsr(), b.tocsr(), part, graph)


def single_state_chain(n, horizon, d=0):
    """Minimal plant: one state per node, no inputs, decoupled dynamics."""
    part = lm.SubsystemPartition(
        tuple((i, i + 1) for i in range(n)), tuple((0, 0) for _ in range(n)))
    edges = [(i, i + 1) for i in range(n - 1)]
    graph = lm.SubsystemGraph.from_edges(n, edges)
    a = sp.csr_matrix((n, n))
    b = sp.csr_matrix((n, 0))
    system = lm.LtiSystem(a, b, part, graph)
    mask = lm.build_locality_mask(system, d, horizon)
    return system, mask
