import threading

import numpy as np
import pytest

import locality_mpc as lm
from locality_mpc.admm import AdmmWorkspace
from locality_mpc.strategies import (WORKERS_ENV_VAR, WorkerPool,
                                     default_worker_count, prepare_work_items)

from conftest import build_bundle, single_state_chain

EXPECTED = {
    # variant: (host syncs, kernel launches, flag reads)
    "sequential": (0, 0, 0),
    "naive": (4, 4, 0),
    "padded": (4, 4, 0),
    "fused": (1, 2, 1),
    "patch-local": (0, 1, 1),
}


class TestExecStrategy:
    def test_rejects_unknown_variant(self):
        with pytest.raises(ValueError):
            lm.ExecStrategy("speculative")

    def test_rejects_nonpositive_workers(self):
        with pytest.raises(ValueError):
            lm.ExecStrategy("naive", 0)

    def test_sequential_ignores_workers(self):
        assert lm.ExecStrategy("sequential", 16).resolved_workers() == 1

    def test_env_var_default(self, monkeypatch):
        monkeypatch.setenv(WORKERS_ENV_VAR, "3")
        assert default_worker_count() == 3
        assert lm.ExecStrategy("fused").resolved_workers() == 3
        monkeypatch.setenv(WORKERS_ENV_VAR, "garbage")
        assert default_worker_count() >= 1


class TestWorkerPool:
    def test_covers_range_disjointly(self):
        pool = WorkerPool(3)
        seen = []
        lock = threading.Lock()

        def body(lo, hi):
            with lock:
                seen.extend(range(lo, hi))

        pool.parallel_for(11, body)
        pool.close()
        assert sorted(seen) == list(range(11))

    def test_single_worker_runs_inline(self):
        pool = WorkerPool(1)
        calls = []
        pool.parallel_for(5, lambda lo, hi: calls.append((lo, hi)))
        assert calls == [(0, 5)]
        pool.close()

    def test_propagates_worker_errors(self):
        pool = WorkerPool(2)

        def body(lo, hi):
            raise RuntimeError("boom")

        with pytest.raises(RuntimeError):
            pool.parallel_for(4, body)
        pool.close()


class TestPatches:
    def test_disjoint_supports_have_zero_duplication(self):
        system, mask = single_state_chain(3, 3, d=0)
        tables = lm.LayoutTables(mask)
        patches = lm.build_patches(tables)
        assert len(patches) == 3
        assert lm.patch_duplication(patches) == 0

    def test_full_mask_duplication(self):
        bundle = build_bundle(3, 3, 2)       # d covers the diameter: full mask
        tables = bundle["tables"]
        patches = lm.build_patches(tables)
        n_rows, n_cols = tables.n_rows, tables.n_cols
        assert lm.patch_duplication(patches) == n_rows * (n_cols - 1)

    def test_patch_sizes_match_column_nnz(self):
        bundle = build_bundle(3, 2, 1)
        patches = lm.build_patches(bundle["tables"])
        for patch in patches:
            expected = len(bundle["mask"].col_supports[patch.column])
            assert patch.member_rows.size == expected

    def test_duplication_bound(self):
        for n, d, t in [(4, 1, 3), (5, 2, 2), (6, 1, 4)]:
            bundle = build_bundle(n, t, d)
            tables = bundle["tables"]
            patches = lm.build_patches(tables)
            assert lm.patch_duplication(patches) <= (tables.d_col - 1) * tables.n_rows


class TestReduceConvergence:
    def test_all_zero_converged(self):
        pri, dual, ok = lm.reduce_convergence(np.zeros(4), np.zeros(4), 1e-4, 1e-4)
        assert ok and pri == 0.0 and dual == 0.0

    def test_single_offender_blocks(self):
        pri_c = np.array([0.0, 1.0, 0.0])
        _, _, ok = lm.reduce_convergence(pri_c, np.zeros(3), 1e-4, 1e-4)
        assert not ok

    def test_permutation_invariant(self, rng):
        pri_c = rng.uniform(0, 1, 10)
        dual_c = rng.uniform(0, 1, 10)
        perm = rng.permutation(10)
        assert lm.reduce_convergence(pri_c, dual_c, 1e-4, 1e-4) == \
            lm.reduce_convergence(pri_c[perm], dual_c[perm], 1e-4, 1e-4)


class TestWorkItemPreparation:
    def test_exact_size_schedules_store_per_item_sizes(self):
        bundle = build_bundle(3, 3, 1)
        ledger = lm.SyncLedger.for_variant("naive")
        sizes = prepare_work_items(lm.ExecStrategy("naive"), bundle["tables"], ledger)
        assert len(sizes[0]) == bundle["tables"].n_rows
        assert ledger.setup_wall_time > 0.0

    def test_padded_schedules_store_two_strides(self):
        bundle = build_bundle(3, 3, 1)
        ledger = lm.SyncLedger.for_variant("padded")
        sizes = prepare_work_items(lm.ExecStrategy("padded"), bundle["tables"], ledger)
        assert sizes == (bundle["tables"].d_row, bundle["tables"].d_col)


def make_solve_setup(bundle, x, strategy, workers=None):
    rd = lm.precompute_row_data(x, bundle["spec"], bundle["tables"], bundle["metas"])
    triple = lm.PhiTriple(bundle["tables"])
    patches = (lm.build_patches(bundle["tables"])
               if strategy == "patch-local" else None)
    ws = AdmmWorkspace(triple, bundle["col_solvers"], bundle["spec"],
                       patches=patches, row_data=rd)
    executor = lm.Executor(lm.ExecStrategy(strategy, workers))
    return ws, executor, triple


class TestLedgerCounts:
    @pytest.mark.parametrize("strategy", list(EXPECTED))
    def test_per_iteration_constants(self, strategy, rng):
        bundle = build_bundle(4, 3, 1)
        x = lm.sample_initial_state(bundle["system"].partition, rng)
        ws, executor, _ = make_solve_setup(bundle, x, strategy, workers=2)
        for _ in range(3):
            executor.run_iteration(ws)
        led = executor.ledger
        executor.close()
        syncs, launches, flags = EXPECTED[strategy]
        assert led.host_syncs_per_iter == syncs
        assert led.kernel_launches_per_iter == launches
        assert led.flag_reads_per_iter == flags
        assert led.iterations == 3
        assert led.counts_consistent()

    def test_patch_duplication_accumulates(self, rng):
        bundle = build_bundle(3, 3, 1)
        x = lm.sample_initial_state(bundle["system"].partition, rng)
        ws, executor, _ = make_solve_setup(bundle, x, "patch-local")
        per_iter = ws.duplicated_rows_per_iter
        assert per_iter == lm.patch_duplication(ws.patches)
        for _ in range(4):
            executor.run_iteration(ws)
        assert executor.ledger.duplicated_row_computations == 4 * per_iter
        executor.close()

    def test_stage_times_recorded(self, rng):
        bundle = build_bundle(3, 3, 1)
        x = lm.sample_initial_state(bundle["system"].partition, rng)
        ws, executor, _ = make_solve_setup(bundle, x, "fused")
        executor.run_iteration(ws)
        assert {"phi", "exchange", "fused"} <= set(executor.ledger.stage_wall_times)
        executor.close()


class TestScheduleEquivalence:
    def test_iteration_by_iteration_bitwise_identical(self, rng):
        bundle = build_bundle(6, 4, 1)
        x = lm.sample_initial_state(bundle["system"].partition, rng)
        setups = {name: make_solve_setup(bundle, x, name, workers=2)
                  for name in EXPECTED}
        ref_name = "sequential"
        for it in range(30):
            residuals = {}
            for name, (ws, executor, triple) in setups.items():
                residuals[name] = executor.run_iteration(ws)
            ref = setups[ref_name][2]
            for name, (ws, executor, triple) in setups.items():
                assert residuals[name] == residuals[ref_name], (it, name)
                for arr, ref_arr in ((triple.phi_r, ref.phi_r),
                                     (triple.psi_r, ref.psi_r),
                                     (triple.lam_r, ref.lam_r),
                                     (triple.phi_c, ref.phi_c),
                                     (triple.psi_c, ref.psi_c),
                                     (triple.lam_c, ref.lam_c)):
                    assert np.array_equal(arr, ref_arr), (it, name)
        for ws, executor, triple in setups.values():
            executor.close()

    def test_worker_count_independence(self, rng):
        bundle = build_bundle(5, 4, 2)
        x = lm.sample_initial_state(bundle["system"].partition, rng)
        finals = []
        for workers in (1, 2, 8):
            ws, executor, triple = make_solve_setup(bundle, x, "naive", workers)
            for _ in range(20):
                executor.run_iteration(ws)
            executor.close()
            finals.append(triple.phi_r.copy())
        assert np.array_equal(finals[0], finals[1])
        assert np.array_equal(finals[0], finals[2])

    def test_layouts_agree_after_each_iteration(self, rng):
        bundle = build_bundle(4, 3, 1)
        x = lm.sample_initial_state(bundle["system"].partition, rng)
        for strategy in ("naive", "fused", "patch-local"):
            ws, executor, triple = make_solve_setup(bundle, x, strategy)
            for _ in range(10):
                executor.run_iteration(ws)
                assert triple.layout_disagreement() == 0.0
                assert triple.padding_leak() == 0.0
            executor.close()
