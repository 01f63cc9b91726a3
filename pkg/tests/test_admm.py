import numpy as np
import pytest
import scipy.optimize
import scipy.sparse as sp

import locality_mpc as lm
from locality_mpc.admm import AdmmWorkspace, column_residuals
from locality_mpc.sls_core import RowPrecomp

from conftest import build_bundle


def row_solve_oracle(weight, rho, a, v, lo, hi):
    """Brute-force reference for the explicit row solve.

    Reduces the subproblem to the scalar y = p.a and minimizes the reduced
    objective numerically over the admissible interval, then lifts back.
    Independent of the closed form under test.
    """
    a = np.asarray(a, float)
    v = np.asarray(v, float)
    ada = float(a @ a)
    if ada == 0.0:
        return v.copy()
    c = float(v @ a)

    def reduced(y):
        return weight * y * y + 0.5 * rho * (y - c) ** 2 / ada

    res = scipy.optimize.minimize_scalar(
        reduced, bounds=(max(lo, -1e9), min(hi, 1e9)), method="bounded",
        options={"xatol": 1e-12})
    y = float(res.x)
    return v + ((y - c) / ada) * a


def make_row(a, weight=1.0, lo=-np.inf, hi=np.inf):
    a = np.asarray(a, float)
    return RowPrecomp(0, np.arange(a.size), a, float(a @ a), weight, lo, hi)


class TestPhiRowSolve:
    def test_penalty_only_returns_v(self):
        row = make_row([2.0, -1.0], weight=0.0)
        v = np.array([0.3, 0.7])
        np.testing.assert_array_equal(lm.phi_row_solve(row, v), v)

    def test_zero_state_vacuous_bounds(self):
        row = make_row([0.0, 0.0], weight=1.0, lo=-1.0, hi=1.0)
        v = np.array([0.4, -0.2])
        np.testing.assert_array_equal(lm.phi_row_solve(row, v), v)

    def test_unconstrained_two_variable_case(self):
        row = make_row([1.0, 0.0], weight=1.0)
        v = np.array([1.0, 1.0])
        got = lm.phi_row_solve(row, v, rho=1.0)
        np.testing.assert_allclose(got, [1.0 / 3.0, 1.0], atol=1e-12)
        ref = row_solve_oracle(1.0, 1.0, row.a, v, -np.inf, np.inf)
        np.testing.assert_allclose(got, ref, atol=1e-8)

    def test_lower_bound_active(self):
        row = make_row([1.0, 0.0], weight=1.0, lo=0.5, hi=2.0)
        v = np.array([1.0, 1.0])
        got = lm.phi_row_solve(row, v, rho=1.0)
        np.testing.assert_allclose(got, [0.5, 1.0], atol=1e-12)
        ref = row_solve_oracle(1.0, 1.0, row.a, v, 0.5, 2.0)
        np.testing.assert_allclose(got, ref, atol=1e-7)

    def test_zero_state_excluding_bounds_raises(self):
        row = make_row([0.0], weight=1.0, lo=0.5, hi=1.0)
        with pytest.raises(lm.RowInfeasible):
            lm.phi_row_solve(row, np.array([0.0]))

    def test_random_cases_match_oracle_and_clamp_exactly(self, rng):
        for _ in range(50):
            k = int(rng.integers(1, 6))
            a = rng.standard_normal(k)
            v = rng.standard_normal(k)
            w = float(rng.uniform(0, 3))
            rho = float(rng.uniform(0.2, 4))
            lo, hi = sorted(rng.uniform(-2, 2, 2))
            row = make_row(a, weight=w, lo=lo, hi=hi)
            got = lm.phi_row_solve(row, v, rho=rho)
            assert lo - 1e-12 <= float(got @ a) <= hi + 1e-12
            ref = row_solve_oracle(w, rho, a, v, lo, hi)
            obj = lambda p: w * float(p @ a) ** 2 + 0.5 * rho * float((p - v) @ (p - v))
            assert obj(got) <= obj(ref) + 1e-9


class TestPsiColumnSolve:
    def make_pre(self, g, rhs):
        g = np.atleast_2d(np.asarray(g, float))
        rhs = np.atleast_1d(np.asarray(rhs, float))
        projector = g.T @ np.linalg.inv(g @ g.T)
        return lm.ColumnPrecomp(0, np.arange(g.shape[1]), np.arange(g.shape[0]),
                                g, rhs, projector)

    def test_feasible_point_unchanged(self):
        pre = self.make_pre([[1.0, 0.0], [0.0, 1.0]], [0.2, -0.4])
        k = np.array([0.2, -0.4])
        np.testing.assert_allclose(lm.psi_column_solve(pre, k), k, atol=1e-14)

    def test_min_norm_single_equation(self):
        pre = self.make_pre([[1.0, 1.0]], [1.0])
        got = lm.psi_column_solve(pre, np.zeros(2))
        np.testing.assert_allclose(got, [0.5, 0.5], atol=1e-14)

    def test_identity_constraint_pins_everything(self, rng):
        rhs = rng.standard_normal(3)
        pre = self.make_pre(np.eye(3), rhs)
        got = lm.psi_column_solve(pre, rng.standard_normal(3))
        np.testing.assert_allclose(got, rhs, atol=1e-14)

    def test_matches_projection_oracle(self, rng):
        for _ in range(20):
            m, n = int(rng.integers(1, 4)), int(rng.integers(4, 8))
            g = rng.standard_normal((m, n))
            rhs = rng.standard_normal(m)
            k = rng.standard_normal(n)
            pre = self.make_pre(g, rhs)
            got = lm.psi_column_solve(pre, k)
            ref = k - np.linalg.pinv(g) @ (g @ k - rhs)
            np.testing.assert_allclose(got, ref, atol=1e-10)


class TestLambdaAndResiduals:
    def test_lambda_consensus_fixed(self):
        lam = np.array([0.1, -0.2])
        phi = psi = np.array([1.0, 2.0])
        np.testing.assert_array_equal(lm.lambda_update(lam, phi, psi), lam)

    def test_lambda_arithmetic(self):
        out = lm.lambda_update(np.array([0.5]), np.array([1.0]), np.array([0.25]))
        np.testing.assert_array_equal(out, [1.25])
        np.testing.assert_array_equal(
            lm.lambda_update(np.zeros(2), np.zeros(2), np.zeros(2)), np.zeros(2))

    def test_lambda_shape_mismatch(self):
        with pytest.raises(ValueError):
            lm.lambda_update(np.zeros(2), np.zeros(3), np.zeros(2))

    def make_single_entry_triple(self, phi, psi, psi_prev):
        system = lm.build_chain_network(1)
        mask = lm.build_locality_mask(system, 0, 2)
        tables = lm.LayoutTables(mask)
        triple = lm.PhiTriple(tables)
        triple.phi_c[0, 0] = phi
        triple.psi_c[0, 0] = psi
        prev = triple.psi_prev_c[0].copy()
        prev[0] = psi_prev
        return triple, prev

    def test_residuals_fixed_point(self):
        triple, prev = self.make_single_entry_triple(0.5, 0.5, 0.5)
        assert column_residuals(triple, 0, prev, rho=1.0) == (0.0, 0.0)

    def test_residuals_direct_arithmetic(self):
        triple, prev = self.make_single_entry_triple(1.0, 0.75, 0.5)
        assert column_residuals(triple, 0, prev, rho=1.0) == (0.25, 0.25)

    def test_rho_scales_dual_only(self):
        triple, prev = self.make_single_entry_triple(1.0, 0.75, 0.5)
        pri, dual = column_residuals(triple, 0, prev, rho=2.0)
        assert (pri, dual) == (0.25, 0.5)


class TestAdmmSolve:
    def solve(self, bundle, x, strategy="sequential", zero_start=True):
        rd = lm.precompute_row_data(x, bundle["spec"], bundle["tables"],
                                    bundle["metas"])
        triple = lm.PhiTriple(bundle["tables"])
        state = lm.admm_solve(rd, bundle["col_solvers"], triple, bundle["spec"],
                              lm.ExecStrategy(strategy))
        return state, triple, rd

    def test_benchmark_converges_within_tolerance(self, rng):
        bundle = build_bundle(3, 3, 1)
        x = lm.sample_initial_state(bundle["system"].partition, rng)
        state, triple, _ = self.solve(bundle, x)
        pri, dual = state.residual_history[-1]
        assert state.converged and pri <= 1e-4 and dual <= 1e-4
        assert len(state.residual_history) == state.iterations

    def test_huge_tolerance_converges_immediately(self, rng):
        bundle = build_bundle(2, 3, 1, eps=1e6)
        x = lm.sample_initial_state(bundle["system"].partition, rng)
        state, _, _ = self.solve(bundle, x)
        assert state.iterations == 1

    def test_iteration_cap_raises_with_history(self, rng):
        bundle = build_bundle(3, 3, 1, max_iters=2, eps=1e-12)
        x = lm.sample_initial_state(bundle["system"].partition, rng)
        with pytest.raises(lm.NotConverged) as exc:
            self.solve(bundle, x)
        assert len(exc.value.residual_history) == 2

    def test_bound_satisfaction_after_every_row_stage(self, rng):
        # the explicit solve clamps exactly whenever the row has signal mass
        bundle = build_bundle(3, 4, 1)
        x = lm.sample_initial_state(bundle["system"].partition, rng)
        rd = lm.precompute_row_data(x, bundle["spec"], bundle["tables"],
                                    bundle["metas"])
        triple = lm.PhiTriple(bundle["tables"])
        ws = AdmmWorkspace(triple, bundle["col_solvers"], bundle["spec"],
                           row_data=rd)
        with lm.Executor(lm.ExecStrategy("sequential")) as executor:
            for _ in range(25):
                executor.run_iteration(ws)
                predicted = ws._phi_compute(slice(0, ws.n_rows))
                y = np.array([float(predicted[r] @ rd.a_pad[r])
                              for r in range(ws.n_rows)])
                live = rd.a_dot_a > 0
                assert np.all(y[live] >= rd.lo[live] - 1e-6)
                assert np.all(y[live] <= rd.hi[live] + 1e-6)


class TestControlAndDynamics:
    def test_zero_gain_zero_input(self, rng):
        bundle = build_bundle(2, 3, 1)
        triple = lm.PhiTriple(bundle["tables"])
        u = lm.extract_control(triple, rng.standard_normal(4), bundle["metas"])
        np.testing.assert_array_equal(u, np.zeros(2))

    def test_single_subsystem_dot_product(self):
        bundle = build_bundle(1, 2, 0)
        triple = lm.PhiTriple(bundle["tables"])
        input_row = 2 * 2      # one subsystem, two state blocks, then input
        triple.phi_r[input_row, :2] = [1.0, 2.0]
        u = lm.extract_control(triple, np.array([3.0, 4.0]), bundle["metas"])
        np.testing.assert_allclose(u, [11.0])
        np.testing.assert_array_equal(
            lm.extract_control(triple, np.zeros(2), bundle["metas"]), [0.0])

    def test_step_dynamics_equilibrium(self):
        system = lm.build_chain_network(2)
        out = lm.step_dynamics(system, np.zeros(4), np.zeros(2))
        np.testing.assert_array_equal(out, np.zeros(4))

    def test_step_dynamics_isolated_node(self):
        system = lm.build_chain_network(1)
        out = lm.step_dynamics(system, np.array([1.0, 0.0]), np.zeros(1))
        np.testing.assert_allclose(out, [1.0, -0.3])

    def test_step_dynamics_chain_coupling(self):
        system = lm.build_chain_network(2)
        out = lm.step_dynamics(system, np.array([0.0, 0.0, 1.0, 0.0]), np.zeros(2))
        np.testing.assert_allclose(out[:2], [0.0, 0.1])

    def test_dimension_check(self):
        system = lm.build_chain_network(2)
        with pytest.raises(ValueError):
            lm.step_dynamics(system, np.zeros(3), np.zeros(2))


class TestClosedLoopCost:
    def test_zero_trajectory(self):
        traj = lm.Trajectory(np.zeros((4, 3)), np.zeros((3, 1)), [0] * 3)
        assert lm.closed_loop_cost(traj) == 0.0

    def test_quadratic_homogeneity(self, rng):
        states = rng.standard_normal((5, 4))
        inputs = rng.standard_normal((4, 2))
        base = lm.closed_loop_cost(lm.Trajectory(states, inputs, [0] * 4))
        doubled = lm.closed_loop_cost(lm.Trajectory(2 * states, 2 * inputs, [0] * 4))
        np.testing.assert_allclose(doubled, 4 * base, rtol=1e-12)

    def test_unit_state_three_steps(self):
        traj = lm.Trajectory(np.ones((3, 1)), np.zeros((2, 0)), [0] * 2)
        assert lm.closed_loop_cost(traj) == 3.0


class TestSimulate:
    def test_zero_initial_state_stays_at_origin(self):
        bundle = build_bundle(3, 3, 1)
        traj, report = lm.dlmpc_simulate(bundle["system"], bundle["spec"],
                                         bundle["mask"], np.zeros(6), 5,
                                         lm.ExecStrategy("fused"))
        assert np.max(np.abs(traj.states)) <= 1e-9
        assert report.converged_all_steps
        # once warm-started at the fixed point, later steps converge at once
        assert report.per_step_iters[-1] == 1

    def test_benchmark_band_holds(self, rng):
        bundle = build_bundle(10, 5, 2)
        x0 = lm.sample_initial_state(bundle["system"].partition, rng)
        traj, _ = lm.dlmpc_simulate(bundle["system"], bundle["spec"],
                                    bundle["mask"], x0, 20,
                                    lm.ExecStrategy("patch-local"))
        firsts = traj.states[:, 0::2]
        assert firsts.min() >= -0.2 - 1e-6 and firsts.max() <= 1.2 + 1e-6

    def test_not_converged_carries_step(self, rng):
        bundle = build_bundle(3, 3, 1, max_iters=1, eps=1e-12)
        x0 = lm.sample_initial_state(bundle["system"].partition, rng)
        with pytest.raises(lm.NotConverged) as exc:
            lm.dlmpc_simulate(bundle["system"], bundle["spec"], bundle["mask"],
                              x0, 3, lm.ExecStrategy("sequential"))
        assert exc.value.step == 0

    def test_dynamics_recursion_is_exact(self, rng):
        bundle = build_bundle(4, 4, 1)
        x0 = lm.sample_initial_state(bundle["system"].partition, rng)
        traj, _ = lm.dlmpc_simulate(bundle["system"], bundle["spec"],
                                    bundle["mask"], x0, 6,
                                    lm.ExecStrategy("naive"))
        for t in range(traj.inputs.shape[0]):
            expected = lm.step_dynamics(bundle["system"], traj.states[t],
                                        traj.inputs[t])
            np.testing.assert_array_equal(traj.states[t + 1], expected)


class TestVerifyFixedPoint:
    def test_exact_fixed_point_by_construction(self):
        # one subsystem, one state, no inputs, zero dynamics: the constraint
        # pins the whole column and a zero measured state kills the costs
        part = lm.SubsystemPartition(((0, 1),), ((0, 0),))
        graph = lm.SubsystemGraph.from_edges(1, [])
        system = lm.LtiSystem(sp.csr_matrix((1, 1)), sp.csr_matrix((1, 0)),
                              part, graph)
        mask = lm.build_locality_mask(system, 0, 2)
        tables = lm.LayoutTables(mask)
        operator = lm.build_dynamics_operator(system, 2)
        spec = lm.make_benchmark_spec(system, 2, bounded=False)
        metas = lm.row_index_map(part, 2, spec)
        rd = lm.precompute_row_data(np.zeros(1), spec, tables, metas)
        triple = lm.PhiTriple(tables)
        pinned = np.array([1.0, 0.0])        # identity block then zero block
        triple.phi_r[:, 0] = pinned
        triple.psi_r[:, 0] = pinned
        triple.exchange_phi_row_to_col()
        triple.psi_c[:] = triple.phi_c
        report = lm.verify_fixed_point(triple, rd, operator, spec)
        assert (report.dynamics_residual, report.resolve_residual,
                report.consensus_gap) == (0.0, 0.0, 0.0)

    def test_converged_solve_passes_audit(self, rng):
        bundle = build_bundle(4, 4, 2)
        x0 = lm.sample_initial_state(bundle["system"].partition, rng)
        rd = lm.precompute_row_data(x0, bundle["spec"], bundle["tables"],
                                    bundle["metas"])
        triple = lm.PhiTriple(bundle["tables"])
        lm.admm_solve(rd, bundle["col_solvers"], triple, bundle["spec"],
                      lm.ExecStrategy("fused"))
        report = lm.verify_fixed_point(triple, rd, bundle["operator"],
                                       bundle["spec"])
        assert report.passed
        assert report.dynamics_residual <= 1e-3
        assert report.resolve_residual <= 1e-3
        assert report.consensus_gap <= 1e-3

    def test_audit_detects_perturbation(self, rng):
        bundle = build_bundle(4, 4, 2)
        x0 = lm.sample_initial_state(bundle["system"].partition, rng)
        rd = lm.precompute_row_data(x0, bundle["spec"], bundle["tables"],
                                    bundle["metas"])
        triple = lm.PhiTriple(bundle["tables"])
        lm.admm_solve(rd, bundle["col_solvers"], triple, bundle["spec"],
                      lm.ExecStrategy("fused"))
        triple.phi_r[0, 0] += 0.1
        report = lm.verify_fixed_point(triple, rd, bundle["operator"],
                                       bundle["spec"])
        assert report.resolve_residual >= 0.09
        assert not report.passed
