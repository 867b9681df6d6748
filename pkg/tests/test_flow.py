import numpy as np
import pytest
import scipy.sparse as sp

from conftest import kernel_reduction_flow, make_operator, random_constrained
from expidae.errors import InconsistentState, NoConvergence, ZeroInitialVector
from expidae.flow import DaeOperator, arnoldi, flow
from expidae.phi import expm


class TestApply:
    def test_zero_maps_to_zero(self):
        rng = np.random.default_rng(0)
        op = make_operator(*random_constrained(rng, 10, 2))
        assert np.linalg.norm(op.apply(np.zeros(10))) == 0.0

    def test_unconstrained_identity_mass(self):
        rng = np.random.default_rng(1)
        A = rng.standard_normal((6, 6))
        op = make_operator(np.eye(6), A, np.zeros((0, 6)))
        x0 = rng.standard_normal(6)
        np.testing.assert_allclose(op.apply(x0), -A @ x0, rtol=1e-12, atol=1e-14)

    def test_hand_solved_3x3(self):
        # M = I, A = I, B = [1 1], x0 = (1, -1): y = (-1, 1), mu = 0
        op = make_operator(np.eye(2), np.eye(2), np.array([[1.0, 1.0]]))
        y = op.apply(np.array([1.0, -1.0]))
        np.testing.assert_allclose(y, [-1.0, 1.0], atol=1e-14)
        mu = op.multiplier_at(np.array([1.0, -1.0]))
        np.testing.assert_allclose(mu, [0.0], atol=1e-14)

    def test_result_in_kernel(self):
        rng = np.random.default_rng(2)
        M, A, B = random_constrained(rng, 30, 4)
        op = make_operator(M, A, B)
        x0 = op.project(rng.standard_normal(30))
        y = op.apply(x0)
        assert np.linalg.norm(B @ y) <= 1e-11 * np.linalg.norm(y)


class TestArnoldi:
    def test_eigenvector_breaks_down_immediately(self):
        op = make_operator(np.eye(3), np.diag([1.0, 2.0, 3.0]), np.zeros((0, 3)))
        V, H, h_next = arnoldi(op, np.array([1.0, 0.0, 0.0]), 5)
        assert H.shape == (1, 1)
        np.testing.assert_allclose(H, [[-1.0]], atol=1e-14)
        assert h_next == 0.0

    def test_single_step_rayleigh_quotient(self):
        rng = np.random.default_rng(3)
        M, A, B = random_constrained(rng, 12, 2)
        op = make_operator(M, A, B)
        x0 = op.project(rng.standard_normal(12))
        v1 = x0 / np.linalg.norm(x0)
        V, H, h_next = arnoldi(op, x0, 1)
        np.testing.assert_allclose(H, [[v1 @ op.apply(v1)]], rtol=1e-12)

    def test_orthonormality_and_relation(self):
        rng = np.random.default_rng(4)
        M, A, B = random_constrained(rng, 20, 2)
        op = make_operator(M, A, B)
        x0 = op.project(rng.standard_normal(20))
        V, H, h_next = arnoldi(op, x0, 12)
        r = H.shape[0]
        assert np.linalg.norm(V.T @ V - np.eye(r)) <= 1e-10
        # X V = V H + h_next v_{r+1} e_r^T; without v_{r+1} the defect
        # is confined to the last column with magnitude h_next.
        XV = np.column_stack([op.apply(V[:, j]) for j in range(r)])
        defect = XV - V @ H
        scale = max(np.linalg.norm(H), 1.0)
        assert np.linalg.norm(defect[:, :-1]) <= 1e-9 * scale
        assert abs(np.linalg.norm(defect[:, -1]) - h_next) <= 1e-9 * scale

    def test_zero_vector_raises(self):
        op = make_operator(np.eye(2), np.eye(2), np.zeros((0, 2)))
        with pytest.raises(ZeroInitialVector):
            arnoldi(op, np.zeros(2), 3)


class TestFlow:
    def test_time_zero_identity(self):
        rng = np.random.default_rng(5)
        M, A, B = random_constrained(rng, 8, 1)
        op = make_operator(M, A, B)
        x0 = op.project(rng.standard_normal(8))
        result = flow(op, x0, 0.0)
        np.testing.assert_array_equal(result.state, x0)
        assert result.substeps == 0

    def test_zero_state_flows_to_zero(self):
        op = make_operator(np.eye(3), np.eye(3), np.zeros((0, 3)))
        result = flow(op, np.zeros(3), 1.0)
        assert np.linalg.norm(result.state) == 0.0

    def test_unconstrained_matches_dense_exponential(self):
        rng = np.random.default_rng(6)
        n = 60
        A = rng.standard_normal((n, n))
        A = A @ A.T / n + 0.5 * np.eye(n)
        op = make_operator(np.eye(n), A, np.zeros((0, n)))
        x0 = rng.standard_normal(n)
        result = flow(op, x0, 1.0, tol=1e-10)
        expected = expm(-A) @ x0
        assert np.linalg.norm(result.state - expected) <= 1e-8 * np.linalg.norm(expected)

    def test_constrained_matches_kernel_reduction_oracle(self):
        rng = np.random.default_rng(7)
        for _ in range(10):
            n = int(rng.integers(10, 80))
            m = int(rng.integers(1, 5))
            M, A, B = random_constrained(rng, n, m, symmetric=bool(rng.integers(2)))
            op = make_operator(M, A, B)
            x0 = op.project(rng.standard_normal(n))
            result = flow(op, x0, 1.0, tol=1e-10)
            oracle = kernel_reduction_flow(M, A, B, x0, 1.0)
            assert np.linalg.norm(result.state - oracle) <= 1e-8 * np.linalg.norm(oracle)
            assert result.residual_estimate <= 1e-10

    def test_constraint_preserved(self):
        rng = np.random.default_rng(8)
        M, A, B = random_constrained(rng, 40, 3)
        op = make_operator(M, A, B)
        x0 = op.project(rng.standard_normal(40))
        result = flow(op, x0, 2.0)
        defect = np.linalg.norm(B @ result.state)
        assert defect <= 1e-10 * np.linalg.norm(result.state)

    def test_semigroup_property(self):
        rng = np.random.default_rng(9)
        M, A, B = random_constrained(rng, 25, 2)
        op = make_operator(M, A, B)
        x0 = op.project(rng.standard_normal(25))
        once = flow(op, x0, 1.0, tol=1e-11).state
        twice = flow(op, flow(op, x0, 0.4, tol=1e-11).state, 0.6, tol=1e-11).state
        assert np.linalg.norm(once - twice) <= 1e-7 * np.linalg.norm(once)

    def test_linearity(self):
        rng = np.random.default_rng(10)
        M, A, B = random_constrained(rng, 25, 2)
        op = make_operator(M, A, B)
        x0 = op.project(rng.standard_normal(25))
        y0 = op.project(rng.standard_normal(25))
        alpha, beta = 1.7, -0.4
        combined = flow(op, alpha * x0 + beta * y0, 1.0, tol=1e-11).state
        separate = alpha * flow(op, x0, 1.0, tol=1e-11).state + beta * flow(
            op, y0, 1.0, tol=1e-11
        ).state
        assert np.linalg.norm(combined - separate) <= 1e-8 * np.linalg.norm(combined)

    def test_inconsistent_initial_state_raises(self):
        op = make_operator(np.eye(2), np.eye(2), np.array([[1.0, 0.0]]))
        with pytest.raises(InconsistentState):
            flow(op, np.array([1.0, 1.0]), 1.0)

    def test_substep_limit_exhaustion(self):
        # Oscillation-dominated operator (no decay to hide behind) with
        # a tiny basis cap and budget.
        rng = np.random.default_rng(13)
        n = 40
        skew = rng.standard_normal((n, n))
        A = 0.1 * np.eye(n) + 50.0 * (skew - skew.T)
        op = make_operator(np.eye(n), A, np.zeros((0, n)))
        with pytest.raises(NoConvergence):
            flow(op, np.ones(n), 1.0, tol=1e-12, r_max=3, substep_limit=4)

    def test_substepping_recovers_accuracy(self):
        # Oscillatory part forces interval halving at a small basis cap
        # without losing the oracle answer.
        rng = np.random.default_rng(11)
        n = 30
        M, A, B = random_constrained(rng, n, 2)
        skew = rng.standard_normal((n, n))
        skew = skew - skew.T
        A = A + 60.0 * skew / np.linalg.norm(skew, 2)
        op = make_operator(M, A, B)
        x0 = op.project(rng.standard_normal(n))
        result = flow(op, x0, 1.0, tol=1e-10, r_max=20)
        assert result.substeps > 1
        oracle = kernel_reduction_flow(M, A, B, x0, 1.0)
        assert np.linalg.norm(result.state - oracle) <= 1e-8 * np.linalg.norm(oracle)

    def test_preprojection_drift_small(self):
        # The final projection is a safety net: the raw Krylov endpoint
        # must already sit near the constraint manifold.
        from expidae.flow import _flow_recursive

        rng = np.random.default_rng(21)
        M, A, B = random_constrained(rng, 60, 4)
        op = make_operator(M, A, B)
        x0 = op.project(rng.standard_normal(60))
        raw, *_ = _flow_recursive(op, x0, 1.0, 1e-10, 60, [30], 0)
        drift = np.linalg.norm(B @ raw) / np.linalg.norm(raw)
        assert drift <= 1e-7

    def test_multiplier_recovery(self):
        rng = np.random.default_rng(12)
        M, A, B = random_constrained(rng, 20, 2)
        op = make_operator(M, A, B)
        x0 = op.project(rng.standard_normal(20))
        result = flow(op, x0, 0.5, recover_multiplier=True)
        # mu solves M y + B^T mu = -A x_t for the returned x_t.
        block = np.block([[M, B.T], [B, np.zeros((2, 2))]])
        sol = np.linalg.solve(block, np.concatenate([-A @ result.state, np.zeros(2)]))
        np.testing.assert_allclose(result.multiplier, sol[20:], rtol=1e-9, atol=1e-11)

    def test_negative_time_rejected(self):
        op = make_operator(np.eye(2), np.eye(2), np.zeros((0, 2)))
        with pytest.raises(ValueError):
            flow(op, np.ones(2), -1.0)
