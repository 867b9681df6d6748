import numpy as np
import pytest
import scipy.sparse as sp

from expidae.errors import NegativeEnergy, SelfCheckFailed
from expidae.harness import (
    ConvergenceTable,
    build_reference,
    emit_csv,
    error_norm,
    fit_order,
    read_convergence_csv,
    run_convergence,
)
from expidae.integrators import ConstrainedSystem, SchemeConfig
from expidae.problems import ToyConfig, build_problem, build_toy


def toy_problem(**kw):
    cfg = dict(n=14, m=3, seed=5)
    cfg.update(kw)
    return build_toy(ToyConfig(**cfg))


class TestErrorNorm:
    def test_zero_vector(self):
        prob = toy_problem()
        for norm in ("energy", "h1", "l2"):
            assert error_norm(prob.system, np.zeros(prob.system.n), norm) == 0.0

    def test_energy_positive_on_kernel(self):
        prob = build_problem("dynbc", n_cells=8)
        s = prob.system
        rng = np.random.default_rng(0)
        v = s.flow_op.project(rng.standard_normal(s.n))
        assert error_norm(s, v, "energy") > 0.0

    def test_l2_is_mass_norm(self):
        prob = toy_problem()
        s = prob.system
        e = np.ones(s.n)
        expected = np.sqrt(e @ (s.mass @ e))
        assert error_norm(s, e, "l2") == pytest.approx(expected, rel=1e-14)

    def test_energy_uses_symmetric_part(self):
        n = 4
        A = np.diag([1.0, 2.0, 3.0, 4.0])
        A[0, 1], A[1, 0] = 5.0, -5.0  # pure skew contribution
        sys_ = ConstrainedSystem(
            sp.eye(n, format="csr"), sp.csr_matrix(A), sp.csr_matrix((0, n)),
            lambda t, x: np.zeros(n), lambda t: np.zeros(0), lambda t: np.zeros(0),
            symmetric=False,
        )
        e = np.array([1.0, 1.0, 0.0, 0.0])
        assert error_norm(sys_, e, "energy") == pytest.approx(np.sqrt(3.0), rel=1e-12)

    def test_negative_energy_raises(self):
        n = 2
        sys_ = ConstrainedSystem(
            sp.eye(n, format="csr"), sp.csr_matrix(np.diag([1.0, -1.0])),
            sp.csr_matrix((0, n)),
            lambda t, x: np.zeros(n), lambda t: np.zeros(0), lambda t: np.zeros(0),
            symmetric=True,
        )
        with pytest.raises(NegativeEnergy):
            error_norm(sys_, np.array([0.0, 1.0]), "energy")

    def test_unknown_norm(self):
        prob = toy_problem()
        with pytest.raises(ValueError):
            error_norm(prob.system, np.zeros(prob.system.n), "sup")


class TestFitOrder:
    def test_exact_power_law(self):
        taus = np.array([0.1 / 2**k for k in range(5)])
        errors = 3.0 * taus**1.7
        assert fit_order(taus, errors, 10.0) == pytest.approx(1.7, abs=1e-12)

    def test_preasymptotic_point_dropped(self):
        taus = np.array([0.1 / 2**k for k in range(5)])
        errors = 2.0 * taus**2
        errors[0] = 8.0  # garbage coarse point, above half the scale
        assert fit_order(taus, errors, 10.0) == pytest.approx(2.0, abs=1e-10)


class TestBuildReference:
    def test_matches_manufactured_solution(self, tmp_path):
        prob = toy_problem()
        ref = build_reference(prob, 1.0, 1.0 / 4096, cache_dir=tmp_path)
        exact = prob.exact(1.0)
        assert np.linalg.norm(ref.state - exact) <= 1e-8 * np.linalg.norm(exact)

    def test_cache_round_trip_bit_identical(self, tmp_path):
        prob = toy_problem()
        first = build_reference(prob, 0.5, 1.0 / 256, cache_dir=tmp_path)
        second = build_reference(prob, 0.5, 1.0 / 256, cache_dir=tmp_path)
        assert not first.from_cache
        assert second.from_cache
        np.testing.assert_array_equal(first.states, second.states)
        np.testing.assert_array_equal(first.check_states, second.check_states)

    def test_snapshot_grid(self, tmp_path):
        prob = toy_problem()
        ref = build_reference(prob, 0.5, 1.0 / 128, snapshot_tau=0.125)
        np.testing.assert_allclose(ref.times, [0.0, 0.125, 0.25, 0.375, 0.5])
        assert ref.states.shape == (5, prob.system.n)
        mid = ref.state_at(0.25)
        exact = prob.exact(0.25)
        assert np.linalg.norm(mid - exact) <= 1e-5 * np.linalg.norm(exact)


class TestRunConvergence:
    def test_toy_against_exact(self):
        prob = toy_problem()
        table = run_convergence(
            prob,
            SchemeConfig(scheme="exp-euler", flow_tol=1e-12),
            [0.1 / 2**k for k in range(4)],
            1.0,
            norm="l2",
            reference="exact",
        )
        assert table.fitted_order == pytest.approx(1.0, abs=0.1)
        assert all(np.diff(table.errors) < 0)
        assert table.local_orders[0] is None
        assert len(table.local_orders) == 4

    def test_toy_against_integrated_reference(self, tmp_path):
        prob = toy_problem()
        taus = [0.1, 0.05, 0.025]
        table = run_convergence(
            prob,
            SchemeConfig(scheme="second-order"),
            taus,
            1.0,
            norm="energy",
            tau_ref=0.025 / 16,
            cache_dir=tmp_path,
        )
        assert table.fitted_order == pytest.approx(2.0, abs=0.15)
        assert table.self_check_gap is not None
        assert table.self_check_gap <= 0.01 * min(table.errors)

    def test_max_sampling_bounds_final(self, tmp_path):
        prob = toy_problem()
        taus = [0.1, 0.05, 0.025]
        kw = dict(norm="l2", tau_ref=0.025 / 16, cache_dir=tmp_path)
        final = run_convergence(prob, SchemeConfig(), taus, 1.0, sample="final", **kw)
        peak = run_convergence(prob, SchemeConfig(), taus, 1.0, sample="max", **kw)
        assert all(p >= f * (1 - 1e-12) for p, f in zip(peak.errors, final.errors))

    def test_coarse_reference_rejected(self):
        prob = toy_problem()
        with pytest.raises(ValueError):
            run_convergence(
                prob, SchemeConfig(), [0.1, 0.05], 1.0, tau_ref=0.05 / 8
            )

    def test_missing_reference_mode(self):
        prob = build_problem("nonsym", n_cells=8)
        with pytest.raises(ValueError):
            run_convergence(
                prob, SchemeConfig(), [0.1, 0.05], 1.0, reference="exact"
            )

    def test_self_check_failure_detected(self, tmp_path):
        # A first-order reference is not converged enough for a
        # second-order ladder at these step sizes.
        prob = toy_problem()
        with pytest.raises(SelfCheckFailed):
            run_convergence(
                prob,
                SchemeConfig(scheme="second-order", flow_tol=1e-13),
                [0.0125, 0.00625],
                1.0,
                norm="l2",
                tau_ref=0.00625 / 16,
                cache_dir=tmp_path,
                ref_scheme=SchemeConfig(scheme="exp-euler"),
            )


class TestCsv:
    def sample_table(self, nrows=2):
        taus = tuple(0.1 / 2**k for k in range(nrows))
        errors = tuple(0.3 * t for t in taus)
        orders = (None,) + tuple(1.0 for _ in range(nrows - 1))
        return ConvergenceTable(
            problem="toy", scheme="exp-euler", norm="l2", h=None,
            taus=taus, errors=errors, local_orders=orders,
            fitted_order=1.0, reference_scale=2.0, max_constraint_residual=1e-12,
        )

    def test_empty_table(self, tmp_path):
        table = ConvergenceTable(
            problem="toy", scheme="exp-euler", norm="l2", h=0.125,
            taus=(), errors=(), local_orders=(),
            fitted_order=float("nan"), reference_scale=1.0,
            max_constraint_residual=0.0,
        )
        path = tmp_path / "empty.csv"
        emit_csv(table, path)
        lines = path.read_text().splitlines()
        assert lines[-1] == "tau,error,local_order"
        assert all(line.startswith("#") for line in lines[:-1])

    def test_two_rows_have_one_local_order(self, tmp_path):
        path = tmp_path / "two.csv"
        emit_csv(self.sample_table(2), path)
        _, rows = read_convergence_csv(path)
        assert rows[0][2] is None
        assert rows[1][2] == pytest.approx(1.0)

    def test_round_trip_exact(self, tmp_path):
        table = ConvergenceTable(
            problem="dynbc", scheme="second-order", norm="energy", h=1 / 32,
            taus=(0.05, 0.025, 0.0125),
            errors=(1.234567890123456e-3, 3.086419725308640e-4, 7.716049313271600e-5),
            local_orders=(None, 2.0000000001, 2.0000000002),
            fitted_order=2.00000000015, reference_scale=3.3,
            max_constraint_residual=1e-15,
        )
        path = tmp_path / "rt.csv"
        emit_csv(table, path)
        meta, rows = read_convergence_csv(path)
        assert meta["problem"] == "dynbc"
        assert meta["norm"] == "energy"
        for (tau, err, order), t_exp, e_exp, o_exp in zip(
            rows, table.taus, table.errors, table.local_orders
        ):
            assert tau == t_exp
            assert err == e_exp
            if o_exp is not None:
                assert order == o_exp

    def test_table_validation(self):
        with pytest.raises(ValueError):
            ConvergenceTable(
                problem="x", scheme="exp-euler", norm="l2", h=None,
                taus=(0.1, 0.2), errors=(1.0, 0.5), local_orders=(None, 1.0),
                fitted_order=1.0, reference_scale=1.0, max_constraint_residual=0.0,
            )
        with pytest.raises(ValueError):
            ConvergenceTable(
                problem="x", scheme="exp-euler", norm="l2", h=None,
                taus=(0.2, 0.1), errors=(1.0, -0.5), local_orders=(None, 1.0),
                fitted_order=1.0, reference_scale=1.0, max_constraint_residual=0.0,
            )


class TestDeterminism:
    def test_same_study_twice_bit_identical(self, tmp_path):
        prob = toy_problem()
        taus = [0.1, 0.05]
        paths = []
        for k in range(2):
            table = run_convergence(
                prob, SchemeConfig(), taus, 0.5, norm="l2",
                tau_ref=0.05 / 16, cache_dir=tmp_path,
            )
            path = tmp_path / f"run{k}.csv"
            emit_csv(table, path)
            paths.append(path)
        assert paths[0].read_bytes() == paths[1].read_bytes()
