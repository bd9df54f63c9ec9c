"""Outer-loop tests: convergence, monotonicity, determinism, hybrid, compare."""

import numpy as np
import pytest

from eitias.cem import assemble_system, solve_frame, trigonometric_basis
from eitias.errors import ValidationError
from eitias.hypermodel import HyperModel
from eitias.ias import (
    HybridConfig,
    IasConfig,
    compare_map_qmap,
    run_hybrid,
    run_ias,
)
from eitias.mesh import (
    ElectrodeLayout,
    WeightedPseudoinverse,
    build_disc_mesh,
    build_increment_operator,
    mark_subdomain,
)
from eitias.phantom import DiscInclusion, PhantomSpec, simulate_measurement
from eitias.sensitivity import compute_vartheta, jacobian_adjoint


@pytest.fixture(scope="module")
def problem():
    L = 8
    layout = ElectrodeLayout.uniform(L, 0.5, 0.05)
    basis = trigonometric_basis(L)
    mesh = build_disc_mesh(layout, 420, 1.5)
    mesh, sub = mark_subdomain(mesh, 0.8)
    lop = build_increment_operator(mesh, sub)
    system = assemble_system(mesh, sub, layout, basis, sigma0=1.0)
    data_mesh = build_disc_mesh(layout, 950, 1.4)
    spec = PhantomSpec(
        background=1.0, inclusions=(DiscInclusion(center=(0.0, 0.35), radius=0.22, value=4.2),)
    )
    measurement = simulate_measurement(spec, data_mesh, layout, basis, 0.5, seed=7)
    j0 = jacobian_adjoint(solve_frame(system, np.zeros(sub.n)), system)
    hyper = HyperModel.from_eta(1.0, 1e-5, compute_vartheta(j0, lop, 4.0))
    return layout, mesh, sub, lop, system, spec, measurement, hyper


@pytest.fixture(scope="module")
def converged(problem):
    *_, system, spec, measurement, hyper = problem
    _, _, _, lop, *_ = problem
    config = IasConfig(max_outer_iterations=30)
    return run_ias(measurement, system, lop, hyper, config)


class TestRunIas:
    def test_noise_free_homogeneous_data_converges_immediately(self, problem):
        layout, mesh, sub, lop, system, *_ = problem
        _, _, _, _, _, _, _, hyper = problem
        clean = solve_frame(system, np.zeros(sub.n))
        from eitias.cem import MeasurementSet, stack_voltages

        ms = MeasurementSet(
            data=stack_voltages(system, clean.alpha), noise_std=0.0,
            num_electrodes=layout.count,
        )
        state = run_ias(ms, system, lop, hyper, IasConfig())
        assert state.iterations <= 2
        assert np.linalg.norm(state.zeta) <= 1e-8
        assert np.abs(state.xi).max() <= 1e-8

    def test_converges_and_recovers_inclusion(self, problem, converged):
        _, mesh, sub, _, _, spec, *_ = problem
        state = converged
        assert state.converged
        cent = mesh.centroids()[: sub.n]
        inside = spec.inclusions[0].contains(cent)
        assert state.xi[inside].mean() > 0.3  # positive contrast recovered
        assert abs(state.xi[~inside].mean()) < 0.2

    def test_variance_half_step_never_increases_objective(self, converged):
        for rec in converged.trace:
            gz, gt = rec.gibbs_after_zeta, rec.gibbs_after_theta
            assert gt.total <= gz.total + 1e-9 * abs(gz.total)

    def test_stopping_rule_fires_exactly_at_tolerance(self, converged):
        deltas = [rec.delta_theta_rel for rec in converged.trace]
        assert all(np.isfinite(deltas))
        assert all(d >= 2e-2 for d in deltas[:-1])
        assert deltas[-1] < 2e-2

    def test_deterministic(self, problem):
        *_, system, spec, measurement, hyper = problem
        _, _, _, lop, *_ = problem
        config = IasConfig(max_outer_iterations=4, tolerance=1e-300)
        a = run_ias(measurement, system, lop, hyper, config)
        b = run_ias(measurement, system, lop, hyper, config)
        assert np.array_equal(a.xi, b.xi)
        assert np.array_equal(a.theta, b.theta)
        ga = [rec.gibbs_after_theta.total for rec in a.trace]
        gb = [rec.gibbs_after_theta.total for rec in b.trace]
        assert ga == gb

    def test_increment_element_consistency(self, problem, converged):
        _, _, _, lop, *_ = problem
        state = converged
        # zeta stays in the range of the increment operator and xi matches it
        resid = lop.matrix @ state.xi - state.zeta
        assert np.linalg.norm(resid) <= 1e-8 * max(1.0, np.linalg.norm(state.zeta))

    def test_scaled_solution_in_operator_range(self, problem, converged):
        # the inner minimizer automatically satisfies the range constraint
        _, _, _, lop, *_ = problem
        state = converged
        pinv = WeightedPseudoinverse(lop, state.theta)
        alpha = state.zeta / np.sqrt(state.theta)
        back = pinv.scaled_operator_matmul(pinv.apply_to_scaled(alpha))
        assert np.linalg.norm(back - alpha) <= 1e-8 * max(1.0, np.linalg.norm(alpha))

    def test_conductivity_stays_positive(self, problem, converged):
        *_, system, _, _, _ = problem
        assert np.all(system.sigma0 + converged.xi > 0)

    def test_compressibility_concentrates(self, problem, converged):
        _, _, _, lop, *_ = problem
        count = converged.trace[-1].compressibility
        assert count < lop.num_edges / 2

    def test_theta_positive_throughout(self, converged):
        assert np.all(converged.theta > 0)

    def test_invalid_config_rejected(self):
        with pytest.raises(ValidationError):
            IasConfig(tolerance=0.0)
        with pytest.raises(ValidationError):
            IasConfig(inner_linearizations=0)
        with pytest.raises(ValidationError):
            IasConfig(backend="magic")

    def test_mismatched_sizes_rejected(self, problem):
        layout, _, _, lop, system, _, measurement, hyper = problem
        small_hyper = HyperModel(r=1.0, beta=2.0, vartheta=np.ones(3))
        with pytest.raises(ValidationError):
            run_ias(measurement, system, lop, small_hyper, IasConfig())


class TestRunHybrid:
    def test_requires_hybrid_block_and_unit_exponent(self, problem):
        *_, system, _, measurement, hyper = problem
        _, _, _, lop, *_ = problem
        with pytest.raises(ValidationError):
            run_hybrid(measurement, system, lop, hyper, IasConfig())

    def test_identity_switch_extends_plain_run(self, problem, converged):
        *_, system, _, measurement, hyper = problem
        _, _, _, lop, *_ = problem
        config = IasConfig(hybrid=HybridConfig(r2=1.0, phase2_iterations=2))
        state = run_hybrid(measurement, system, lop, hyper, config)
        assert state.switch_index == converged.iterations
        # shared phase-1 prefix is identical to the plain run
        for rec_h, rec_p in zip(state.trace[: converged.iterations], converged.trace):
            assert rec_h.delta_theta_rel == rec_p.delta_theta_rel
            assert rec_h.gibbs_after_theta.total == rec_p.gibbs_after_theta.total

    def test_greedy_switch_objective_monotone_in_theta_steps(self, problem):
        *_, system, _, measurement, hyper = problem
        _, _, _, lop, *_ = problem
        config = IasConfig(hybrid=HybridConfig(r2=0.5, phase2_iterations=3))
        state = run_hybrid(measurement, system, lop, hyper, config)
        phase2 = [rec for rec in state.trace if rec.phase == 2]
        assert len(phase2) >= 1
        for rec in phase2:
            assert (
                rec.gibbs_after_theta.total
                <= rec.gibbs_after_zeta.total + 1e-9 * abs(rec.gibbs_after_zeta.total)
            )
        assert state.switch_index is not None


class TestCompare:
    def test_identical_backends_zero_gap(self, problem):
        *_, system, _, measurement, hyper = problem
        _, _, _, lop, *_ = problem
        config = IasConfig(max_outer_iterations=3, tolerance=1e-300)
        report = compare_map_qmap(
            measurement, system, lop, hyper, config,
            reference_backend="adjoint-direct", approximate_backend="adjoint-direct",
        )
        assert np.all(report.delta_g == 0.0)

    def test_reference_never_worse(self, problem):
        *_, system, _, measurement, hyper = problem
        _, _, _, lop, *_ = problem
        config = IasConfig(max_outer_iterations=6, tolerance=1e-300)
        report = compare_map_qmap(measurement, system, lop, hyper, config)
        assert np.all(report.delta_g >= -1e-6)
        assert report.reference.iterations == report.approximate.iterations

    def test_fields_and_ranges_reported(self, problem):
        *_, system, _, measurement, hyper = problem
        _, _, _, lop, *_ = problem
        config = IasConfig(max_outer_iterations=4, tolerance=1e-300)
        report = compare_map_qmap(measurement, system, lop, hyper, config)
        assert report.difference_field().shape == report.reference.xi.shape
        assert report.dynamic_range_ratio > 0
