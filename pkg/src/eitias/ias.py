"""Outer alternating loop: linearized increment updates and variance updates.

One outer iteration performs a configurable number of linearization rounds
of the increment update (rebuild the Jacobian at the current point, form the
whitened Tikhonov problem in the scaled increment variable, solve with the
selected backend, damp if conductivity positivity is at risk) followed by
the componentwise exact variance update, until the relative variance change
drops below the stopping tolerance.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import NumericalError, ValidationError
from .cem import CemSystem, FrameFactorization, MeasurementSet, solve_frame, stack_voltages
from .hypermodel import GibbsBreakdown, HyperModel, gibbs_energy, hybrid_switch, update_theta
from .lsq import BACKENDS, LinearizedProblem, SolveReport, solve
from .mesh import IncrementOperator, WeightedPseudoinverse
from .sensitivity import jacobian_adjoint


@dataclass
class HybridConfig:
    r2: float
    phase2_iterations: int = 4


@dataclass
class IasConfig:
    tolerance: float = 2e-2
    max_outer_iterations: int = 40
    inner_linearizations: int = 2
    backend: str = "adjoint-direct"
    lanczos_tol: float = 1e-8
    hybrid: HybridConfig | None = None
    theta_init: str = "vartheta"
    cgls_semiconvergence: bool = True
    evaluate_gibbs: bool = True
    sigma_floor_factor: float = 1e-3
    compressibility_threshold: float = 1e-3  # times max |zeta|
    capture_fields: bool = False  # keep a per-iteration copy of xi in the trace

    def __post_init__(self):
        if self.tolerance <= 0:
            raise ValidationError("stopping tolerance must be positive")
        if self.inner_linearizations < 1:
            raise ValidationError("need at least one linearization per update")
        if self.backend not in BACKENDS:
            raise ValidationError(f"unknown backend '{self.backend}' (choose from {BACKENDS})")
        if self.theta_init != "vartheta":
            raise ValidationError("supported theta initialization: 'vartheta'")


@dataclass
class IterationRecord:
    index: int
    phase: int
    delta_theta_rel: float
    gibbs_after_zeta: GibbsBreakdown | None
    gibbs_after_theta: GibbsBreakdown | None
    inner_reports: list[SolveReport]
    compressibility: int
    damping_steps: int
    wall_time_ms: float
    xi_snapshot: np.ndarray | None = None


@dataclass
class IasState:
    """Final iterate plus the full per-iteration trace."""

    zeta: np.ndarray
    theta: np.ndarray
    xi: np.ndarray
    hyper: HyperModel
    iterations: int
    converged: bool
    trace: list[IterationRecord] = field(default_factory=list)
    switch_index: int | None = None

    def compressibility(self, threshold: float) -> int:
        return int(np.count_nonzero(np.abs(self.zeta) > threshold))


def _compressibility(zeta: np.ndarray, rel_threshold: float) -> int:
    top = np.abs(zeta).max()
    if top == 0:
        return 0
    return int(np.count_nonzero(np.abs(zeta) > rel_threshold * top))


class _Loop:
    """Shared machinery of the plain and hybrid runs."""

    def __init__(
        self,
        measurement: MeasurementSet,
        system: CemSystem,
        op: IncrementOperator,
        hyper: HyperModel,
        config: IasConfig,
    ):
        if hyper.num_components != op.num_edges:
            raise ValidationError("hypermodel size disagrees with the increment operator")
        if measurement.num_electrodes != system.layout.count:
            raise ValidationError("measurement and system electrode counts differ")
        self.measurement = measurement
        self.system = system
        self.op = op
        self.config = config
        self.hyper = hyper
        self.omega = measurement.noise_std if measurement.noise_std > 0 else 1.0
        self.b = measurement.data
        self.sigma_floor = config.sigma_floor_factor * system.sigma0
        n = system.n
        N = op.num_edges
        self.zeta = np.zeros(N)
        self.xi = np.zeros(n)
        self.theta = hyper.vartheta.copy()
        self.trace: list[IterationRecord] = []
        self.iteration = 0
        self.converged = False

    # -- inner pieces -----------------------------------------------------

    def _linearized_problem(self, pinv: WeightedPseudoinverse, xi_c: np.ndarray):
        """Whitened Tikhonov problem at the current linearization point."""
        fac = FrameFactorization(self.system, xi_c)
        sol = solve_frame(self.system, xi_c, factorization=fac)
        f_c = stack_voltages(self.system, sol.alpha)
        jac = jacobian_adjoint(sol, self.system)
        J = jac.matrix
        # A = (1/omega) J Ldag_theta, built densely via the Gram factorization
        w = pinv.gram_solve(J.T)  # (n, m)
        at = pinv.scaled_operator_matmul(w) / self.omega  # (N, m) = A^T
        rhs = (self.b - f_c + J @ xi_c) / self.omega
        return LinearizedProblem(rhs=rhs, matrix=np.ascontiguousarray(at.T)), f_c

    def _backend_solve(self, problem: LinearizedProblem) -> SolveReport:
        cfg = self.config
        if cfg.backend in ("lanczos-basis", "lanczos-nobasis"):
            return solve(problem, cfg.backend, tol=cfg.lanczos_tol)
        if cfg.backend == "cgls-qmap":
            evaluator = None
            if cfg.cgls_semiconvergence:
                a = problem.matrix

                def evaluator(al):
                    return 0.5 * (
                        np.linalg.norm(problem.rhs - a @ al) ** 2 + np.linalg.norm(al) ** 2
                    )

            return solve(
                problem, cfg.backend, discrepancy_target=float(problem.m),
                gibbs_evaluator=evaluator,
            )
        return solve(problem, cfg.backend)

    def _damp_to_feasible(self, xi_new, zeta_new):
        """Bisect the update toward the previous iterate until sigma stays
        above the floor; returns (xi, zeta, number of halvings)."""
        steps = 0
        s = 1.0
        while True:
            xi_try = self.xi + s * (xi_new - self.xi)
            if np.all(self.system.sigma0 + xi_try > self.sigma_floor):
                zeta_try = self.zeta + s * (zeta_new - self.zeta)
                return xi_try, zeta_try, steps
            s *= 0.5
            steps += 1
            if steps > 60:
                raise NumericalError("positivity damping failed to find a feasible step")

    def _gibbs(self, f_value) -> GibbsBreakdown:
        return gibbs_energy(
            self.zeta, self.theta, self.b, f_value, self.measurement.noise_std, self.hyper
        )

    def _forward_value(self) -> np.ndarray:
        return stack_voltages(self.system, solve_frame(self.system, self.xi).alpha)

    # -- outer loop --------------------------------------------------------

    def run_phase(self, max_iterations: int, phase: int) -> bool:
        cfg = self.config
        for _ in range(max_iterations):
            t0 = time.perf_counter()
            self.iteration += 1
            pinv = WeightedPseudoinverse(self.op, self.theta)
            damping = 0
            reports = []
            for lin in range(1, cfg.inner_linearizations + 1):
                problem, _ = self._linearized_problem(pinv, self.xi)
                try:
                    report = self._backend_solve(problem)
                except NumericalError as exc:
                    raise NumericalError(
                        f"inner solve failed at outer iteration {self.iteration}, "
                        f"linearization {lin}: {exc}"
                    ) from exc
                alpha = report.alpha
                zeta_new = np.sqrt(self.theta) * alpha
                xi_new = pinv.apply_to_scaled(alpha)
                self.xi, self.zeta, steps = self._damp_to_feasible(xi_new, zeta_new)
                damping += steps
                reports.append(report)
            f_val = self._forward_value() if cfg.evaluate_gibbs else None
            gibbs_z = self._gibbs(f_val) if cfg.evaluate_gibbs else None

            theta_new = update_theta(self.zeta, self.hyper)
            delta_rel = float(
                np.linalg.norm(theta_new - self.theta) / np.linalg.norm(self.theta)
            )
            self.theta = theta_new
            # fidelity is unchanged by the variance half-step, reuse the solve
            gibbs_t = self._gibbs(f_val) if cfg.evaluate_gibbs else None
            self.trace.append(
                IterationRecord(
                    index=self.iteration,
                    phase=phase,
                    delta_theta_rel=delta_rel,
                    gibbs_after_zeta=gibbs_z,
                    gibbs_after_theta=gibbs_t,
                    inner_reports=reports,
                    compressibility=_compressibility(self.zeta, cfg.compressibility_threshold),
                    damping_steps=damping,
                    wall_time_ms=(time.perf_counter() - t0) * 1e3,
                    xi_snapshot=self.xi.copy() if cfg.capture_fields else None,
                )
            )
            if delta_rel < cfg.tolerance:
                return True
        return False

    def state(self, switch_index=None) -> IasState:
        return IasState(
            zeta=self.zeta.copy(),
            theta=self.theta.copy(),
            xi=self.xi.copy(),
            hyper=self.hyper,
            iterations=self.iteration,
            converged=self.converged,
            trace=self.trace,
            switch_index=switch_index,
        )


def run_ias(
    measurement: MeasurementSet,
    system: CemSystem,
    op: IncrementOperator,
    hyper: HyperModel,
    config: IasConfig,
) -> IasState:
    """Alternate increment and variance updates until the variances settle."""
    loop = _Loop(measurement, system, op, hyper, config)
    loop.converged = loop.run_phase(config.max_outer_iterations, phase=1)
    return loop.state()


def run_hybrid(
    measurement: MeasurementSet,
    system: CemSystem,
    op: IncrementOperator,
    hyper: HyperModel,
    config: IasConfig,
) -> IasState:
    """Run the unit-exponent phase to convergence, then a greedier phase.

    The phase-2 hypermodel is matched through the compatibility conditions;
    the trace records where the switch happened.
    """
    if config.hybrid is None:
        raise ValidationError("hybrid run requires a hybrid configuration block")
    if hyper.r != 1:
        raise ValidationError("phase-1 hypermodel must have unit exponent")
    loop = _Loop(measurement, system, op, hyper, config)
    loop.run_phase(config.max_outer_iterations, phase=1)
    switch_index = loop.iteration
    loop.hyper = hybrid_switch(hyper, config.hybrid.r2)
    loop.converged = loop.run_phase(config.hybrid.phase2_iterations, phase=2)
    return loop.state(switch_index=switch_index)


# ---------------------------------------------------------------------------
# Exact-vs-approximate comparison
# ---------------------------------------------------------------------------


@dataclass
class ComparisonReport:
    """Per-iteration objective gap between two inner-solver choices."""

    gibbs_reference: np.ndarray
    gibbs_approximate: np.ndarray
    delta_g: np.ndarray
    reference: IasState
    approximate: IasState
    reference_backend: str
    approximate_backend: str

    def dynamic_range(self, which: str = "approximate") -> float:
        state = self.approximate if which == "approximate" else self.reference
        return float(state.xi.max() - state.xi.min())

    @property
    def dynamic_range_ratio(self) -> float:
        ref = self.dynamic_range("reference")
        return self.dynamic_range("approximate") / ref if ref else np.nan

    def difference_field(self) -> np.ndarray:
        return self.approximate.xi - self.reference.xi


def compare_map_qmap(
    measurement: MeasurementSet,
    system: CemSystem,
    op: IncrementOperator,
    hyper: HyperModel,
    config: IasConfig,
    reference_backend: str = "adjoint-direct",
    approximate_backend: str = "cgls-qmap",
) -> ComparisonReport:
    """Run the exact and early-stopped pipelines on identical inputs.

    The reference run uses its stopping rule; the approximate run is forced
    through the same number of outer iterations so the per-iteration
    objective gap is well defined.
    """
    if not config.evaluate_gibbs:
        raise ValidationError("comparison requires objective evaluation enabled")
    ref_cfg = replace(config, backend=reference_backend)
    ref = run_ias(measurement, system, op, hyper, ref_cfg)
    apx_cfg = replace(
        config,
        backend=approximate_backend,
        tolerance=1e-300,  # disable the stopping rule: match iteration counts
        max_outer_iterations=ref.iterations,
    )
    apx = run_ias(measurement, system, op, hyper, apx_cfg)
    g_ref = np.array([rec.gibbs_after_theta.total for rec in ref.trace])
    g_apx = np.array([rec.gibbs_after_theta.total for rec in apx.trace])
    k = min(g_ref.shape[0], g_apx.shape[0])
    delta = (g_apx[:k] - g_ref[:k]) / g_ref[:k]
    return ComparisonReport(
        gibbs_reference=g_ref[:k],
        gibbs_approximate=g_apx[:k],
        delta_g=delta,
        reference=ref,
        approximate=apx,
        reference_backend=reference_backend,
        approximate_backend=approximate_backend,
    )
