"""Inner Tikhonov-regularized least-squares solvers.

Four interchangeable backends for min ||r - A alpha||^2 + ||alpha||^2:

* normal-direct   : dense Cholesky of the N x N normal equations;
* adjoint-direct  : dense Cholesky of the m x m data-space system
                    (A A^T + I) z = r, alpha = A^T z, which coincides with
                    the normal-equations solution and is much cheaper when
                    m < N;
* lanczos         : Golub-Kahan bidiagonalization of the data-space system
                    with a tridiagonal inner solve per step and the monitored
                    bound sigma_{l+1} |y_l| as stopping rule, with or without
                    keeping the basis in memory;
* cgls            : plain CGLS on min ||r - A alpha||^2 stopped early at the
                    discrepancy (or at the semiconvergence minimum of the
                    regularized objective), yielding the quasi-MAP update.

The three exact backends agree to solver tolerance; CGLS is deliberately an
approximation.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.linalg

from .errors import NumericalError, ValidationError

BACKENDS = ("normal-direct", "adjoint-direct", "lanczos-basis", "lanczos-nobasis", "cgls-qmap")


@dataclass
class LinearizedProblem:
    """A linear map with its transpose plus the shifted residual vector.

    Either a dense matrix or a (matvec, rmatvec) pair may back the operator;
    the direct backends require the dense form.
    """

    rhs: np.ndarray
    matrix: np.ndarray | None = None
    matvec: Callable[[np.ndarray], np.ndarray] | None = None
    rmatvec: Callable[[np.ndarray], np.ndarray] | None = None
    shape: tuple[int, int] | None = None

    def __post_init__(self):
        self.rhs = np.asarray(self.rhs, dtype=float).ravel()
        if self.matrix is not None:
            self.matrix = np.asarray(self.matrix, dtype=float)
            self.shape = self.matrix.shape
        if self.shape is None:
            raise ValidationError("problem needs a dense matrix or an explicit shape")
        if self.matrix is None and (self.matvec is None or self.rmatvec is None):
            raise ValidationError("matrix-free problem needs both matvec and rmatvec")
        if self.rhs.shape[0] != self.shape[0]:
            raise ValidationError("rhs length disagrees with the operator")

    @property
    def m(self) -> int:
        return self.shape[0]

    @property
    def n_unknowns(self) -> int:
        return self.shape[1]

    def apply(self, x: np.ndarray) -> np.ndarray:
        return self.matrix @ x if self.matrix is not None else self.matvec(x)

    def apply_t(self, y: np.ndarray) -> np.ndarray:
        return self.matrix.T @ y if self.matrix is not None else self.rmatvec(y)

    def dense(self) -> np.ndarray:
        if self.matrix is None:
            raise ValidationError("backend requires the dense operator")
        return self.matrix


@dataclass
class SolveReport:
    """Outcome of one inner solve."""

    alpha: np.ndarray
    backend: str
    iterations: int
    residual_history: list = field(default_factory=list)
    error_monitor: float = 0.0
    wall_time_ms: float = 0.0
    converged: bool = True
    note: str = ""


def _tikhonov_residual(problem: LinearizedProblem, alpha: np.ndarray) -> float:
    """Norm of (A^T A + I) alpha - A^T r, the exact-backend optimality check."""
    g = problem.apply_t(problem.rhs - problem.apply(alpha)) - alpha
    return float(np.linalg.norm(g))


def solve_normal_direct(problem: LinearizedProblem, dense_limit: int = 20000) -> SolveReport:
    """Cholesky solve of the N x N normal equations (A^T A + I) alpha = A^T r."""
    a = problem.dense()
    if problem.n_unknowns > dense_limit:
        raise ValidationError(
            f"normal equations of size {problem.n_unknowns} exceed the dense limit {dense_limit}"
        )
    t0 = time.perf_counter()
    gram = a.T @ a
    gram[np.diag_indices_from(gram)] += 1.0
    c, low = scipy.linalg.cho_factor(gram, lower=False, check_finite=False)
    alpha = scipy.linalg.cho_solve((c, low), a.T @ problem.rhs, check_finite=False)
    ms = (time.perf_counter() - t0) * 1e3
    resid = _tikhonov_residual(problem, alpha)
    return SolveReport(
        alpha=alpha,
        backend="normal-direct",
        iterations=0,
        residual_history=[resid],
        error_monitor=resid,
        wall_time_ms=ms,
    )


def solve_adjoint_direct(problem: LinearizedProblem) -> SolveReport:
    """Data-space solve (A A^T + I) z = r followed by alpha = A^T z."""
    a = problem.dense()
    t0 = time.perf_counter()
    gram = a @ a.T
    gram[np.diag_indices_from(gram)] += 1.0
    c, low = scipy.linalg.cho_factor(gram, lower=False, check_finite=False)
    z = scipy.linalg.cho_solve((c, low), problem.rhs, check_finite=False)
    alpha = a.T @ z
    ms = (time.perf_counter() - t0) * 1e3
    resid = _tikhonov_residual(problem, alpha)
    return SolveReport(
        alpha=alpha,
        backend="adjoint-direct",
        iterations=0,
        residual_history=[resid],
        error_monitor=resid,
        wall_time_ms=ms,
    )


# ---------------------------------------------------------------------------
# Golub-Kahan bidiagonalization on the data-space system
# ---------------------------------------------------------------------------


class _Bidiagonalization:
    """One deterministic pass of the bidiagonalization recurrence.

    v-vectors live in data space and are kept for full reorthogonalization
    (classical Gram-Schmidt, two passes); u-vectors live in parameter space
    and inherit orthogonality from the v-side (one-sided reorthogonalization).
    """

    def __init__(self, problem: LinearizedProblem, keep_u: bool):
        self.problem = problem
        self.keep_u = keep_u
        r = problem.rhs
        nrm = np.linalg.norm(r)
        self.rhs_norm = float(nrm)
        self.rhos: list[float] = []
        self.sigmas: list[float] = []  # sigma_2, sigma_3, ...
        self.v_list: list[np.ndarray] = []
        self.u_list: list[np.ndarray] = []
        self.exhausted = nrm == 0.0
        if self.exhausted:
            return
        v = r / nrm
        self.v_list.append(v)
        ut = problem.apply_t(v)
        rho = float(np.linalg.norm(ut))
        if rho == 0.0:
            self.exhausted = True
            return
        self.rhos.append(rho)
        self._u = ut / rho
        if keep_u:
            self.u_list.append(self._u)
        self._sigma_next: float | None = None
        self._v_next: np.ndarray | None = None

    def lookahead_sigma(self) -> float:
        """sigma_{l+1} for the current length l, computing the next v."""
        if self._sigma_next is None:
            vt = self.problem.apply(self._u) - self.rhos[-1] * self.v_list[-1]
            vt = self._reorthogonalize(vt)
            self._sigma_next = float(np.linalg.norm(vt))
            self._v_next = vt
        return self._sigma_next

    def _reorthogonalize(self, vt: np.ndarray) -> np.ndarray:
        for _ in range(2):
            for v in self.v_list:
                vt = vt - (v @ vt) * v
        return vt

    def advance(self) -> bool:
        """Extend the factorization by one step; False on breakdown."""
        sigma = self.lookahead_sigma()
        if sigma == 0.0:
            self.exhausted = True
            return False
        v = self._v_next / sigma
        self.sigmas.append(sigma)
        self.v_list.append(v)
        self._sigma_next = None
        self._v_next = None
        ut = self.problem.apply_t(v) - sigma * self._u
        rho = float(np.linalg.norm(ut))
        if rho == 0.0:
            self.exhausted = True
            return False
        self.rhos.append(rho)
        self._u = ut / rho
        if self.keep_u:
            self.u_list.append(self._u)
        return True

    @property
    def length(self) -> int:
        return len(self.rhos)

    def solve_projected(self) -> np.ndarray:
        """Solve (C_l C_l^T + I) y = ||r|| e_1 via its tridiagonal structure."""
        ell = self.length
        rho = np.asarray(self.rhos)
        sig = np.asarray(self.sigmas)  # length ell-1
        diag = rho**2 + 1.0
        diag[1:] += sig**2
        rhs = np.zeros(ell)
        rhs[0] = self.rhs_norm
        if ell == 1:
            return rhs / diag
        ab = np.zeros((2, ell))
        ab[0] = diag
        ab[1, : ell - 1] = sig * rho[:-1]
        return scipy.linalg.solveh_banded(ab, rhs, lower=True, check_finite=False)


def solve_lanczos(
    problem: LinearizedProblem, tol: float = 1e-8, store_basis: bool = True
) -> SolveReport:
    """Bidiagonalization solve of the data-space system with error monitoring.

    Stops once the monitored bound sigma_{l+1} |y_l| drops below `tol` (or at
    l = m).  With `store_basis` unset, the recurrence is re-run from scratch
    to synthesize the solution, trading time for transient memory exactly as
    the two-pass variant prescribes; both modes follow the identical rounding
    path and return bit-identical solutions.
    """
    if tol <= 0:
        raise ValidationError("tolerance must be positive")
    t0 = time.perf_counter()
    m = problem.m
    run = _Bidiagonalization(problem, keep_u=store_basis)
    history = []
    if run.exhausted:
        return SolveReport(
            alpha=np.zeros(problem.n_unknowns),
            backend="lanczos-basis" if store_basis else "lanczos-nobasis",
            iterations=0,
            residual_history=[0.0],
            error_monitor=0.0,
            wall_time_ms=(time.perf_counter() - t0) * 1e3,
            note="zero right-hand side",
        )
    y = None
    monitor = np.inf
    while True:
        sigma_next = run.lookahead_sigma()
        y = run.solve_projected()
        monitor = sigma_next * abs(y[-1])
        history.append(monitor)
        if monitor <= tol or run.length >= m:
            break
        if not run.advance():  # breakdown: the projected solve is now exact
            y = run.solve_projected()
            monitor = 0.0
            history.append(monitor)
            break
    ell = run.length
    v_mat = np.column_stack(run.v_list[:ell])
    z = v_mat @ y
    alpha = problem.apply_t(z)
    report = SolveReport(
        alpha=alpha,
        backend="lanczos-basis" if store_basis else "lanczos-nobasis",
        iterations=ell,
        residual_history=history,
        error_monitor=float(monitor),
        wall_time_ms=0.0,
        converged=monitor <= tol,
        note="" if monitor <= tol else "monitor target not reached before l = m",
    )
    if not store_basis:
        # second pass: repeat the recurrence to regenerate the v-basis
        rerun = _Bidiagonalization(problem, keep_u=False)
        for _ in range(ell - 1):
            rerun.advance()
        v_mat2 = np.column_stack(rerun.v_list[:ell])
        report.alpha = problem.apply_t(v_mat2 @ y)
    report.wall_time_ms = (time.perf_counter() - t0) * 1e3
    return report


def lanczos_identities(problem: LinearizedProblem, steps: int):
    """Expose the factorization pieces (C, U, V, next sigma/v) for checks."""
    run = _Bidiagonalization(problem, keep_u=True)
    while run.length < steps and not run.exhausted:
        if not run.advance():
            break
    ell = run.length
    c = np.zeros((ell, ell))
    c[np.diag_indices(ell)] = run.rhos
    for i, s in enumerate(run.sigmas[: ell - 1]):
        c[i + 1, i] = s
    sigma_next = run.lookahead_sigma() if not run.exhausted else 0.0
    v_next = (
        run._v_next / sigma_next if (not run.exhausted and sigma_next > 0) else None
    )
    return (
        c,
        np.column_stack(run.u_list[:ell]),
        np.column_stack(run.v_list[:ell]),
        sigma_next,
        v_next,
    )


# ---------------------------------------------------------------------------
# CGLS with early stopping (quasi-MAP)
# ---------------------------------------------------------------------------


def solve_cgls_early_stop(
    problem: LinearizedProblem,
    discrepancy_target: float,
    gibbs_evaluator: Callable[[np.ndarray], float] | None = None,
) -> SolveReport:
    """CGLS iterates of min ||r - A alpha||^2 stopped before noise takes over.

    Default rule: first iterate whose squared residual is at or below
    `discrepancy_target` (the expected whitened noise energy).  When
    `gibbs_evaluator` is given it overrides the rule: iteration stops at the
    iterate preceding the first increase of the evaluated objective
    (semiconvergence minimum).
    """
    if discrepancy_target <= 0:
        raise ValidationError("discrepancy target must be positive")
    t0 = time.perf_counter()
    m, n = problem.m, problem.n_unknowns
    max_iter = min(m, n)
    alpha = np.zeros(n)
    s = problem.rhs.copy()
    g = problem.apply_t(s)
    p = g.copy()
    gamma = float(g @ g)
    history = [float(np.linalg.norm(s))]
    best_obj = gibbs_evaluator(alpha) if gibbs_evaluator is not None else None
    iterations = 0
    converged = False
    note = ""
    while iterations < max_iter:
        q = problem.apply(p)
        denom = float(q @ q)
        if denom == 0.0 or gamma == 0.0:
            converged = True
            break
        step = gamma / denom
        candidate = alpha + step * p
        s_new = s - step * q
        if gibbs_evaluator is not None:
            obj = gibbs_evaluator(candidate)
            if obj > best_obj:
                note = "stopped at semiconvergence minimum"
                converged = True
                break
            best_obj = obj
        alpha = candidate
        s = s_new
        iterations += 1
        history.append(float(np.linalg.norm(s)))
        if gibbs_evaluator is None and history[-1] ** 2 <= discrepancy_target:
            converged = True
            break
        g = problem.apply_t(s)
        gamma_new = float(g @ g)
        p = g + (gamma_new / gamma) * p
        gamma = gamma_new
    if not converged:
        note = "discrepancy not reached"
    return SolveReport(
        alpha=alpha,
        backend="cgls-qmap",
        iterations=iterations,
        residual_history=history,
        error_monitor=history[-1] ** 2,
        wall_time_ms=(time.perf_counter() - t0) * 1e3,
        converged=converged,
        note=note,
    )


def solve(problem: LinearizedProblem, backend: str, **kwargs) -> SolveReport:
    """Dispatch to one of the named backends."""
    if backend == "normal-direct":
        return solve_normal_direct(problem, **kwargs)
    if backend == "adjoint-direct":
        return solve_adjoint_direct(problem)
    if backend == "lanczos-basis":
        return solve_lanczos(problem, store_basis=True, **kwargs)
    if backend == "lanczos-nobasis":
        return solve_lanczos(problem, store_basis=False, **kwargs)
    if backend == "cgls-qmap":
        return solve_cgls_early_stop(problem, **kwargs)
    raise ValidationError(f"unknown backend '{backend}' (choose from {BACKENDS})")
