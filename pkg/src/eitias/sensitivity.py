"""Derivatives of the forward map and convexity diagnostics.

The Jacobian uses the adjoint identity: the derivative of the electrode
coefficients with respect to one conductivity degree of freedom is
-X^T (dK) X, where dK contains only that element's rank-3 stiffness block.
One frame solve therefore prices the whole Jacobian; no extra linear solves
are needed.  Second derivatives are exposed as directional contractions only.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import scipy.linalg
import scipy.sparse.linalg

from .errors import ValidationError
from .cem import CemSystem, FrameFactorization, FrameSolution, solve_frame
from .mesh import IncrementOperator, WeightedPseudoinverse, _frozen


@dataclass(frozen=True)
class Jacobian:
    """Dense Jacobian of the stacked-voltage forward map.

    matrix : (m, n); column nu stacks the per-pattern derivative of the
    electrode voltages with respect to xi_nu.
    evaluation_point : the xi at which it was computed.
    """

    matrix: np.ndarray
    evaluation_point: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "matrix", _frozen(np.asarray(self.matrix, dtype=float)))
        object.__setattr__(
            self, "evaluation_point", _frozen(np.asarray(self.evaluation_point, dtype=float))
        )


def alpha_derivatives(solution: FrameSolution, system: CemSystem) -> np.ndarray:
    """Per-element derivative matrices d alpha / d xi_nu, shape (n, L-1, L-1).

    Each slice is -U_nu^T S_nu U_nu with U_nu the interior potentials
    restricted to the element's vertices and S_nu its local stiffness.
    """
    u = solution.interior_potentials[system.dof_triangles]  # (n, 3, L-1)
    return -np.einsum("eiv,eij,ejw->evw", u, system.dof_local, u, optimize=True)


def jacobian_adjoint(solution: FrameSolution, system: CemSystem) -> Jacobian:
    """Assemble the stacked Jacobian from the adjoint-formula contractions."""
    if solution.interior_potentials.shape[0] != system.mesh.num_vertices:
        raise ValidationError("frame solution does not match the system")
    dalpha = alpha_derivatives(solution, system)
    E = system.basis.matrix
    # stack E @ dalpha[nu] column-major per pattern: column nu of J
    du = np.einsum("pv,evw->epw", E, dalpha, optimize=True)  # (n, L, L-1)
    m = E.shape[0] * (E.shape[1])
    J = du.transpose(2, 1, 0).reshape(m, system.n)
    return Jacobian(matrix=J, evaluation_point=solution.xi.copy())


def directional_frame_derivative(
    solution: FrameSolution,
    system: CemSystem,
    factorization: FrameFactorization,
    v: np.ndarray,
) -> np.ndarray:
    """Derivative of the full frame solution X along direction v in xi-space.

    Solves K (dX) = -(dK) X with the cached factorization; (dK) has only the
    weighted element blocks sum_nu v_nu K_nu.
    """
    v = np.asarray(v, dtype=float).ravel()
    if v.shape[0] != system.n:
        raise ValidationError("direction length mismatch")
    u = solution.interior_potentials[system.dof_triangles]  # (n, 3, L-1)
    weighted = system.dof_local * v[:, None, None]
    local_rhs = -np.einsum("eij,ejw->eiw", weighted, u, optimize=True)  # (n, 3, L-1)
    rhs = np.zeros((system.dim, system.num_patterns))
    np.add.at(rhs, system.dof_triangles.ravel(), local_rhs.reshape(-1, system.num_patterns))
    return factorization.solve(rhs)


def second_directional_derivative(
    solution: FrameSolution,
    system: CemSystem,
    v: np.ndarray,
    factorization: FrameFactorization | None = None,
) -> np.ndarray:
    """Contraction sum_{mu,nu} v_mu v_nu d2 alpha / (d xi_mu d xi_nu).

    Equals 2 (dX_v)^T K (dX_v), a symmetric positive semidefinite matrix;
    costs one extra frame solve with the cached factorization.
    """
    fac = factorization if factorization is not None else FrameFactorization(system, solution.xi)
    dx = directional_frame_derivative(solution, system, fac, v)
    return 2.0 * dx.T @ (fac.matrix @ dx)


# ---------------------------------------------------------------------------
# Sensitivity-scaled hyperparameter profile
# ---------------------------------------------------------------------------


def compute_vartheta(
    jacobian_at_zero: Jacobian,
    op: IncrementOperator,
    max_value: float = 4.0,
    floor_ratio: float = 1e-12,
) -> np.ndarray:
    """Scale vector inversely proportional to squared edge sensitivities.

    Entry j is C / ||J Ldag e_j||^2 with C fixed so the maximum entry equals
    `max_value`.  Columns whose sensitivity is below `floor_ratio` times the
    largest are capped at `max_value` directly (with a warning), which keeps
    vanishing sensitivities from collapsing the whole profile.
    """
    if max_value <= 0:
        raise ValidationError("max_value must be positive")
    if np.abs(jacobian_at_zero.evaluation_point).max() > 0:
        raise ValidationError("sensitivity profile must be computed at xi = 0")
    J = jacobian_at_zero.matrix
    pinv = WeightedPseudoinverse(op, None)
    # columns of J Ldag: J (L^T L)^{-1} L^T, formed densely
    W = pinv.gram_solve(J.T)  # (n, m)
    JL = (op.matrix @ W).T  # (m, N)
    sens2 = np.einsum("ij,ij->j", JL, JL)
    top = sens2.max()
    if top <= 0:
        raise ValidationError("all sensitivities vanish; cannot scale hyperparameters")
    weak = sens2 <= floor_ratio * top
    if np.any(weak):
        warnings.warn(
            f"{int(weak.sum())} edge sensitivities below the floor; capping their scale",
            RuntimeWarning,
        )
    safe = np.where(weak, top, sens2)
    vartheta = (safe.min() / safe) * max_value
    vartheta[weak] = max_value
    return vartheta


# ---------------------------------------------------------------------------
# Convexity diagnostics
# ---------------------------------------------------------------------------


@dataclass
class ConvexityReport:
    """Hessian structure of the posterior objective at a probe point."""

    d_matrix: np.ndarray  # data-independent part, n x n
    c_matrix: np.ndarray  # data-dependent part, n x n
    zz_block: np.ndarray  # increment-increment Hessian block, N x N
    zt_diag: np.ndarray  # increment-variance coupling diagonal, length N
    tt_diag: np.ndarray  # variance-variance diagonal, length N
    smallest_eigenvalue: float
    hessian_norm: float
    d_smallest_eigenvalue: float
    c_symmetric_smallest_eigenvalue: float

    def hessian(self) -> np.ndarray:
        N = self.zt_diag.shape[0]
        H = np.zeros((2 * N, 2 * N))
        H[:N, :N] = self.zz_block
        H[:N, N:] = np.diag(self.zt_diag)
        H[N:, :N] = np.diag(self.zt_diag)
        H[N:, N:] = np.diag(self.tt_diag)
        return H

    def to_dict(self) -> dict:
        return {
            "n": int(self.d_matrix.shape[0]),
            "N": int(self.zt_diag.shape[0]),
            "d_matrix": self.d_matrix.ravel().tolist(),
            "c_matrix": self.c_matrix.ravel().tolist(),
            "smallest_eigenvalue_hessian": self.smallest_eigenvalue,
            "hessian_norm": self.hessian_norm,
            "smallest_eigenvalue_d": self.d_smallest_eigenvalue,
            "smallest_eigenvalue_c_symmetric": self.c_symmetric_smallest_eigenvalue,
            "d_psd": bool(self.d_smallest_eigenvalue >= -1e-10 * max(1e-300, abs(self.d_matrix).max())),
            "hessian_psd": bool(self.smallest_eigenvalue >= -1e-8 * max(1e-300, self.hessian_norm)),
        }


def convexity_probe(
    system: CemSystem,
    op: IncrementOperator,
    xi: np.ndarray,
    gamma: np.ndarray,
    omega: float,
    zeta: np.ndarray,
    theta: np.ndarray,
    eta: float,
    dense_limit: int = 4000,
) -> ConvexityReport:
    """Assemble the curvature matrices and the full Hessian spectrum probe.

    Only the unit-exponent hypermodel with scalar noise is supported; these
    are the assumptions under which the block formulas hold.
    """
    if omega <= 0:
        raise ValidationError("noise level must be positive for the probe")
    theta = np.asarray(theta, dtype=float).ravel()
    zeta = np.asarray(zeta, dtype=float).ravel()
    if np.any(theta <= 0):
        raise ValidationError("theta must be strictly positive")
    N = op.num_edges
    if zeta.shape[0] != N or theta.shape[0] != N:
        raise ValidationError("zeta/theta length mismatch")

    fac = FrameFactorization(system, xi)
    sol = solve_frame(system, xi, factorization=fac)
    dalpha = alpha_derivatives(sol, system)  # (n, L-1, L-1)
    n = system.n
    flat = dalpha.reshape(n, -1)
    D = flat @ flat.T

    C = _c_matrix(sol, system, fac, gamma)

    # Hessian blocks of the posterior objective in (zeta, theta) coordinates.
    # The fidelity curvature carries 1/omega^2: differentiating the squared
    # misfit brings down a 2 that cancels the 1/2 prefactor.
    pinv = WeightedPseudoinverse(op, None)
    ldag = pinv.gram_solve(op.matrix.toarray().T)  # n x N dense pseudoinverse
    zz = (ldag.T @ ((C + D) @ ldag)) / omega**2 + np.diag(1.0 / theta)
    zt = -zeta / theta**2
    tt = zeta**2 / theta**3 + eta / theta**2

    H_norm, smallest = _hessian_extremes(zz, zt, tt, dense_limit)
    d_small = float(scipy.linalg.eigvalsh(D, subset_by_index=[0, 0])[0])
    c_sym_small = float(scipy.linalg.eigvalsh(C + C.T, subset_by_index=[0, 0])[0])
    return ConvexityReport(
        d_matrix=D,
        c_matrix=C,
        zz_block=zz,
        zt_diag=zt,
        tt_diag=tt,
        smallest_eigenvalue=smallest,
        hessian_norm=H_norm,
        d_smallest_eigenvalue=d_small,
        c_symmetric_smallest_eigenvalue=c_sym_small,
    )


def _c_matrix(sol, system, fac, gamma) -> np.ndarray:
    """Data-dependent curvature: contraction of the second derivatives of the
    electrode coefficients against the misfit.

    Uses the eigendecomposition of the symmetrized misfit: for each eigenpair
    (s_k, w_k), the rank-one contribution is s_k Z_k^T (K Z_k) with column nu
    of Z_k equal to the derivative of X w_k along xi_nu, obtained from one
    multi-column solve against sparse right-hand sides.
    """
    delta = sol.alpha - gamma
    s, w = np.linalg.eigh(delta + delta.T)
    n = system.n
    u = sol.interior_potentials[system.dof_triangles]  # (n, 3, L-1)
    tri_rows = system.dof_triangles  # (n, 3)
    C = np.zeros((n, n))
    for k in range(s.shape[0]):
        if abs(s[k]) == 0.0:
            continue
        y = u @ w[:, k]  # (n, 3): X w_k restricted to each element's vertices
        local = -np.einsum("eij,ej->ei", system.dof_local, y)  # -(dK_nu)(X w_k)
        rhs = np.zeros((system.dim, n))
        np.add.at(rhs, (tri_rows.ravel(), np.repeat(np.arange(n), 3)), local.ravel())
        z = fac.solve(rhs)  # Z_k = K^{-1} RHS_k
        C += s[k] * (z.T @ rhs)
    return 0.5 * (C + C.T)  # symmetric up to roundoff by construction


def _hessian_extremes(zz, zt, tt, dense_limit) -> tuple[float, float]:
    N = zt.shape[0]
    if 2 * N <= dense_limit:
        H = np.zeros((2 * N, 2 * N))
        H[:N, :N] = zz
        H[:N, N:] = np.diag(zt)
        H[N:, :N] = np.diag(zt)
        H[N:, N:] = np.diag(tt)
        ev = scipy.linalg.eigvalsh(H)
        return float(np.abs(ev).max()), float(ev[0])

    def matvec(q):
        q1, q2 = q[:N], q[N:]
        return np.concatenate([zz @ q1 + zt * q2, zt * q1 + tt * q2])

    lin = scipy.sparse.linalg.LinearOperator((2 * N, 2 * N), matvec=matvec)
    top = float(scipy.sparse.linalg.eigsh(lin, k=1, which="LA", return_eigenvectors=False)[0])
    bottom = float(
        scipy.sparse.linalg.eigsh(
            lin, k=1, sigma=None, which="SA", return_eigenvectors=False, maxiter=5000
        )[0]
    )
    return max(abs(top), abs(bottom)), bottom
