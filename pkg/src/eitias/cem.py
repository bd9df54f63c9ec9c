"""Complete-electrode-model FEM: assembly, frame solves, and voltage data.

The discrete system couples piecewise-linear interior potentials with the
electrode voltage coefficients expressed in a zero-sum current basis.  The
conductivity enters only through the interior stiffness block, assembled as
a background part plus one rank-3 element matrix per degree of freedom, so
perturbation derivatives of the system matrix are cheap and exact.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .errors import NumericalError, ValidationError
from .fileio import atomic_write_json, read_json
from .mesh import TWO_PI, ElectrodeLayout, Mesh, SubdomainMap, _frozen

# ---------------------------------------------------------------------------
# Current basis
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CurrentBasis:
    """Orthonormal basis of zero-sum electrode current patterns.

    matrix : (L, L-1) with orthonormal, zero-sum columns.
    kind : "trigonometric" or "custom".
    """

    matrix: np.ndarray
    kind: str = "custom"

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=float)
        if m.ndim != 2 or m.shape[1] != m.shape[0] - 1:
            raise ValidationError("current basis must be L x (L-1)")
        gram = m.T @ m
        if np.abs(gram - np.eye(m.shape[1])).max() > 1e-12:
            raise ValidationError("current basis columns are not orthonormal")
        if np.abs(m.sum(axis=0)).max() > 1e-12:
            raise ValidationError("current basis columns must sum to zero")
        object.__setattr__(self, "matrix", _frozen(m))

    @property
    def num_electrodes(self) -> int:
        return self.matrix.shape[0]


def trigonometric_basis(num_electrodes: int) -> CurrentBasis:
    """Cosine/sine current patterns, each column normalized to unit norm.

    Column ell (1-based) evaluates cos(2*pi*ell*j/L) at electrode j for
    ell <= L/2 and sin(2*pi*(ell - L/2)*j/L) beyond, for j = 1..L.
    Requires an even electrode count of at least 4.
    """
    L = int(num_electrodes)
    if L < 4 or L % 2 != 0:
        raise ValidationError("trigonometric basis needs an even electrode count >= 4")
    j = np.arange(1, L + 1)
    cols = []
    for ell in range(1, L):
        if ell <= L // 2:
            col = np.cos(TWO_PI * ell * j / L)
        else:
            col = np.sin(TWO_PI * (ell - L // 2) * j / L)
        cols.append(col / np.linalg.norm(col))
    return CurrentBasis(matrix=np.column_stack(cols), kind="trigonometric")


# ---------------------------------------------------------------------------
# Element stiffness
# ---------------------------------------------------------------------------


def element_stiffness(mesh: Mesh, element: int) -> np.ndarray:
    """Local 3x3 stiffness of one triangle at unit conductivity.

    Entry (j, k) is the element area times the (constant) dot product of the
    gradients of the two local linear basis functions.
    """
    tri = mesh.triangles[element]
    p = mesh.vertices[tri]
    return _local_stiffness(p[None])[0]


def _local_stiffness(p: np.ndarray) -> np.ndarray:
    """Vectorized local stiffness for a (k, 3, 2) stack of triangles."""
    x, y = p[..., 0], p[..., 1]
    b = np.stack([y[:, 1] - y[:, 2], y[:, 2] - y[:, 0], y[:, 0] - y[:, 1]], axis=1)
    c = np.stack([x[:, 2] - x[:, 1], x[:, 0] - x[:, 2], x[:, 1] - x[:, 0]], axis=1)
    area2 = x[:, 0] * b[:, 0] + x[:, 1] * b[:, 1] + x[:, 2] * b[:, 2]
    if np.any(area2 <= 0):
        bad = int(np.argmin(area2))
        raise ValidationError(f"degenerate or inverted triangle (index {bad} in batch)")
    s = np.einsum("ki,kj->kij", b, b) + np.einsum("ki,kj->kij", c, c)
    return s / (2.0 * area2)[:, None, None]


# ---------------------------------------------------------------------------
# System assembly
# ---------------------------------------------------------------------------


@dataclass
class CemSystem:
    """Assembled blocks of the electrode-model system for a marked mesh.

    Holds the background stiffness at unit conductivity, the per-element
    rank-3 matrices for the degrees of freedom, and the electrode coupling
    blocks derived from the boundary terms of the bilinear form with weights
    1/z_l.  `assemble(xi)` produces the full sparse symmetric system.
    """

    mesh: Mesh
    sub: SubdomainMap
    layout: ElectrodeLayout
    basis: CurrentBasis
    sigma0: float
    k0: sp.csr_matrix  # n_v x n_v stiffness at sigma = 1
    boundary_mass: sp.csr_matrix  # n_v x n_v electrode term sum_l (1/z_l) int psi_j psi_k
    k12: np.ndarray  # n_v x (L-1), dense but column-sparse
    k22: np.ndarray  # (L-1) x (L-1)
    dof_triangles: np.ndarray  # (n, 3) vertex triplets of the DOF elements
    dof_local: np.ndarray  # (n, 3, 3) local stiffness matrices

    @property
    def n(self) -> int:
        return self.sub.n

    @property
    def num_patterns(self) -> int:
        return self.basis.num_electrodes - 1

    @property
    def dim(self) -> int:
        return self.mesh.num_vertices + self.num_patterns

    def check_conductivity(self, xi: np.ndarray) -> np.ndarray:
        xi = np.asarray(xi, dtype=float).ravel()
        if xi.shape[0] != self.n:
            raise ValidationError(f"xi must have length {self.n}")
        sigma = self.sigma0 + xi
        if np.any(sigma <= 0):
            bad = int(np.argmin(sigma))
            raise ValidationError(
                f"non-positive conductivity {sigma[bad]:.3e} on element {bad}"
            )
        return xi

    def k11(self, xi: np.ndarray) -> sp.csr_matrix:
        """Interior conductivity block sigma0*K0 + sum_nu xi_nu K_nu."""
        xi = self.check_conductivity(xi)
        n_v = self.mesh.num_vertices
        rows = np.repeat(self.dof_triangles, 3, axis=1).ravel()
        cols = np.tile(self.dof_triangles, (1, 3)).ravel()
        vals = (self.dof_local * xi[:, None, None]).ravel()
        pert = sp.csr_matrix((vals, (rows, cols)), shape=(n_v, n_v))
        return (self.sigma0 * self.k0 + pert).tocsr()

    def assemble(self, xi: np.ndarray) -> sp.csc_matrix:
        """Full symmetric block system for the given perturbation."""
        a11 = self.k11(xi) + self.boundary_mass
        k12 = sp.csr_matrix(self.k12)
        full = sp.bmat([[a11, k12], [k12.T, sp.csr_matrix(self.k22)]], format="csc")
        return full


def assemble_system(
    mesh: Mesh,
    sub: SubdomainMap,
    layout: ElectrodeLayout,
    basis: CurrentBasis,
    sigma0: float = 1.0,
) -> CemSystem:
    """Precompute every xi-independent block of the electrode-model system.

    The electrode coupling blocks integrate the piecewise-linear traces
    exactly over whole boundary segments; mesh generation guarantees that no
    segment straddles an electrode endpoint.
    """
    if sigma0 <= 0:
        raise ValidationError("background conductivity must be positive")
    if basis.num_electrodes != layout.count:
        raise ValidationError("current basis and electrode layout sizes differ")
    n_v = mesh.num_vertices
    L = layout.count

    tris = mesh.triangles
    local = _local_stiffness(mesh.vertices[tris])
    rows = np.repeat(tris, 3, axis=1).ravel()
    cols = np.tile(tris, (1, 3)).ravel()
    k0 = sp.csr_matrix((local.ravel(), (rows, cols)), shape=(n_v, n_v))

    seg_electrode = _segment_electrodes(mesh, layout)
    br, bc, bv = [], [], []
    k12 = np.zeros((n_v, L - 1))
    k22 = np.zeros((L - 1, L - 1))
    E = basis.matrix
    edge_int = np.zeros(L)  # accumulated electrode lengths
    for (va, vb), elec in zip(mesh.boundary_segments, seg_electrode):
        if elec < 0:
            continue
        va, vb = int(va), int(vb)
        length = float(np.linalg.norm(mesh.vertices[vb] - mesh.vertices[va]))
        w = 1.0 / layout.contact_impedances[elec]
        edge_int[elec] += length
        # int over the segment of psi_a psi_b products (linear traces)
        for (i, j, v) in ((va, va, length / 3), (vb, vb, length / 3),
                          (va, vb, length / 6), (vb, va, length / 6)):
            br.append(i)
            bc.append(j)
            bv.append(w * v)
        # int psi over the segment is length/2 at either endpoint
        k12[va] -= w * (length / 2) * E[elec]
        k12[vb] -= w * (length / 2) * E[elec]
    boundary_mass = sp.csr_matrix((bv, (br, bc)), shape=(n_v, n_v))
    z_weighted = E * (edge_int / layout.contact_impedances)[:, None]
    k22 = E.T @ z_weighted

    return CemSystem(
        mesh=mesh,
        sub=sub,
        layout=layout,
        basis=basis,
        sigma0=float(sigma0),
        k0=k0,
        boundary_mass=boundary_mass,
        k12=k12,
        k22=k22,
        dof_triangles=np.ascontiguousarray(tris[: sub.n]),
        dof_local=np.ascontiguousarray(local[: sub.n]),
    )


def _segment_electrodes(mesh: Mesh, layout: ElectrodeLayout) -> np.ndarray:
    """Electrode index per boundary segment (-1 for gaps), by midpoint angle."""
    out = np.full(mesh.boundary_segments.shape[0], -1, dtype=np.int64)
    pa = mesh.vertices[mesh.boundary_segments[:, 0]]
    pb = mesh.vertices[mesh.boundary_segments[:, 1]]
    ang_a = np.arctan2(pa[:, 1], pa[:, 0])
    ang_b = np.arctan2(pb[:, 1], pb[:, 0])
    # midpoint angle along the circle, robust across the 2*pi wrap
    diff = np.mod(ang_b - ang_a, TWO_PI)
    mid = np.mod(ang_a + diff / 2, TWO_PI)
    for e, (s, t) in enumerate(layout.arcs):
        rel = np.mod(mid - s, TWO_PI)
        out[rel < (t - s)] = e
    return out


# ---------------------------------------------------------------------------
# Frame solution
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FrameSolution:
    """Solution of the system for all canonical current patterns at once.

    interior_potentials : (n_v, L-1) nodal potentials, one column per pattern.
    alpha : (L-1, L-1) electrode-voltage coefficients in the current basis.
    residual : relative block-system residual of the factored solve.
    """

    interior_potentials: np.ndarray
    alpha: np.ndarray
    xi: np.ndarray
    residual: float


class FrameFactorization:
    """Sparse factorization of K(xi), reusable across right-hand sides."""

    def __init__(self, system: CemSystem, xi: np.ndarray):
        self.system = system
        self.xi = system.check_conductivity(xi)
        self.matrix = system.assemble(self.xi)
        try:
            self._lu = splu(self.matrix)
        except RuntimeError as exc:
            raise NumericalError(
                "system factorization failed; check conductivity positivity "
                f"(min sigma = {system.sigma0 + self.xi.min():.3e}): {exc}"
            ) from exc

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        out = self._lu.solve(np.asarray(rhs, dtype=float))
        if not np.all(np.isfinite(out)):
            raise NumericalError("frame solve produced non-finite values")
        return out

    def condition_estimate(self, iterations: int = 15) -> float:
        """Spectral condition estimate by deterministic power iteration.

        The system is symmetric, so power iteration on the matrix and on the
        factored inverse (fixed start vector, no randomness) brackets the
        extreme eigenvalue magnitudes.
        """
        dim = self.matrix.shape[0]
        v = np.ones(dim) / np.sqrt(dim)
        top = 0.0
        for _ in range(iterations):
            w = self.matrix @ v
            top = float(np.linalg.norm(w))
            v = w / top
        v = np.ones(dim) / np.sqrt(dim)
        inv_top = 0.0
        for _ in range(iterations):
            w = self._lu.solve(v)
            inv_top = float(np.linalg.norm(w))
            v = w / inv_top
        return top * inv_top


def solve_frame(
    system: CemSystem, xi: np.ndarray, factorization: FrameFactorization | None = None
) -> FrameSolution:
    """Solve the block system for every canonical right-hand side at once.

    A single sparse factorization is shared across the L-1 right-hand sides;
    one step of iterative refinement is applied if the relative residual
    exceeds a tenth of the 1e-10 contract.
    """
    fac = factorization if factorization is not None else FrameFactorization(system, xi)
    n_v = system.mesh.num_vertices
    p = system.num_patterns
    rhs = np.zeros((system.dim, p))
    rhs[n_v:, :] = np.eye(p)
    x = fac.solve(rhs)

    def rel_residual(xmat):
        r = rhs - fac.matrix @ xmat
        denom = np.linalg.norm(rhs) + np.linalg.norm(xmat)
        return np.linalg.norm(r) / denom, r

    res, r = rel_residual(x)
    if res > 1e-11:
        x = x + fac.solve(r)
        res, _ = rel_residual(x)
    if res > 1e-10:
        raise NumericalError(f"frame solve residual {res:.2e} exceeds 1e-10")
    return FrameSolution(
        interior_potentials=_frozen(x[:n_v]),
        alpha=_frozen(x[n_v:]),
        xi=_frozen(fac.xi.copy()),
        residual=float(res),
    )


def resistance_matrix(system: CemSystem, xi: np.ndarray) -> np.ndarray:
    """Map applied zero-sum current patterns to electrode voltage patterns."""
    sol = solve_frame(system, xi)
    E = system.basis.matrix
    return E @ sol.alpha @ E.T  # E has orthonormal columns, so E-dagger = E^T


def stack_voltages(system: CemSystem, alpha: np.ndarray) -> np.ndarray:
    """Stack per-pattern electrode voltages E alpha^l into one data vector."""
    return np.asarray(system.basis.matrix @ alpha).ravel(order="F")


def forward_map(
    system: CemSystem, xi: np.ndarray, solution: FrameSolution | None = None
) -> np.ndarray:
    """Stacked electrode voltages for the full frame of injected patterns.

    The injected currents are the basis columns themselves, so the data
    vector has length L(L-1).
    """
    sol = solution if solution is not None else solve_frame(system, xi)
    return stack_voltages(system, sol.alpha)


# ---------------------------------------------------------------------------
# Measurement data
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MeasurementSet:
    """A full frame of (possibly noisy) stacked electrode voltages."""

    data: np.ndarray
    noise_std: float
    num_electrodes: int
    basis_kind: str = "trigonometric"
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        d = np.asarray(self.data, dtype=float).ravel()
        L = self.num_electrodes
        if d.shape[0] != L * (L - 1):
            raise ValidationError(f"measurement length {d.shape[0]} != L(L-1) = {L*(L-1)}")
        if self.noise_std < 0:
            raise ValidationError("noise level must be nonnegative")
        object.__setattr__(self, "data", _frozen(d))

    @property
    def m(self) -> int:
        return self.data.shape[0]

    def gamma(self, basis: CurrentBasis) -> np.ndarray:
        """Voltage coefficients in the basis: gamma = E^T U per pattern."""
        L = self.num_electrodes
        u = self.data.reshape(L - 1, L).T  # column l is U^l
        return basis.matrix.T @ u


def save_measurement(path, ms: MeasurementSet) -> None:
    payload = {
        "L": ms.num_electrodes,
        "basis": "trig" if ms.basis_kind == "trigonometric" else ms.basis_kind,
        "m": ms.m,
        "data": ms.data.tolist(),
        "noise_std": ms.noise_std,
        "seed": ms.provenance.get("seed"),
        "mesh_id": ms.provenance.get("mesh_id"),
    }
    extra = {k: v for k, v in ms.provenance.items() if k not in ("seed", "mesh_id")}
    if extra:
        payload["provenance"] = extra
    atomic_write_json(path, payload)


def load_measurement(path) -> MeasurementSet:
    raw = read_json(path)
    for key in ("L", "basis", "m", "data", "noise_std"):
        if key not in raw:
            raise ValidationError(f"measurement file missing field '{key}'")
    if int(raw["m"]) != len(raw["data"]):
        raise ValidationError("measurement file: m disagrees with data length")
    prov = dict(raw.get("provenance", {}))
    if raw.get("seed") is not None:
        prov["seed"] = raw["seed"]
    if raw.get("mesh_id") is not None:
        prov["mesh_id"] = raw["mesh_id"]
    return MeasurementSet(
        data=np.asarray(raw["data"], dtype=float),
        noise_std=float(raw["noise_std"]),
        num_electrodes=int(raw["L"]),
        basis_kind="trigonometric" if raw["basis"] == "trig" else raw["basis"],
        provenance=prov,
    )
