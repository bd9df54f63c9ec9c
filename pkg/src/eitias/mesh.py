"""Disc tessellations, electrode layouts, and the edge-increment operator.

The mesher is a structured polar generator: concentric vertex rings whose
outermost ring contains every electrode arc endpoint, radial spacing growing
geometrically away from the boundary by the requested grading factor, and
annuli triangulated by an angular two-pointer sweep.  The construction is
fully deterministic for fixed inputs.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .errors import MeshError, NumericalError, ValidationError
from .fileio import atomic_write_json, read_json

TWO_PI = 2.0 * np.pi

# Vertices within radius + _D_TOL of the origin count as inside the
# inclusion-support disc; guards against floating-point boundary vertices.
_D_TOL = 1e-9


# ---------------------------------------------------------------------------
# Electrode layout
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ElectrodeLayout:
    """Contact electrodes on the unit circle.

    Attributes
    ----------
    arcs : ndarray, shape (L, 2)
        Angular intervals [start, end) in radians with 0 <= start < 2*pi and
        end > start; arcs are pairwise disjoint on the circle.
    contact_impedances : ndarray, shape (L,)
        Strictly positive contact impedance per electrode.
    """

    arcs: np.ndarray
    contact_impedances: np.ndarray

    def __post_init__(self):
        arcs = np.atleast_2d(np.asarray(self.arcs, dtype=float))
        z = np.asarray(self.contact_impedances, dtype=float).ravel()
        if arcs.shape[0] != z.shape[0] or arcs.shape[1] != 2:
            raise ValidationError("electrode arcs and impedances are inconsistent")
        if np.any(z <= 0):
            raise ValidationError("contact impedances must be strictly positive")
        if np.any(arcs[:, 1] <= arcs[:, 0]):
            raise ValidationError("electrode arcs must have positive length")
        if np.sum(arcs[:, 1] - arcs[:, 0]) >= TWO_PI:
            raise ValidationError("electrode arcs cover the whole boundary")
        order = np.argsort(arcs[:, 0])
        sorted_arcs = arcs[order]
        starts, ends = sorted_arcs[:, 0], sorted_arcs[:, 1]
        nxt = np.roll(starts, -1).copy()
        nxt[-1] += TWO_PI
        if np.any(ends > nxt + 1e-12):
            raise ValidationError("electrode arcs overlap")
        object.__setattr__(self, "arcs", _frozen(arcs))
        object.__setattr__(self, "contact_impedances", _frozen(z))

    @property
    def count(self) -> int:
        return self.arcs.shape[0]

    @property
    def filling_fraction(self) -> float:
        return float(np.sum(self.arcs[:, 1] - self.arcs[:, 0]) / TWO_PI)

    @classmethod
    def uniform(cls, count: int, filling_fraction: float, z0: float = 1e-6) -> "ElectrodeLayout":
        """Evenly spaced identical electrodes covering the given boundary fraction."""
        if count < 2:
            raise ValidationError("need at least 2 electrodes")
        if not 0 < filling_fraction < 1:
            raise ValidationError("filling fraction must lie in (0, 1)")
        width = filling_fraction * TWO_PI / count
        centers = TWO_PI * np.arange(count) / count
        arcs = np.column_stack([centers - width / 2, centers + width / 2])
        arcs[0] += 0.0 if arcs[0, 0] >= 0 else 0.0
        if arcs[0, 0] < 0:
            arcs += width / 2  # rotate so the first arc starts at a nonnegative angle
        return cls(arcs=arcs, contact_impedances=np.full(count, float(z0)))


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.flags.writeable = False
    return a


# ---------------------------------------------------------------------------
# Mesh
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Mesh:
    """Triangulation of the unit disc.

    vertices : (n_v, 2) float coordinates.
    triangles : (n_t, 3) vertex indices, counter-clockwise.
    boundary_segments : (n_b, 2) vertex-index pairs on the outer boundary.
    element_areas : (n_t,) positive triangle areas.
    """

    vertices: np.ndarray
    triangles: np.ndarray
    boundary_segments: np.ndarray
    element_areas: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "vertices", _frozen(np.asarray(self.vertices, dtype=float)))
        object.__setattr__(self, "triangles", _frozen(np.asarray(self.triangles, dtype=np.int64)))
        object.__setattr__(
            self, "boundary_segments", _frozen(np.asarray(self.boundary_segments, dtype=np.int64))
        )
        object.__setattr__(self, "element_areas", _frozen(np.asarray(self.element_areas, dtype=float)))

    @property
    def num_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def num_triangles(self) -> int:
        return self.triangles.shape[0]

    def centroids(self) -> np.ndarray:
        return self.vertices[self.triangles].mean(axis=1)


def signed_areas(vertices: np.ndarray, triangles: np.ndarray) -> np.ndarray:
    p = vertices[triangles]
    return 0.5 * (
        (p[:, 1, 0] - p[:, 0, 0]) * (p[:, 2, 1] - p[:, 0, 1])
        - (p[:, 2, 0] - p[:, 0, 0]) * (p[:, 1, 1] - p[:, 0, 1])
    )


def edge_adjacency(triangles: np.ndarray) -> dict[tuple[int, int], list[int]]:
    """Map each undirected edge (sorted vertex pair) to its adjacent elements."""
    adj: dict[tuple[int, int], list[int]] = {}
    for t, (a, b, c) in enumerate(np.asarray(triangles)):
        for u, v in ((a, b), (b, c), (c, a)):
            key = (int(u), int(v)) if u < v else (int(v), int(u))
            adj.setdefault(key, []).append(t)
    return adj


def validate_mesh(mesh: Mesh) -> None:
    """Check orientation, edge-manifoldness, boundary closure and area budget.

    Raises MeshError on the first violated invariant.
    """
    areas = signed_areas(mesh.vertices, mesh.triangles)
    if np.any(areas <= 0):
        bad = int(np.argmin(areas))
        raise MeshError(f"triangle {bad} has non-positive signed area {areas[bad]:.3e}")
    if not np.allclose(areas, mesh.element_areas, rtol=1e-12, atol=1e-15):
        raise MeshError("stored element areas disagree with vertex coordinates")

    adj = edge_adjacency(mesh.triangles)
    boundary_keys = {tuple(sorted(map(int, seg))) for seg in mesh.boundary_segments}
    for key, elems in adj.items():
        if len(elems) > 2:
            raise MeshError(f"edge {key} shared by {len(elems)} triangles")
        if len(elems) == 1 and key not in boundary_keys:
            raise MeshError(f"edge {key} is naked but not a declared boundary segment")
        if len(elems) == 2 and key in boundary_keys:
            raise MeshError(f"declared boundary edge {key} is interior")
    for key in boundary_keys:
        if key not in adj or len(adj[key]) != 1:
            raise MeshError(f"declared boundary segment {key} is not a mesh boundary edge")

    # boundary segments must chain into a single closed polygon
    succ = {int(a): int(b) for a, b in mesh.boundary_segments}
    if len(succ) != len(mesh.boundary_segments):
        raise MeshError("boundary segments do not form a simple cycle")
    start = next(iter(succ))
    node, steps = start, 0
    while True:
        node = succ.get(node, -1)
        steps += 1
        if node == -1:
            raise MeshError("boundary polygon is not closed")
        if node == start:
            break
        if steps > len(succ):
            raise MeshError("boundary polygon does not close after visiting all segments")
    if steps != len(succ):
        raise MeshError("boundary segments form more than one loop")

    total = float(np.sum(mesh.element_areas))
    if not (0 < total < np.pi):
        raise MeshError(f"element areas sum to {total:.6f}, outside (0, pi)")


def mesh_id(mesh: Mesh) -> str:
    """Stable short identifier used for data provenance / inverse-crime checks."""
    h = hashlib.sha256()
    h.update(np.round(mesh.vertices, 12).tobytes())
    h.update(mesh.triangles.tobytes())
    return h.hexdigest()[:12]


# ---------------------------------------------------------------------------
# Structured polar mesher
# ---------------------------------------------------------------------------

# Radial profile: a flat fine layer of absolute depth _FLAT_DEPTH hugging the
# boundary (the electrode-edge singularities live there), then geometric
# growth that reaches the interior element size within _GROWTH_RINGS rings.
_FLAT_DEPTH = 0.05
_GROWTH_RINGS = 2
_MIN_RING_COUNT = 6


def _boundary_angles(layout: ElectrodeLayout, h_b: float) -> np.ndarray:
    """Angular grid on the boundary: every electrode endpoint is a grid point
    and each electrode/gap piece is subdivided close to the spacing h_b."""
    arcs = layout.arcs[np.argsort(layout.arcs[:, 0])]
    pieces = []  # (start, length)
    for i in range(len(arcs)):
        s, e = arcs[i]
        pieces.append((s, e - s))
        gap_end = arcs[(i + 1) % len(arcs), 0] + (TWO_PI if i == len(arcs) - 1 else 0.0)
        gap_len = gap_end - e
        if gap_len < 1e-12:
            raise MeshError("electrode arcs touch or overlap after snapping to the angular grid")
        pieces.append((e, gap_len))
    angles = []
    for start, length in pieces:
        k = max(1, int(round(length / h_b)))
        angles.extend(start + length * np.arange(k) / k)
    out = np.mod(np.asarray(angles), TWO_PI)
    out.sort()
    if np.min(np.diff(out, append=out[0] + TWO_PI)) < 1e-12:
        raise MeshError("duplicate boundary vertices; electrode arcs too close together")
    return out


def _ring_plan(layout: ElectrodeLayout, h_b: float, grading: float):
    """Plan (boundary_angles, [(radius, count), ...] inward) for spacing h_b."""
    boundary = _boundary_angles(layout, h_b)
    n_b = len(boundary)
    h_int = grading * h_b
    growth = grading ** (1.0 / _GROWTH_RINGS) if grading > 1 else 1.0
    rings = []
    r, delta, count = 1.0, h_b, n_b
    while True:
        if 1.0 - r >= _FLAT_DEPTH:
            delta = min(delta * growth, h_int)
        r_new = r - delta
        if r_new <= 0.75 * delta:
            break
        count = min(count, max(_MIN_RING_COUNT, int(round(TWO_PI * r_new / delta))))
        rings.append((r_new, count))
        r = r_new
    return boundary, rings


def _predict_count(layout: ElectrodeLayout, h_b: float, grading: float) -> int:
    boundary, rings = _ring_plan(layout, h_b, grading)
    total, prev = 0, len(boundary)
    for _, count in rings:
        total += prev + count
        prev = count
    return total + prev  # center fan


def _stitch_annulus(outer_ids, outer_ang, inner_ids, inner_ang, vertices, triangles):
    """Triangulate the annulus between two vertex rings by an angular sweep."""
    p, q = len(outer_ids), len(inner_ids)
    base = outer_ang[0]
    oa = np.mod(outer_ang - base, TWO_PI)
    ia = np.mod(inner_ang - base, TWO_PI)
    roll = int(np.argmin(ia))
    inner_ids = np.roll(inner_ids, -roll)
    ia = np.roll(ia, -roll)

    def o_ang(k):
        return oa[k % p] + TWO_PI * (k // p)

    def i_ang(k):
        return ia[k % q] + TWO_PI * (k // q)

    oi = ii = 0
    while oi < p or ii < q:
        o_cur = outer_ids[oi % p]
        i_cur = inner_ids[ii % q]
        advance_outer = oi < p and (ii == q or o_ang(oi + 1) <= i_ang(ii + 1))
        if advance_outer:
            tri = (o_cur, outer_ids[(oi + 1) % p], i_cur)
            oi += 1
        else:
            tri = (i_cur, o_cur, inner_ids[(ii + 1) % q])
            ii += 1
        _emit(tri, vertices, triangles)


def _emit(tri, vertices, triangles):
    a, b, c = tri
    pa, pb, pc = vertices[a], vertices[b], vertices[c]
    area2 = (pb[0] - pa[0]) * (pc[1] - pa[1]) - (pc[0] - pa[0]) * (pb[1] - pa[1])
    if area2 < 0:
        tri = (a, c, b)
    elif area2 == 0:
        raise MeshError("degenerate triangle emitted during ring stitching")
    triangles.append(tri)


def _build_from_plan(boundary: np.ndarray, rings) -> Mesh:
    vert_list = [np.column_stack([np.cos(boundary), np.sin(boundary)])]
    ring_ids = [np.arange(len(boundary))]
    ring_angles = [boundary]
    offset = len(boundary)
    for i, (r, count) in enumerate(rings):
        ang = TWO_PI * (np.arange(count) + 0.5 * ((i + 1) % 2)) / count
        vert_list.append(np.column_stack([r * np.cos(ang), r * np.sin(ang)]))
        ring_ids.append(np.arange(offset, offset + count))
        ring_angles.append(ang)
        offset += count
    center_id = offset
    vert_list.append(np.zeros((1, 2)))
    vertices = np.vstack(vert_list)

    triangles: list[tuple[int, int, int]] = []
    for i in range(len(ring_ids) - 1):
        _stitch_annulus(
            ring_ids[i], ring_angles[i], ring_ids[i + 1], ring_angles[i + 1], vertices, triangles
        )
    last = ring_ids[-1]
    for j in range(len(last)):
        _emit((center_id, int(last[j]), int(last[(j + 1) % len(last)])), vertices, triangles)

    tri_arr = np.asarray(triangles, dtype=np.int64)
    n_b = len(boundary)
    segs = np.column_stack([np.arange(n_b), (np.arange(n_b) + 1) % n_b])
    areas = signed_areas(vertices, tri_arr)
    return Mesh(vertices=vertices, triangles=tri_arr, boundary_segments=segs, element_areas=areas)


def build_disc_mesh(
    layout: ElectrodeLayout, target_element_count: int, boundary_grading: float = 3.0
) -> Mesh:
    """Tessellate the unit disc with electrode-aligned boundary vertices.

    Parameters
    ----------
    layout : ElectrodeLayout
        Electrode arcs; every arc endpoint becomes a boundary vertex.
    target_element_count : int
        Requested number of triangles (>= 64); matched by a search over the
        boundary spacing, typically within a few percent.
    boundary_grading : float
        Ratio of interior to boundary element size (>= 1).  Values > 1 refine
        the mesh toward the boundary to resolve the electrode-edge behaviour.

    Returns
    -------
    Mesh
        A validated tessellation, deterministic for fixed inputs.
    """
    if target_element_count < 64:
        raise ValidationError("target element count must be at least 64")
    if boundary_grading < 1:
        raise ValidationError("boundary grading must be >= 1")

    # the element count is (nearly) monotone decreasing in the boundary spacing
    lo, hi = 1e-3, 1.2
    best_h, best_gap = None, None
    for _ in range(60):
        mid = np.sqrt(lo * hi)
        count = _predict_count(layout, mid, boundary_grading)
        gap = abs(count - target_element_count)
        if best_gap is None or gap < best_gap:
            best_h, best_gap = mid, gap
        if count > target_element_count:
            lo = mid
        else:
            hi = mid
        if hi / lo < 1 + 1e-12:
            break
    boundary, rings = _ring_plan(layout, best_h, boundary_grading)
    mesh = _build_from_plan(boundary, rings)
    validate_mesh(mesh)
    _check_arc_endpoints(mesh, layout)
    return mesh


def _check_arc_endpoints(mesh: Mesh, layout: ElectrodeLayout) -> None:
    boundary_ids = np.unique(mesh.boundary_segments)
    ang = np.mod(np.arctan2(mesh.vertices[boundary_ids, 1], mesh.vertices[boundary_ids, 0]), TWO_PI)
    for s, e in layout.arcs:
        for a in (s % TWO_PI, e % TWO_PI):
            d = np.abs(np.mod(ang - a + np.pi, TWO_PI) - np.pi)
            if d.min() > 1e-9:
                raise MeshError(f"electrode arc endpoint at angle {a:.6f} is not a boundary vertex")


# ---------------------------------------------------------------------------
# Inclusion-support subdomain
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SubdomainMap:
    """Index bookkeeping for the inclusion-support subdomain.

    After `mark_subdomain` the mesh elements are permuted so that the
    subdomain occupies indices 0..n-1 (the conventional leading block).
    """

    d_indices: np.ndarray
    n: int
    radius: float | None

    def __post_init__(self):
        object.__setattr__(self, "d_indices", _frozen(np.asarray(self.d_indices, dtype=np.int64)))

    @classmethod
    def whole(cls, mesh: Mesh) -> "SubdomainMap":
        """Every element is a degree of freedom (used for data simulation)."""
        return cls(d_indices=np.arange(mesh.num_triangles), n=mesh.num_triangles, radius=None)


def mark_subdomain(mesh: Mesh, radius: float) -> tuple[Mesh, SubdomainMap]:
    """Mark elements inside the disc of the given radius and reorder them first.

    An element belongs to the subdomain when all three of its vertices lie
    within `radius + 1e-9` of the origin.  Returns the permuted mesh together
    with the subdomain map; the permutation is stable within both groups.
    """
    if not 0 < radius <= 1:
        raise ValidationError("subdomain radius must lie in (0, 1]")
    dist = np.linalg.norm(mesh.vertices, axis=1)
    inside = np.all(dist[mesh.triangles] <= radius + _D_TOL, axis=1)
    n = int(np.count_nonzero(inside))
    if n == 0:
        raise MeshError(f"no element lies inside radius {radius}; mesh too coarse")
    perm = np.concatenate([np.flatnonzero(inside), np.flatnonzero(~inside)])
    reordered = Mesh(
        vertices=mesh.vertices,
        triangles=mesh.triangles[perm],
        boundary_segments=mesh.boundary_segments,
        element_areas=mesh.element_areas[perm],
    )
    return reordered, SubdomainMap(d_indices=np.arange(n), n=n, radius=radius)


# ---------------------------------------------------------------------------
# Increment operator
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class IncrementOperator:
    """Signed incidence matrix of element-value differences across edges.

    Rows correspond to interior mesh edges touching the subdomain; row k has
    entry +1 at the lower-indexed adjacent element and -1 at the higher one
    when that element is also inside the subdomain.  The matrix has full
    column rank n.
    """

    matrix: sp.csr_matrix
    edge_list: np.ndarray  # (N, 2) element pairs, lower index first
    n: int

    @property
    def num_edges(self) -> int:
        return self.edge_list.shape[0]


def build_increment_operator(mesh: Mesh, sub: SubdomainMap) -> IncrementOperator:
    """Assemble the edge-difference operator for the marked mesh."""
    if sub.n < 1:
        raise ValidationError("subdomain is empty")
    n = sub.n
    adj = edge_adjacency(mesh.triangles)
    pairs = []
    for elems in adj.values():
        if len(elems) == 2:
            nu, mu = sorted(elems)
            if nu < n:  # at least one adjacent element inside the subdomain
                pairs.append((nu, mu))
    pairs.sort()
    edge_list = np.asarray(pairs, dtype=np.int64)
    rows, cols, vals = [], [], []
    for k, (nu, mu) in enumerate(pairs):
        rows.append(k)
        cols.append(nu)
        vals.append(1.0)
        if mu < n:
            rows.append(k)
            cols.append(mu)
            vals.append(-1.0)
    matrix = sp.csr_matrix((vals, (rows, cols)), shape=(len(pairs), n))
    return IncrementOperator(matrix=matrix, edge_list=edge_list, n=n)


class WeightedPseudoinverse:
    """Factorized application of the weighted pseudoinverse of the increment
    operator.

    For weights theta, the scaled operator is D_theta^{-1/2} L and its
    pseudoinverse is applied through a sparse factorization of the Gram
    matrix L^T D_theta^{-1} L, refactored once per weight vector.
    """

    def __init__(self, op: IncrementOperator, weights: np.ndarray | None = None):
        L = op.matrix
        if weights is None:
            w = np.ones(op.num_edges)
        else:
            w = np.asarray(weights, dtype=float).ravel()
            if w.shape[0] != op.num_edges:
                raise ValidationError("weight vector length mismatch")
            if np.any(w <= 0) or not np.all(np.isfinite(w)):
                raise ValidationError("weights must be strictly positive and finite")
        self.op = op
        self.weights = w
        self._inv_sqrt_w = 1.0 / np.sqrt(w)
        gram = (L.T @ L.multiply((1.0 / w)[:, None])).tocsc()
        try:
            self._lu = splu(gram)
        except RuntimeError as exc:  # singular factor: contradicts full column rank
            raise NumericalError(f"Gram factorization failed: {exc}") from exc

    def gram_solve(self, rhs: np.ndarray) -> np.ndarray:
        """Solve (L_theta^T L_theta) x = rhs for vector or matrix rhs."""
        out = self._lu.solve(np.asarray(rhs, dtype=float))
        if not np.all(np.isfinite(out)):
            raise NumericalError("Gram solve produced non-finite values")
        return out

    def _check_target(self, target: np.ndarray) -> np.ndarray:
        target = np.asarray(target, dtype=float).ravel()
        if target.shape[0] != self.op.num_edges:
            raise ValidationError("target length mismatch")
        return target

    def apply_to_increments(self, zeta: np.ndarray) -> np.ndarray:
        """Recover element values from edge increments: the theta-weighted
        least-squares solution of L x = zeta.  Constant weights cancel, and
        for zeta in the range of L the result is exact for any weights."""
        zeta = self._check_target(zeta)
        return self.gram_solve(self.op.matrix.T @ (zeta / self.weights))

    def apply_to_scaled(self, alpha: np.ndarray) -> np.ndarray:
        """Apply the pseudoinverse of the scaled operator D_theta^{-1/2} L to
        a vector living in the scaled (whitened) increment space."""
        alpha = self._check_target(alpha)
        return self.gram_solve(self.op.matrix.T @ (alpha * self._inv_sqrt_w))

    def scaled_operator_matmul(self, x: np.ndarray) -> np.ndarray:
        """Apply D_theta^{-1/2} L to element values (columns allowed)."""
        y = self.op.matrix @ x
        if y.ndim == 1:
            return y * self._inv_sqrt_w
        return y * self._inv_sqrt_w[:, None]


def apply_pseudoinverse(
    op: IncrementOperator, weights: np.ndarray | None, target: np.ndarray
) -> np.ndarray:
    """Map a vector of edge increments back to element values.

    With weights this is the weighted least-squares inverse, realized through
    a sparse factorization of L^T D_theta^{-1} L; without weights it is the
    plain pseudoinverse.  Factorizes internally; build a
    WeightedPseudoinverse directly to reuse the factorization.
    """
    return WeightedPseudoinverse(op, weights).apply_to_increments(target)


# ---------------------------------------------------------------------------
# Mesh file format
# ---------------------------------------------------------------------------


def save_mesh(path, mesh: Mesh, electrode_arcs: np.ndarray) -> None:
    """Write the mesh interchange file (vertices, triangles, boundary
    segments, electrode arcs; all indices 0-based)."""
    payload = {
        "vertices": np.asarray(mesh.vertices).tolist(),
        "triangles": np.asarray(mesh.triangles).tolist(),
        "boundary_segments": np.asarray(mesh.boundary_segments).tolist(),
        "electrode_arcs": np.asarray(electrode_arcs, dtype=float).tolist(),
    }
    atomic_write_json(path, payload)


def load_mesh(path) -> tuple[Mesh, np.ndarray]:
    """Read and fully validate a mesh interchange file."""
    raw = read_json(path)
    for key in ("vertices", "triangles", "boundary_segments", "electrode_arcs"):
        if key not in raw:
            raise ValidationError(f"mesh file missing field '{key}'")
    vertices = np.asarray(raw["vertices"], dtype=float)
    triangles = np.asarray(raw["triangles"], dtype=np.int64)
    if triangles.size and (triangles.min() < 0 or triangles.max() >= len(vertices)):
        raise ValidationError("triangle indices out of range")
    mesh = Mesh(
        vertices=vertices,
        triangles=triangles,
        boundary_segments=np.asarray(raw["boundary_segments"], dtype=np.int64),
        element_areas=signed_areas(vertices, triangles),
    )
    validate_mesh(mesh)
    arcs = np.asarray(raw["electrode_arcs"], dtype=float)
    layout = ElectrodeLayout(arcs=arcs, contact_impedances=np.ones(len(arcs)))
    _check_arc_endpoints(mesh, layout)
    return mesh, arcs
