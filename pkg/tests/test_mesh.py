"""Mesh generation, subdomain marking and increment-operator tests."""

import json

import numpy as np
import pytest

from eitias.errors import MeshError, NumericalError, ValidationError
from eitias.mesh import (
    ElectrodeLayout,
    Mesh,
    SubdomainMap,
    WeightedPseudoinverse,
    apply_pseudoinverse,
    build_disc_mesh,
    build_increment_operator,
    edge_adjacency,
    load_mesh,
    mark_subdomain,
    mesh_id,
    save_mesh,
    signed_areas,
    validate_mesh,
)


@pytest.fixture(scope="module")
def small():
    layout = ElectrodeLayout.uniform(8, 0.5, 0.1)
    mesh = build_disc_mesh(layout, 200, 1.5)
    mesh, sub = mark_subdomain(mesh, 0.75)
    lop = build_increment_operator(mesh, sub)
    return layout, mesh, sub, lop


@pytest.fixture(scope="module")
def paper_scale():
    layout = ElectrodeLayout.uniform(32, 0.45, 1e-6)
    mesh = build_disc_mesh(layout, 5800, 3.0)
    mesh, sub = mark_subdomain(mesh, 0.9)
    lop = build_increment_operator(mesh, sub)
    return layout, mesh, sub, lop


class TestElectrodeLayout:
    def test_uniform_filling_fraction(self):
        layout = ElectrodeLayout.uniform(32, 0.45)
        assert layout.count == 32
        assert layout.filling_fraction == pytest.approx(0.45, abs=1e-12)

    def test_overlapping_arcs_rejected(self):
        arcs = np.array([[0.0, 1.0], [0.9, 2.0]])
        with pytest.raises(ValidationError):
            ElectrodeLayout(arcs=arcs, contact_impedances=np.ones(2))

    def test_nonpositive_impedance_rejected(self):
        arcs = np.array([[0.0, 0.5], [1.0, 1.5]])
        with pytest.raises(ValidationError):
            ElectrodeLayout(arcs=arcs, contact_impedances=np.array([1.0, 0.0]))


class TestBuildDiscMesh:
    def test_paper_scale_counts(self, paper_scale):
        _, mesh, sub, lop = paper_scale
        assert 5816 * 0.9 <= mesh.num_triangles <= 5816 * 1.1
        assert 1940 * 0.9 <= sub.n <= 1940 * 1.1
        assert 2970 * 0.9 <= lop.num_edges <= 2970 * 1.1

    def test_electrode_endpoints_are_boundary_vertices(self, paper_scale):
        layout, mesh, _, _ = paper_scale
        bnd = np.unique(mesh.boundary_segments)
        ang = np.mod(np.arctan2(mesh.vertices[bnd, 1], mesh.vertices[bnd, 0]), 2 * np.pi)
        endpoints = np.concatenate([layout.arcs[:, 0], layout.arcs[:, 1]]) % (2 * np.pi)
        for a in endpoints:
            d = np.abs(np.mod(ang - a + np.pi, 2 * np.pi) - np.pi)
            assert d.min() < 1e-9

    def test_small_mesh_area_budget(self):
        layout = ElectrodeLayout.uniform(4, 0.5, 0.1)
        mesh = build_disc_mesh(layout, 64, 1.0)
        total = mesh.element_areas.sum()
        assert 0.9 * np.pi < total < np.pi

    def test_manifold_edges_exhaustive(self, small):
        # every interior edge shared by exactly 2 triangles, boundary by 1
        _, mesh, _, _ = small
        boundary = {tuple(sorted(map(int, s))) for s in mesh.boundary_segments}
        for edge, elems in edge_adjacency(mesh.triangles).items():
            assert len(elems) == (1 if edge in boundary else 2)

    def test_orientation_positive(self, small):
        _, mesh, _, _ = small
        assert np.all(signed_areas(mesh.vertices, mesh.triangles) > 0)

    def test_deterministic(self):
        layout = ElectrodeLayout.uniform(8, 0.4, 0.1)
        a = build_disc_mesh(layout, 300, 2.0)
        b = build_disc_mesh(layout, 300, 2.0)
        assert mesh_id(a) == mesh_id(b)

    def test_grading_refines_boundary(self):
        layout = ElectrodeLayout.uniform(8, 0.4, 0.1)
        mesh = build_disc_mesh(layout, 2000, 3.0)
        r = np.linalg.norm(mesh.centroids(), axis=1)
        inner = mesh.element_areas[r < 0.5].mean()
        outer = mesh.element_areas[r > 0.95].mean()
        assert inner > 3 * outer

    def test_rejects_bad_arguments(self):
        layout = ElectrodeLayout.uniform(4, 0.5, 0.1)
        with pytest.raises(ValidationError):
            build_disc_mesh(layout, 32, 1.0)
        with pytest.raises(ValidationError):
            build_disc_mesh(layout, 100, 0.5)


class TestMarkSubdomain:
    def test_matches_brute_force_membership(self, small):
        _, mesh, sub, _ = small
        dist = np.linalg.norm(mesh.vertices, axis=1)
        for t in range(mesh.num_triangles):
            inside = bool(np.all(dist[mesh.triangles[t]] <= 0.75 + 1e-9))
            assert inside == (t < sub.n)

    def test_reordering_is_permutation(self):
        layout = ElectrodeLayout.uniform(4, 0.5, 0.1)
        mesh = build_disc_mesh(layout, 150, 1.0)
        reordered, _ = mark_subdomain(mesh, 0.6)
        before = {tuple(sorted(map(int, t))) for t in mesh.triangles}
        after = {tuple(sorted(map(int, t))) for t in reordered.triangles}
        assert before == after
        assert reordered.element_areas.sum() == pytest.approx(mesh.element_areas.sum())

    def test_whole_domain_radius(self):
        layout = ElectrodeLayout.uniform(4, 0.5, 0.1)
        mesh = build_disc_mesh(layout, 150, 1.0)
        _, sub = mark_subdomain(mesh, 1.0)
        assert sub.n == mesh.num_triangles

    def test_empty_subdomain_is_error(self):
        layout = ElectrodeLayout.uniform(4, 0.5, 0.1)
        mesh = build_disc_mesh(layout, 64, 1.0)
        with pytest.raises(MeshError):
            mark_subdomain(mesh, 1e-6)


class TestIncrementOperator:
    def test_row_structure(self, small):
        _, _, sub, lop = small
        m = lop.matrix.toarray()
        assert not np.any(np.all(m == 0, axis=1))  # no zero rows
        nnz_per_row = (m != 0).sum(axis=1)
        assert np.all(nnz_per_row <= 2)
        sums = m.sum(axis=1)
        assert set(np.unique(sums)).issubset({-1.0, 0.0, 1.0})

    def test_full_column_rank_svd_oracle(self, small):
        _, _, sub, lop = small
        sv = np.linalg.svd(lop.matrix.toarray(), compute_uv=False)
        assert sv.min() > 1e-8
        assert (sv > 1e-10).sum() == sub.n

    def test_null_space_trivial(self, small):
        _, _, _, lop = small
        x, *_ = np.linalg.lstsq(lop.matrix.toarray(), np.zeros(lop.num_edges), rcond=None)
        assert np.linalg.norm(x) <= 1e-10

    def test_single_triangle_subdomain(self):
        layout = ElectrodeLayout.uniform(4, 0.5, 0.1)
        mesh = build_disc_mesh(layout, 150, 1.0)
        # shrink the radius until exactly the innermost fan triangles remain,
        # then restrict to a one-element subdomain by hand
        reordered, sub = mark_subdomain(mesh, 0.35)
        one = SubdomainMap(d_indices=np.arange(1), n=1, radius=None)
        lop = build_increment_operator(reordered, one)
        m = lop.matrix.toarray()
        assert np.all((m != 0).sum(axis=1) == 1)
        assert set(np.unique(m[m != 0])) == {1.0}


class TestApplyPseudoinverse:
    def test_left_inverse_identity(self, small):
        _, _, sub, lop = small
        rng = np.random.default_rng(1)
        xi = rng.standard_normal(sub.n)
        got = apply_pseudoinverse(lop, None, lop.matrix @ xi)
        assert np.linalg.norm(got - xi) <= 1e-10 * max(1.0, np.linalg.norm(xi))

    def test_constant_weights_match_unweighted(self, small):
        _, _, _, lop = small
        rng = np.random.default_rng(2)
        target = rng.standard_normal(lop.num_edges)
        plain = apply_pseudoinverse(lop, None, target)
        scaled = apply_pseudoinverse(lop, np.full(lop.num_edges, 3.7), target)
        assert np.allclose(plain, scaled, rtol=0, atol=1e-11 * np.abs(plain).max())

    def test_matches_dense_svd_pseudoinverse(self, small):
        # weighted least squares of L x = target, computed densely via the SVD
        # pseudoinverse of the scaled operator
        _, _, _, lop = small
        rng = np.random.default_rng(3)
        theta = rng.uniform(0.2, 5.0, lop.num_edges)
        target = rng.standard_normal(lop.num_edges)
        sw = np.sqrt(theta)
        dense = np.linalg.pinv(lop.matrix.toarray() / sw[:, None]) @ (target / sw)
        got = apply_pseudoinverse(lop, theta, target)
        assert np.linalg.norm(got - dense) <= 1e-8 * max(1.0, np.linalg.norm(dense))

    def test_unweighted_matches_dense_svd(self, small):
        _, _, _, lop = small
        rng = np.random.default_rng(30)
        target = rng.standard_normal(lop.num_edges)
        dense = np.linalg.pinv(lop.matrix.toarray()) @ target
        got = apply_pseudoinverse(lop, None, target)
        assert np.linalg.norm(got - dense) <= 1e-8 * max(1.0, np.linalg.norm(dense))

    def test_weighted_roundtrips(self, small):
        # identity both for raw increments and for the scaled-space variant
        _, _, sub, lop = small
        rng = np.random.default_rng(4)
        for _ in range(5):
            theta = rng.uniform(1e-3, 1e3, lop.num_edges)
            xi = rng.standard_normal(sub.n)
            pinv = WeightedPseudoinverse(lop, theta)
            got = pinv.apply_to_increments(lop.matrix @ xi)
            assert np.linalg.norm(got - xi) <= 1e-9 * max(1.0, np.linalg.norm(xi))
            got2 = pinv.apply_to_scaled(pinv.scaled_operator_matmul(xi))
            assert np.linalg.norm(got2 - xi) <= 1e-9 * max(1.0, np.linalg.norm(xi))

    def test_nonpositive_weights_rejected(self, small):
        _, _, _, lop = small
        bad = np.ones(lop.num_edges)
        bad[0] = 0.0
        with pytest.raises(ValidationError):
            apply_pseudoinverse(lop, bad, np.zeros(lop.num_edges))


class TestMeshFile:
    def test_roundtrip_preserves_identity(self, small, tmp_path):
        layout, mesh, _, _ = small
        path = tmp_path / "mesh.json"
        save_mesh(path, mesh, layout.arcs)
        loaded, arcs = load_mesh(path)
        assert mesh_id(loaded) == mesh_id(mesh)
        assert np.allclose(arcs, layout.arcs)

    def test_reader_validates_invariants(self, small, tmp_path):
        layout, mesh, _, _ = small
        path = tmp_path / "mesh.json"
        save_mesh(path, mesh, layout.arcs)
        raw = json.loads(path.read_text())
        raw["triangles"][0] = raw["triangles"][1]  # duplicate element
        path.write_text(json.dumps(raw))
        with pytest.raises(MeshError):
            load_mesh(path)

    def test_reader_rejects_missing_field(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text(json.dumps({"vertices": []}))
        with pytest.raises(ValidationError):
            load_mesh(path)
