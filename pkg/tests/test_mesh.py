import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lfdiff.errors import InvalidParameterError, PointOutsideDomainError
from lfdiff.mesh import UNIT_AREA_RADIUS, Mesh, build_disk_mesh, interpolation_matrix, locate_point, locate_points


def _check_invariants(mesh):
    assert np.all(mesh.signed_areas > 0)
    edges, counts = mesh.edges
    assert set(np.unique(counts)) <= {1, 2}
    # every boundary edge joins two boundary-flagged nodes
    bnd = set(mesh.boundary_nodes.tolist())
    assert all(a in bnd and b in bnd for a, b in edges[counts == 1])
    r = np.linalg.norm(mesh.nodes[mesh.boundary_nodes], axis=1)
    assert np.all(np.abs(r - mesh.radius) <= mesh.h_max**2)


class TestBuildDiskMesh:
    def test_full_scale_resolution_node_count(self, fine_mesh):
        assert 1500 <= fine_mesh.n_nodes <= 2500
        _check_invariants(fine_mesh)

    def test_unit_area(self, fine_mesh):
        np.testing.assert_allclose(fine_mesh.area, 1.0, atol=0.01)

    def test_coarse_floor(self):
        mesh = build_disk_mesh(1.0, 0.9)
        assert mesh.n_nodes >= 4
        _check_invariants(mesh)

    def test_h_max_is_measured_longest_edge(self, small_mesh):
        e, _ = small_mesh.edges
        longest = np.max(np.linalg.norm(small_mesh.nodes[e[:, 0]] - small_mesh.nodes[e[:, 1]], axis=1))
        assert small_mesh.h_max == pytest.approx(longest)
        assert small_mesh.h_max <= 0.1

    @pytest.mark.parametrize("radius,h", [(1.0, 1.0), (1.0, 1.5), (0.0, 0.1), (1.0, 0.0)])
    def test_invalid_parameters(self, radius, h):
        with pytest.raises(InvalidParameterError):
            build_disk_mesh(radius, h)

    def test_area_preserving_scaling_is_exact(self, small_mesh):
        assert small_mesh.area == pytest.approx(1.0, abs=1e-13)

    def test_area_converges_quadratically(self):
        # inscribed polygons: the circular-segment deficit is O(h^2)
        hs = np.array([0.2, 0.1, 0.05])
        meshes = [build_disk_mesh(h_max=h, preserve_area=False) for h in hs]
        defect = np.array([abs(m.area - 1.0) for m in meshes])
        meshes_h = np.array([m.h_max for m in meshes])
        C = np.max(defect / meshes_h**2)
        # a single constant bounds all three levels and the defect drops about 4x per halving
        assert np.all(defect <= C * meshes_h**2)
        assert defect[0] / defect[1] > 3 and defect[1] / defect[2] > 3

    def test_node_count_scales_inverse_square(self):
        n1 = build_disk_mesh(h_max=0.1).n_nodes
        n2 = build_disk_mesh(h_max=0.05).n_nodes
        assert 3.0 < n2 / n1 < 5.0

    def test_deterministic(self):
        a, b = build_disk_mesh(h_max=0.1), build_disk_mesh(h_max=0.1)
        np.testing.assert_array_equal(a.nodes, b.nodes)
        np.testing.assert_array_equal(a.triangles, b.triangles)

    def test_json_round_trip(self, small_mesh, tmp_path):
        small_mesh.save(tmp_path / "m.json")
        back = Mesh.load(tmp_path / "m.json")
        np.testing.assert_array_equal(back.nodes, small_mesh.nodes)
        np.testing.assert_array_equal(back.triangles, small_mesh.triangles)
        np.testing.assert_array_equal(back.boundary_nodes, small_mesh.boundary_nodes)
        assert back.h_max == small_mesh.h_max

    def test_immutable(self, small_mesh):
        with pytest.raises(ValueError):
            small_mesh.nodes[0, 0] = 1.0


class TestLocatePoint:
    def test_centroid_of_triangle_zero(self, small_mesh):
        c = small_mesh.nodes[small_mesh.triangles[0]].mean(axis=0)
        loc = locate_point(small_mesh, c)
        assert loc.triangle_index == 0
        np.testing.assert_allclose(loc.barycentric, [1 / 3, 1 / 3, 1 / 3], atol=1e-12)

    def test_node_has_unit_weight(self, small_mesh):
        v = 17
        loc = locate_point(small_mesh, small_mesh.nodes[v])
        tri = small_mesh.triangles[loc.triangle_index]
        assert v in tri
        assert loc.barycentric[list(tri).index(v)] == pytest.approx(1.0, abs=1e-12)

    @settings(max_examples=50, deadline=None)
    @given(r=st.floats(0.0, 0.97), phi=st.floats(0.0, 2 * np.pi))
    def test_reconstruction(self, small_mesh, r, phi):
        x = UNIT_AREA_RADIUS * r * np.array([np.cos(phi), np.sin(phi)])
        loc = locate_point(small_mesh, x)
        w = loc.barycentric
        assert np.all(w >= 0) and np.all(w <= 1)
        assert abs(w.sum() - 1.0) <= 1e-12
        back = w @ small_mesh.nodes[small_mesh.triangles[loc.triangle_index]]
        np.testing.assert_allclose(back, x, atol=1e-10)

    def test_all_nodes_and_centroids_locate(self, small_mesh):
        cents = small_mesh.nodes[small_mesh.triangles].mean(axis=1)
        tri, _, _ = locate_points(small_mesh, np.vstack([small_mesh.nodes, cents]))
        assert np.all(tri >= 0)

    def test_outside_raises_with_index(self, small_mesh):
        pts = np.array([[0.0, 0.0], [0.1, 0.1], [2.0, 0.0]])
        with pytest.raises(PointOutsideDomainError) as info:
            locate_points(small_mesh, pts)
        assert info.value.index == 2

    def test_gap_point_snaps_to_boundary(self, small_mesh):
        # on the analytic circle between two boundary nodes: outside the polygon
        b = small_mesh.nodes[small_mesh.boundary_nodes[:2]]
        mid = b.mean(axis=0)
        x = mid / np.linalg.norm(mid) * small_mesh.radius
        with pytest.raises(PointOutsideDomainError):
            locate_points(small_mesh, x[None])
        tri, bary, n = locate_points(small_mesh, x[None], snap=True)
        assert n == 1
        assert abs(bary.sum() - 1.0) < 1e-12

    def test_interpolation_reproduces_linear_field(self, small_mesh, rng):
        u = 2.0 * small_mesh.nodes[:, 0] - 3.0 * small_mesh.nodes[:, 1] + 0.5
        pts = rng.uniform(-0.35, 0.35, size=(200, 2))
        P, _ = interpolation_matrix(small_mesh, pts)
        np.testing.assert_allclose(P @ u, 2.0 * pts[:, 0] - 3.0 * pts[:, 1] + 0.5, atol=1e-12)
