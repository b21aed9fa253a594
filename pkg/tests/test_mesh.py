"""Mesh module: metric queries, curvature, sampling, transforms, distances, I/O."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
import shapes
from bonefit import mesh as M


def random_rigid(rng, max_angle=np.pi, max_trans=50.0):
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    r = M.rotation_from_axis_angle(axis, rng.uniform(-max_angle, max_angle))
    return M.RigidTransform(r, rng.uniform(-max_trans, max_trans, size=3))


# ---------------------------------------------------------------------------
# transforms


class TestRigidTransform:
    def test_identity_is_noop(self):
        m = shapes.tetrahedron()
        out = M.apply_transform(M.RigidTransform.identity(), m)
        np.testing.assert_array_equal(out.vertices, m.vertices)
        np.testing.assert_array_equal(out.vertex_normals, m.vertex_normals)

    def test_compose_with_inverse_is_identity(self):
        rng = np.random.default_rng(7)
        for _ in range(20):
            t = random_rigid(rng)
            round_trip = t.compose(t.invert())
            assert np.allclose(round_trip.rotation, np.eye(3), atol=1e-9)
            assert np.allclose(round_trip.translation, 0.0, atol=1e-9)

    def test_distances_preserved(self):
        rng = np.random.default_rng(11)
        pts = rng.uniform(-10, 10, size=(40, 3))
        ref = np.linalg.norm(pts[None] - pts[:, None], axis=2)
        for _ in range(10):
            moved = random_rigid(rng).apply_points(pts)
            got = np.linalg.norm(moved[None] - moved[:, None], axis=2)
            assert np.allclose(got, ref, atol=1e-9)

    def test_rejects_improper_rotation(self):
        with pytest.raises(ValueError):
            M.RigidTransform(np.diag([1.0, 1.0, -1.0]), np.zeros(3))
        with pytest.raises(ValueError):
            M.RigidTransform(np.eye(3) * 2.0, np.zeros(3))

    def test_flat_round_trip(self):
        rng = np.random.default_rng(3)
        t = random_rigid(rng)
        back = M.RigidTransform.from_flat(t.to_flat())
        assert np.allclose(back.rotation, t.rotation, atol=1e-15)
        assert np.allclose(back.translation, t.translation, atol=1e-15)

    def test_axis_angle_about_center_fixes_center(self):
        c = np.array([3.0, -2.0, 5.0])
        t = M.RigidTransform.from_axis_angle([0, 0, 1], 0.7, center=c)
        assert np.allclose(t.apply_points(c[None]), c, atol=1e-12)
        assert np.isclose(t.angle_deg(), np.degrees(0.7))

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=25, deadline=None)
    def test_compose_matches_sequential_application(self, seed):
        rng = np.random.default_rng(seed)
        a, b = random_rigid(rng), random_rigid(rng)
        pts = rng.uniform(-5, 5, size=(6, 3))
        assert np.allclose(
            a.compose(b).apply_points(pts), a.apply_points(b.apply_points(pts)), atol=1e-9
        )


class TestOrientedPoint:
    def test_rejects_non_unit_normal(self):
        with pytest.raises(ValueError):
            M.OrientedPoint([0, 0, 0], [0, 0, 2])

    def test_holds_values(self):
        p = M.OrientedPoint([1, 2, 3], [1, 0, 0])
        assert np.allclose(p.position, [1, 2, 3])


# ---------------------------------------------------------------------------
# resolution and connectivity


class TestResolution:
    def test_unit_tetrahedron(self):
        assert np.isclose(M.mesh_resolution(shapes.tetrahedron(1.0)), 1.0, atol=1e-12)

    def test_cube_with_diagonals(self):
        got = M.mesh_resolution(shapes.unit_cube(1))
        expected = (12 * 1.0 + 6 * np.sqrt(2.0)) / 18.0
        assert np.isclose(got, expected, atol=1e-12)
        brute = oracles.edge_lengths_brute(
            shapes.unit_cube(1).vertices, shapes.unit_cube(1).triangles
        ).mean()
        assert np.isclose(got, brute, atol=1e-12)

    def test_scaling_homogeneity(self):
        m = shapes.icosphere(1.0, 2)
        doubled = M.TriangleMesh(m.vertices * 2.0, m.triangles)
        assert np.isclose(M.mesh_resolution(doubled), 2.0 * M.mesh_resolution(m))

    def test_empty_mesh_raises(self):
        m = M.TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=int))
        with pytest.raises(M.MeshError):
            M.mesh_resolution(m)


class TestConnectivity:
    def test_closed_meshes_are_watertight(self):
        for m in (shapes.tetrahedron(), shapes.unit_cube(2), shapes.icosphere(1, 2), shapes.capped_cylinder()):
            assert M.boundary_edge_count(m) == 0
            assert M.is_watertight(m)
            assert M.euler_characteristic(m) == 2

    def test_open_grid_has_boundary(self):
        g = shapes.planar_grid(4)
        assert M.boundary_edge_count(g) == 16
        mask = M.boundary_vertex_mask(g)
        assert mask.sum() == 16

    def test_adjacency_matches_edges(self):
        m = shapes.icosphere(1.0, 1)
        indptr, indices = M.vertex_adjacency(m)
        edges = {tuple(e) for e in M.unique_edges(m)}
        for v in range(len(m.vertices)):
            for w in indices[indptr[v] : indptr[v + 1]]:
                assert (min(v, w), max(v, w)) in edges
        assert indptr[-1] == 2 * len(edges)


# ---------------------------------------------------------------------------
# metric queries


class TestMetrics:
    def test_unit_cube_volume(self):
        assert np.isclose(M.enclosed_volume(shapes.unit_cube(1)), 1.0, atol=1e-12)

    def test_sphere_volume_within_2_percent(self):
        m = shapes.icosphere(10.0, 4)
        assert abs(M.enclosed_volume(m) / 4188.79 - 1.0) < 0.02

    def test_open_mesh_volume_raises(self):
        with pytest.raises(M.MeshError):
            M.enclosed_volume(shapes.planar_grid(3))

    def test_area_matches_brute(self):
        m = shapes.capped_cylinder(5.0, 20.0)
        assert np.isclose(
            M.surface_area(m), oracles.area_brute(m.vertices, m.triangles), atol=1e-9
        )

    def test_area_subset(self):
        m = shapes.tetrahedron()
        areas = M.triangle_areas(m)
        assert np.isclose(M.surface_area(m, [0, 2]), areas[0] + areas[2])

    def test_cylinder_principal_axis_is_z(self):
        axis = M.principal_axis(shapes.capped_cylinder(5.0, 40.0))
        assert np.allclose(axis, [0, 0, 1], atol=1e-6)

    def test_principal_axis_sign_normalized(self):
        m = shapes.capped_cylinder(5.0, 40.0)
        flipped = M.TriangleMesh(m.vertices * np.array([1, 1, -1.0]), m.triangles[:, [0, 2, 1]])
        assert np.allclose(M.principal_axis(flipped), [0, 0, 1], atol=1e-6)

    def test_metrics_rigid_invariant(self):
        rng = np.random.default_rng(23)
        m = shapes.capped_cylinder(4.0, 15.0)
        t = random_rigid(rng)
        moved = M.apply_transform(t, m)
        assert np.isclose(M.enclosed_volume(moved), M.enclosed_volume(m), rtol=1e-9)
        assert np.isclose(M.surface_area(moved), M.surface_area(m), rtol=1e-9)
        assert np.isclose(M.mesh_resolution(moved), M.mesh_resolution(m), rtol=1e-9)
        # centroid and principal axis transform covariantly
        assert np.allclose(
            M.area_centroid(moved), t.apply_points(M.area_centroid(m)[None])[0], atol=1e-9
        )
        moved_axis = M.principal_axis(moved)
        ref = t.apply_directions(M.principal_axis(m)[None])[0]
        assert min(np.linalg.norm(moved_axis - ref), np.linalg.norm(moved_axis + ref)) < 1e-6

    def test_centroid_of_symmetric_solid(self):
        m = shapes.icosphere(3.0, 3, center=(1.0, 2.0, 3.0))
        assert np.allclose(M.area_centroid(m), [1, 2, 3], atol=1e-9)


# ---------------------------------------------------------------------------
# curvature


class TestCurvature:
    def test_sphere_curvature_one_over_r(self):
        m = shapes.icosphere(10.0, 3)
        h = M.vertex_mean_curvature(m)
        assert np.all(np.abs(h - 0.1) < 0.1 * 0.1)

    def test_planar_interior_zero(self):
        g = shapes.planar_grid(8)
        h = M.vertex_mean_curvature(g)
        interior = ~M.boundary_vertex_mask(g)
        assert np.all(np.abs(h[interior]) < 1e-6)

    def test_cylinder_side_half_over_r(self):
        m = shapes.capped_cylinder(5.0, 30.0, n_theta=96, n_z=60)
        h = M.vertex_mean_curvature(m)
        zs = m.vertices[:, 2]
        rad = np.linalg.norm(m.vertices[:, :2], axis=1)
        side = (np.abs(rad - 5.0) < 1e-6) & (zs > 6.0) & (zs < 24.0)
        assert side.sum() > 100
        assert np.all(np.abs(h[side] - 0.1) < 0.15 * 0.1)

    def test_sign_positive_on_convex(self):
        h = M.vertex_mean_curvature(shapes.icosphere(2.0, 2))
        assert np.all(h > 0)

    def test_smoothing_preserves_constant_field(self):
        m = shapes.icosphere(10.0, 2)
        h0 = M.vertex_mean_curvature(m)
        h2 = M.vertex_mean_curvature(m, smoothing_rounds=3)
        assert np.allclose(h2.mean(), h0.mean(), rtol=0.02)
        assert h2.std() <= h0.std() + 1e-12

    def test_isolated_vertex_raises(self):
        m = M.TriangleMesh(np.vstack([np.eye(3), [5, 5, 5]]), [[0, 1, 2]])
        with pytest.raises(M.MeshError):
            M.mean_curvature(m, 3)


# ---------------------------------------------------------------------------
# sampling


class TestUniformSubsample:
    def test_spacing_larger_than_diameter_gives_one(self):
        m = shapes.tetrahedron(1.0)
        assert len(M.uniform_subsample(m, 10.0)) == 1

    def test_zero_spacing_rejected_tiny_keeps_all(self):
        m = shapes.tetrahedron(1.0)
        with pytest.raises(ValueError):
            M.uniform_subsample(m, 0.0)
        assert len(M.uniform_subsample(m, 1e-6)) == len(m.vertices)

    def test_grid_exhaustive_pairwise(self):
        g = shapes.planar_grid(10, 1.0)
        ids = M.uniform_subsample(g, 1.5, seed=5)
        pts = g.vertices[ids]
        assert oracles.pairwise_min_distance(pts) > 1.5

    def test_maximality(self):
        g = shapes.planar_grid(10, 1.0)
        ids = M.uniform_subsample(g, 1.5, seed=5)
        kept = g.vertices[ids]
        rest = np.setdiff1d(np.arange(len(g.vertices)), ids)
        for r in rest:
            d = np.linalg.norm(kept - g.vertices[r], axis=1).min()
            assert d <= 1.5

    def test_deterministic_per_seed(self):
        m = shapes.icosphere(5.0, 3)
        a = M.uniform_subsample(m, 1.0, seed=9)
        b = M.uniform_subsample(m, 1.0, seed=9)
        np.testing.assert_array_equal(a, b)


# ---------------------------------------------------------------------------
# mirroring


class TestMirror:
    def test_point_reflection(self):
        m = M.TriangleMesh([[1, 0, 0], [1, 1, 0], [1, 0, 1]], [[0, 1, 2]])
        out = M.mirror(m, [0, 0, 0], [1, 0, 0])
        assert np.allclose(out.vertices[0], [-1, 0, 0])

    def test_double_mirror_identity(self):
        m = shapes.icosphere(2.0, 2)
        out = M.mirror(M.mirror(m, [1, 2, 3], [0, 1, 0]), [1, 2, 3], [0, 1, 0])
        assert np.allclose(out.vertices, m.vertices, atol=1e-12)
        np.testing.assert_array_equal(out.triangles, m.triangles)

    def test_volume_preserved_and_outward(self):
        m = shapes.capped_cylinder(3.0, 10.0)
        out = M.mirror(m, [0, 0, 0], [1 / np.sqrt(2), 1 / np.sqrt(2), 0])
        assert np.isclose(M.enclosed_volume(out), M.enclosed_volume(m), atol=1e-9)
        assert oracles.signed_volume_brute(out.vertices, out.triangles) > 0

    def test_non_unit_normal_rejected(self):
        with pytest.raises(ValueError):
            M.mirror(shapes.tetrahedron(), [0, 0, 0], [0, 0, 3])


# ---------------------------------------------------------------------------
# point-to-surface distance


class TestPointToPlaneError:
    def test_self_distance_zero(self):
        m = shapes.icosphere(4.0, 2)
        d, mean = M.point_to_plane_error(m, m)
        assert mean == 0.0
        assert np.all(d == 0.0)

    def test_offset_planes(self):
        a = shapes.planar_grid(6, 1.0, z=0.0)
        b = shapes.planar_grid(6, 1.0, z=0.3)
        d, mean = M.point_to_plane_error(b, a)
        assert np.allclose(d, 0.3, atol=1e-12)
        assert np.isclose(mean, 0.3, atol=1e-12)

    def test_round_trip_transform_zero(self):
        rng = np.random.default_rng(31)
        m = shapes.capped_cylinder(4.0, 12.0)
        t = random_rigid(rng)
        back = M.apply_transform(t.invert(), M.apply_transform(t, m))
        _, mean = M.point_to_plane_error(back, m)
        assert mean < 1e-9

    def test_matches_brute_force_on_random_queries(self):
        rng = np.random.default_rng(17)
        m = shapes.tetrahedron(2.0)
        pts = rng.uniform(-2, 2, size=(25, 3))
        d, _ = M.point_to_plane_error(pts, m)
        for p, got in zip(pts, d):
            brute = min(
                oracles.point_triangle_distance_brute(
                    p, *m.vertices[tri], samples=120
                )
                for tri in m.triangles
            )
            assert abs(got - brute) < 2e-2
            assert got <= brute + 1e-12


# ---------------------------------------------------------------------------
# sub-meshes and I/O


class TestSubmesh:
    def test_submesh_keeps_geometry(self):
        m = shapes.unit_cube(2)
        ids = np.arange(8)
        sub, vmap = M.submesh(m, ids)
        assert len(sub.triangles) == 8
        np.testing.assert_allclose(sub.vertices, m.vertices[vmap])

    def test_submesh_areas(self):
        m = shapes.tetrahedron()
        sub, _ = M.submesh(m, [1])
        assert np.isclose(M.surface_area(sub), M.triangle_areas(m)[1])


class TestPlyIO:
    def test_round_trip_exact(self, tmp_path):
        m = shapes.icosphere(3.0, 2)
        p = tmp_path / "s.ply"
        M.write_ply(p, m)
        back = M.read_ply(p)
        np.testing.assert_array_equal(back.vertices, m.vertices)
        np.testing.assert_array_equal(back.triangles, m.triangles)
        np.testing.assert_array_equal(back.vertex_normals, m.vertex_normals)

    def test_degenerate_faces_dropped(self, tmp_path):
        p = tmp_path / "d.ply"
        content = (
            "ply\nformat ascii 1.0\nelement vertex 4\n"
            "property double x\nproperty double y\nproperty double z\n"
            "element face 2\nproperty list uchar int vertex_indices\nend_header\n"
            "0 0 0\n1 0 0\n0 1 0\n0 0 0\n"
            "3 0 1 2\n3 0 1 3\n"
        )
        p.write_text(content)
        m = M.read_ply(p)
        assert len(m.triangles) == 1

    def test_rejects_binary(self, tmp_path):
        p = tmp_path / "b.ply"
        p.write_text("ply\nformat binary_little_endian 1.0\nend_header\n")
        with pytest.raises(M.MeshError):
            M.read_ply(p)

    def test_write_is_deterministic(self, tmp_path):
        m = shapes.capped_cylinder(2.0, 5.0)
        a, b = tmp_path / "a.ply", tmp_path / "b.ply"
        M.write_ply(a, m)
        M.write_ply(b, m)
        assert a.read_bytes() == b.read_bytes()
