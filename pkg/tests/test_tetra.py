"""Grid construction, marching tets geometry oracles, Eikonal values."""

import numpy as np
import pytest

from artimesh import tape
from artimesh.gradcheck import finite_diff_check
from artimesh.tape import Tensor
from artimesh.tetra import (EmptyMeshError, build_grid, eikonal_reg,
                            marching_tets, sample_eikonal_points,
                            signed_volume, surface_samples,
                            validate_watertight, vertex_normals)


class TestGrid:
    def test_resolution_2_counts(self):
        grid = build_grid(2)
        assert grid.n_verts == 27  # (r+1)^3
        assert grid.n_tets == 48   # 8 cubes x 6 tets

    def test_all_volumes_positive(self):
        grid = build_grid(3)
        assert (grid.tet_volumes() > 0).all()

    def test_vertex_count_formula(self):
        for r in (2, 4, 7):
            assert build_grid(r).n_verts == (r + 1) ** 3

    def test_grid_covers_cube(self):
        grid = build_grid(4)
        assert grid.verts.min() == -1.0 and grid.verts.max() == 1.0
        assert grid.tet_volumes().sum() == pytest.approx(8.0)

    def test_resolution_below_2_rejected(self):
        with pytest.raises(ValueError):
            build_grid(1)


class TestMarchingTets:
    def test_sphere_oracle(self):
        grid = build_grid(48)
        vals = np.linalg.norm(grid.verts, axis=1) - 0.5
        mesh = marching_tets(grid, vals)
        r = np.linalg.norm(mesh.verts.numpy(), axis=1)
        assert np.abs(r - 0.5).max() < 2.0 / 48
        rep = validate_watertight(mesh)
        assert rep.ok, rep.messages
        assert rep.euler_characteristic == 2
        assert signed_volume(mesh) == pytest.approx(4 / 3 * np.pi * 0.125, rel=0.02)

    def test_plane_exact(self):
        grid = build_grid(48)
        mesh = marching_tets(grid, grid.verts[:, 2] - 0.25)
        assert np.abs(mesh.verts.numpy()[:, 2] - 0.25).max() < 1e-6

    def test_empty_mesh_error(self):
        grid = build_grid(4)
        with pytest.raises(EmptyMeshError):
            marching_tets(grid, np.ones(grid.n_verts))

    def test_deleted_face_fails_validation(self):
        grid = build_grid(8)
        mesh = marching_tets(grid, np.linalg.norm(grid.verts, axis=1) - 0.5)
        mesh.faces = mesh.faces[:-1]
        assert not validate_watertight(mesh).ok

    def test_deterministic(self):
        grid = build_grid(12)
        vals = np.linalg.norm(grid.verts - 0.1, axis=1) - 0.45
        m1 = marching_tets(grid, vals)
        m2 = marching_tets(grid, vals.copy())
        np.testing.assert_array_equal(m1.verts.numpy(), m2.verts.numpy())
        np.testing.assert_array_equal(m1.faces, m2.faces)

    def test_canon_equals_position_at_extraction(self):
        grid = build_grid(8)
        mesh = marching_tets(grid, np.linalg.norm(grid.verts, axis=1) - 0.5)
        assert mesh.canon is mesh.verts

    def test_vertex_gradients_match_fd(self):
        grid = build_grid(6)
        rng = np.random.default_rng(0)
        vals = (np.linalg.norm(grid.verts - np.array([0.05, 0.02, -0.03]), axis=1)
                - 0.55 + rng.normal(scale=0.01, size=grid.n_verts))
        w = np.arange(1, 100).astype(float)

        def f(v):
            m = marching_tets(grid, v)
            proj = Tensor(np.resize(w, (m.n_verts, 3)) * 0.01)
            return tape.tsum(tape.mul(m.verts, proj))

        rep = finite_diff_check(f, [Tensor(vals)], tol=1e-3,
                                name="mt-vertex", max_coords=80)
        assert rep.passed, str(rep)

    def test_vertex_normals_unit_and_outward(self):
        grid = build_grid(16)
        mesh = marching_tets(grid, np.linalg.norm(grid.verts, axis=1) - 0.5)
        n = vertex_normals(mesh.verts, mesh.faces).numpy()
        np.testing.assert_allclose(np.linalg.norm(n, axis=1), 1.0, atol=1e-9)
        v = mesh.verts.numpy()
        # outward: normals roughly parallel to radial direction on a sphere
        dots = (n * v / np.linalg.norm(v, axis=1, keepdims=True)).sum(1)
        assert dots.min() > 0.5


class TestEikonal:
    def test_sample_count_and_determinism(self):
        p1 = sample_eikonal_points(257, seed=5)
        p2 = sample_eikonal_points(257, seed=5)
        assert p1.shape == (257, 3)
        np.testing.assert_array_equal(p1, p2)
        assert np.abs(p1).max() <= 1.0

    def test_sample_coverage_mean(self):
        pts = sample_eikonal_points(20000, seed=1)
        # mean of U(-1,1) has sigma = 1/sqrt(3n); allow 3 sigma
        assert np.abs(pts.mean(axis=0)).max() < 3.0 / np.sqrt(3 * 20000)

    def test_plane_exact_zero(self):
        field = _AnalyticPlane(scale=1.0)
        pts = sample_eikonal_points(100, seed=2)
        assert eikonal_reg(field, pts).item() == 0.0

    def test_double_slope_exact_one(self):
        field = _AnalyticPlane(scale=2.0)
        pts = sample_eikonal_points(100, seed=2)
        assert eikonal_reg(field, pts).item() == 1.0

    @pytest.mark.slow
    def test_fitted_ellipsoid_small(self, fitted_sdf):
        field, _ = fitted_sdf
        pts = sample_eikonal_points(2000, seed=3)
        assert eikonal_reg(field, pts).item() < 0.05


class _AnalyticPlane:
    """s = scale * z, for exact Eikonal values."""

    def __init__(self, scale):
        self.scale = scale

    def with_grad(self, pts):
        x = pts if isinstance(pts, Tensor) else Tensor(np.asarray(pts))
        s = tape.mul(x[:, 2], self.scale)
        n = x.shape[0]
        g = tape.stack([tape.mul(s, 0.0), tape.mul(s, 0.0),
                        tape.add(tape.mul(s, 0.0), self.scale)], axis=-1)
        return s, g


def test_surface_samples_on_surface():
    grid = build_grid(24)
    mesh = marching_tets(grid, np.linalg.norm(grid.verts, axis=1) - 0.5)
    pts = surface_samples(mesh, 5000, np.random.default_rng(0))
    r = np.linalg.norm(pts, axis=1)
    assert np.abs(r - 0.5).max() < 2.0 / 24
