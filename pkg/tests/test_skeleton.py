"""Bone heuristics, skinning weights, kinematics and posing properties."""

import numpy as np
import pytest

from artimesh import tape
from artimesh.geometry import rotation_x, rotation_y
from artimesh.gradcheck import finite_diff_check
from artimesh.skeleton import (DegenerateMeshError, Skeleton, blend_skin,
                               clamp_rotations, estimate_bones_bird,
                               estimate_bones_quadruped, forward_kinematics,
                               skin_weights)
from artimesh.tape import Tensor
from artimesh.tetra import Mesh, build_grid, marching_tets


def ellipsoid_mesh(res=24, axes=(0.3, 0.3, 0.6)):
    grid = build_grid(res)
    vals = np.linalg.norm(grid.verts / np.asarray(axes), axis=1) - 1.0
    return marching_tets(grid, vals)


def two_bone_chain():
    joints = np.array([[0, 0, 0.0], [0, 0, 0.5], [0, 0, 1.0]])
    return Skeleton("bird", joints, np.array([-1, 0, 1]), np.zeros(3, dtype=bool))


class TestBirdBones:
    def test_joints_on_z_axis_for_ellipsoid(self):
        skel = estimate_bones_bird(ellipsoid_mesh())
        assert skel.n_bones == 9
        assert np.abs(skel.joints_world[:, :2]).max() < 0.02

    def test_equal_bone_lengths_per_side(self):
        skel = estimate_bones_bird(ellipsoid_mesh())
        j = skel.joints_world
        for side in (range(1, 5), range(5, 9)):
            lens = []
            for b in side:
                lens.append(np.linalg.norm(j[b] - j[skel.parent[b]]))
            assert np.ptp(lens) < 1e-6

    def test_extreme_joints_at_extreme_vertices(self):
        mesh = ellipsoid_mesh()
        skel = estimate_bones_bird(mesh)
        v = mesh.verts.numpy()
        np.testing.assert_allclose(skel.joints_world[4], v[np.argmax(v[:, 2])])
        np.testing.assert_allclose(skel.joints_world[8], v[np.argmin(v[:, 2])])

    def test_flat_mesh_rejected(self):
        flat = Mesh(verts=Tensor(np.random.default_rng(0).normal(size=(10, 3)) * [1, 1, 0]),
                    faces=np.zeros((1, 3), dtype=int), canon=None)
        with pytest.raises(DegenerateMeshError):
            estimate_bones_bird(flat)


class TestQuadrupedBones:
    def test_bone_count(self):
        skel = estimate_bones_quadruped(ellipsoid_mesh())
        assert skel.n_bones - 1 == 20  # 8 spine + 4 legs x 3

    def test_foot_joints_lowest_per_quadrant(self):
        mesh = ellipsoid_mesh()
        skel = estimate_bones_quadruped(mesh)
        v = mesh.verts.numpy()
        feet = skel.joints_world[[11, 14, 17, 20]]
        for sx, sz in ((1, 1), (1, -1), (-1, 1), (-1, -1)):
            quad = v[(np.sign(v[:, 0]) == sx) & (np.sign(v[:, 2]) == sz)]
            match = np.min(np.linalg.norm(feet - quad[np.argmin(quad[:, 1])], axis=1))
            assert match < 1e-12

    def test_leg_chains_attach_to_spine(self):
        skel = estimate_bones_quadruped(ellipsoid_mesh())
        for leg_start in (9, 12, 15, 18):
            assert skel.parent[leg_start] <= 8
            assert skel.parent[leg_start + 1] == leg_start
            assert skel.parent[leg_start + 2] == leg_start + 1

    def test_leg_mask(self):
        skel = estimate_bones_quadruped(ellipsoid_mesh())
        assert skel.leg_mask.sum() == 12
        assert not skel.leg_mask[:9].any()


class TestSkinWeights:
    def test_single_bone_all_ones(self):
        skel = Skeleton("bird", np.array([[0, 0, 0.0], [0, 0, 1.0]]),
                        np.array([-1, 0]), np.zeros(2, dtype=bool))
        # only-the-root topology would be weight 1; with 2 bones rows sum to 1
        w = skin_weights(np.random.default_rng(0).normal(size=(10, 3)), skel).numpy()
        np.testing.assert_allclose(w.sum(axis=1), 1.0, atol=1e-6)
        assert (w > 0).all()

    def test_equidistant_two_bones(self):
        joints = np.array([[0, 0, 0.0], [0, 0, 1.0], [0, 0, -1.0]])
        skel = Skeleton("bird", joints, np.array([-1, 0, 0]), np.zeros(3, dtype=bool))
        # point far above the root: distances to both unit segments equal,
        # root segment (a point) is equally far -> symmetric weights on 1, 2
        w = skin_weights(np.array([[0, 0.5, 0.0]]), skel).numpy()[0]
        assert w[1] == pytest.approx(w[2], abs=1e-9)

    def test_point_segment_squared_distance(self):
        # point (0,1,0) vs segment (0,0,-1)-(0,0,1): squared distance 1
        joints = np.array([[0, 0, -1.0], [0, 0, 1.0]])
        skel = Skeleton("bird", joints, np.array([-1, 0]), np.zeros(2, dtype=bool))
        v = np.array([[0, 1.0, 0]])
        w = skin_weights(v, skel, temperature=0.5).numpy()[0]
        # d_root = |(0,1,0)-(0,0,-1)|^2 = 2; d_bone = 1
        expect = np.exp(-np.array([2.0, 1.0]) / 0.5)
        expect /= expect.sum()
        np.testing.assert_allclose(w, expect, atol=1e-9)

    def test_rows_sum_to_one_batched(self):
        skel = estimate_bones_quadruped(ellipsoid_mesh())
        v = np.random.default_rng(0).uniform(-0.5, 0.5, size=(2, 40, 3))
        w = skin_weights(v, skel).numpy()
        assert w.shape == (2, 40, 21)
        np.testing.assert_allclose(w.sum(axis=-1), 1.0, atol=1e-6)
        assert (w > 0).all()


class TestKinematics:
    def test_rest_pose_identity(self):
        skel = estimate_bones_quadruped(ellipsoid_mesh())
        rot, trans = forward_kinematics(
            skel, np.eye(3)[None], np.zeros((1, 3)), np.zeros((1, 20, 3)))
        np.testing.assert_allclose(rot.numpy(), np.broadcast_to(np.eye(3), (1, 21, 3, 3)), atol=1e-15)
        np.testing.assert_allclose(trans.numpy(), 0.0, atol=1e-15)

    def test_rest_pose_identity_on_vertices(self):
        mesh = ellipsoid_mesh()
        skel = estimate_bones_quadruped(mesh)
        w = skin_weights(mesh.verts, skel)
        rot, trans = forward_kinematics(
            skel, np.eye(3)[None], np.zeros((1, 3)), np.zeros((1, 20, 3)))
        posed = blend_skin(mesh.verts, w, rot, trans).numpy()
        np.testing.assert_allclose(posed, mesh.verts.numpy(), atol=1e-6)

    def test_root_translation_moves_everything(self):
        mesh = ellipsoid_mesh()
        skel = estimate_bones_bird(mesh)
        w = skin_weights(mesh.verts, skel)
        t = np.array([[0.3, -0.2, 0.1]])
        rot, trans = forward_kinematics(skel, np.eye(3)[None], t, np.zeros((1, 8, 3)))
        posed = blend_skin(mesh.verts, w, rot, trans).numpy()
        np.testing.assert_allclose(posed, mesh.verts.numpy() + t, atol=1e-9)

    def test_two_bone_analytic_case(self):
        skel = two_bone_chain()
        # rotate bone 2 (joint at z=1) by 90 deg about x
        ang = np.zeros((1, 2, 3))
        ang[0, 1, 0] = np.pi / 2
        rot, trans = forward_kinematics(skel, np.eye(3)[None], np.zeros((1, 3)), ang)
        w = np.array([[0.0, 0.0, 1.0]])  # vertex rigid on bone 2
        v = np.array([[0.0, 0.0, 0.75]])
        posed = blend_skin(v, w, rot, trans).numpy()
        # pivot (0,0,1): (0,0,-0.25) -> (0,0.25,0) -> (0,0.25,1)
        np.testing.assert_allclose(posed[0], [0.0, 0.25, 1.0], atol=1e-9)
        # rotate bone 1 (joint z=0.5): subtree pivots about (0,0,0.5)
        ang = np.zeros((1, 2, 3))
        ang[0, 0, 0] = np.pi / 2
        rot, trans = forward_kinematics(skel, np.eye(3)[None], np.zeros((1, 3)), ang)
        posed = blend_skin(v, w, rot, trans).numpy()
        # (0,0,0.75) about (0,0,0.5) by Rx(90): offset (0,0,0.25) -> (0,-0.25,0)
        np.testing.assert_allclose(posed[0], [0.0, -0.25, 0.5], atol=1e-9)

    def test_rigid_pose_preserves_distances(self):
        mesh = ellipsoid_mesh()
        skel = estimate_bones_bird(mesh)
        w = skin_weights(mesh.verts, skel)
        r = (rotation_y(0.7) @ rotation_x(-0.25))[None]
        rot, trans = forward_kinematics(skel, r, np.array([[0.1, 0.2, -0.3]]),
                                        np.zeros((1, 8, 3)))
        posed = blend_skin(mesh.verts, w, rot, trans).numpy()
        v = mesh.verts.numpy()
        rng = np.random.default_rng(0)
        i = rng.integers(0, len(v), size=200)
        j = rng.integers(0, len(v), size=200)
        d0 = np.linalg.norm(v[i] - v[j], axis=1)
        d1 = np.linalg.norm(posed[i] - posed[j], axis=1)
        np.testing.assert_allclose(d1, d0, atol=1e-6)

    def test_root_equivariance(self):
        mesh = ellipsoid_mesh()
        skel = estimate_bones_quadruped(mesh)
        w = skin_weights(mesh.verts, skel)
        rng = np.random.default_rng(5)
        ang = rng.normal(scale=0.2, size=(1, 20, 3))
        rot0, tr0 = forward_kinematics(skel, np.eye(3)[None], np.zeros((1, 3)), ang)
        base = blend_skin(mesh.verts, w, rot0, tr0).numpy()
        r = rotation_y(1.1)[None]
        t = np.array([[0.2, -0.1, 0.4]])
        rot1, tr1 = forward_kinematics(skel, r, t, ang)
        posed = blend_skin(mesh.verts, w, rot1, tr1).numpy()
        np.testing.assert_allclose(posed, base @ r[0].T + t, atol=1e-9)

    def test_cycle_detection(self):
        skel = two_bone_chain()
        skel.parent = np.array([-1, 2, 1])
        with pytest.raises(ValueError, match="cycle"):
            forward_kinematics(skel, np.eye(3)[None], np.zeros((1, 3)),
                               np.zeros((1, 2, 3)))

    def test_gradcheck_vertices_wrt_angles(self):
        skel = two_bone_chain()
        v = np.random.default_rng(1).normal(size=(6, 3)) * 0.3 + [0, 0, 0.6]
        w = skin_weights(v, skel).numpy()

        def f(ang):
            rot, trans = forward_kinematics(skel, np.eye(3)[None],
                                            np.zeros((1, 3)), ang)
            posed = blend_skin(v, w, rot, trans)
            return tape.tsum(tape.mul(posed, posed))

        ang0 = Tensor(np.random.default_rng(2).normal(scale=0.3, size=(1, 2, 3)))
        rep = finite_diff_check(f, [ang0], tol=1e-3, name="lbs-angles")
        assert rep.passed, str(rep)

    def test_gradcheck_through_skin_weights(self):
        skel = two_bone_chain()
        v0 = np.random.default_rng(1).normal(size=(5, 3)) * 0.3 + [0, 0, 0.5]
        ang = np.random.default_rng(2).normal(scale=0.2, size=(1, 2, 3))

        def f(verts):
            w = skin_weights(verts, skel)
            rot, trans = forward_kinematics(skel, np.eye(3)[None],
                                            np.zeros((1, 3)), ang)
            posed = blend_skin(verts, w, rot, trans)
            return tape.tsum(tape.mul(posed, posed))

        rep = finite_diff_check(f, [Tensor(v0)], tol=1e-3, name="lbs-verts")
        assert rep.passed, str(rep)


class TestClampRotations:
    def setup_method(self):
        self.skel = estimate_bones_quadruped(ellipsoid_mesh())

    def test_zero_maps_to_zero(self):
        out = clamp_rotations(np.zeros((20, 3)), self.skel.leg_mask).numpy()
        np.testing.assert_array_equal(out, 0.0)

    def test_saturation_at_bounds(self):
        out = clamp_rotations(np.full((20, 3), 1e9), self.skel.leg_mask).numpy()
        spine = out[~self.skel.leg_mask[1:]]
        legs = out[self.skel.leg_mask[1:]]
        np.testing.assert_allclose(spine, np.pi / 3)
        np.testing.assert_allclose(legs[:, 0], np.pi / 3)
        np.testing.assert_allclose(legs[:, 1:], np.pi / 10)

    def test_bounds_never_exceeded(self):
        raw = np.random.default_rng(0).normal(scale=50, size=(500, 20, 3))
        for i in range(500):
            out = clamp_rotations(raw[i], self.skel.leg_mask).numpy()
            assert np.abs(out).max() <= np.pi / 3
            legs = out[self.skel.leg_mask[1:]]
            assert np.abs(legs[:, 1:]).max() <= np.pi / 10
