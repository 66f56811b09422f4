"""Rest-pose bone estimation, skinning weights, kinematics and posing.

Bone b occupies the segment between its parent joint and its own joint;
rotating bone b pivots its subtree about the bone's own rest joint, which
is where the children attach.  The root bone carries the viewpoint (a
world rigid transform).  Rest pose is the identity map by construction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tape
from .tape import Tensor

SPINE_BONES = 8            # 4 per side of the root
LEG_BONES = 3              # per leg, quadrupeds only
ANGLE_LIMIT = np.pi / 3.0          # +-60 deg, every axis
LEG_TWIST_LIMIT = np.pi / 10.0     # +-18 deg, leg y/z axes


class DegenerateMeshError(RuntimeError):
    """Mesh does not span the extents the heuristic needs."""


@dataclass
class Skeleton:
    kind: str                    # "bird" | "quadruped"
    joints_world: np.ndarray     # (B, 3) rest joints, joints_world[0] = root
    parent: np.ndarray           # (B,) parent indices, -1 for the root
    leg_mask: np.ndarray         # (B,) True for leg bones

    @property
    def n_bones(self) -> int:
        return int(self.joints_world.shape[0])

    @property
    def offsets(self) -> np.ndarray:
        """Parent-relative rest offsets; root keeps its world position."""
        off = self.joints_world.copy()
        off[1:] -= self.joints_world[self.parent[1:]]
        return off

    @property
    def bone_midpoints(self) -> np.ndarray:
        """Rest midpoints of the non-root bone segments, (B-1, 3)."""
        return 0.5 * (self.joints_world[1:] + self.joints_world[self.parent[1:]])

    def levels(self) -> list[np.ndarray]:
        """Non-root bones grouped by tree depth (parents come earlier)."""
        depth = np.zeros(self.n_bones, dtype=int)
        for b in range(1, self.n_bones):
            depth[b] = depth[self.parent[b]] + 1
        return [np.nonzero(depth == d)[0] for d in range(1, depth.max() + 1)]

    def validate_tree(self) -> None:
        seen = set()
        for b in range(1, self.n_bones):
            p, chain = b, set()
            while p != 0:
                if p in chain:
                    raise ValueError("cycle detected in parent map")
                chain.add(p)
                p = int(self.parent[p])
        seen.update(range(self.n_bones))


def _spine_joints(verts: np.ndarray, root: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    zmax = verts[np.argmax(verts[:, 2])]
    zmin = verts[np.argmin(verts[:, 2])]
    if np.ptp(verts[:, 2]) < 1e-9:
        raise DegenerateMeshError("mesh has no z extent")
    k = np.arange(1, SPINE_BONES // 2 + 1)[:, None] / (SPINE_BONES // 2)
    head = root + k * (zmax - root)
    tail = root + k * (zmin - root)
    return head, tail


def estimate_bones_bird(mesh) -> Skeleton:
    """Spine chain of 8 equal bones through the extreme-z vertices."""
    verts = mesh.verts.numpy() if isinstance(mesh.verts, Tensor) else np.asarray(mesh.verts)
    if verts.size == 0:
        raise DegenerateMeshError("empty mesh")
    root = verts.mean(axis=0)
    head, tail = _spine_joints(verts, root)
    joints = np.concatenate([root[None], head, tail], axis=0)
    parent = np.array([-1, 0, 1, 2, 3, 0, 5, 6, 7])
    return Skeleton("bird", joints, parent, np.zeros(9, dtype=bool))


def estimate_bones_quadruped(mesh, root_lift_quantile: float = 0.6) -> Skeleton:
    """Bird spine with a lifted root plus a 3-bone leg per xz-quadrant."""
    verts = mesh.verts.numpy() if isinstance(mesh.verts, Tensor) else np.asarray(mesh.verts)
    if verts.size == 0:
        raise DegenerateMeshError("empty mesh")
    root = verts.mean(axis=0)
    ylo, yhi = verts[:, 1].min(), verts[:, 1].max()
    root[1] = ylo + root_lift_quantile * (yhi - ylo)
    head, tail = _spine_joints(verts, root)
    joints = [root[None], head, tail]
    parent = [-1, 0, 1, 2, 3, 0, 5, 6, 7]
    leg = [False] * 9
    spine = np.concatenate([root[None], head, tail], axis=0)
    for sx, sz in ((1, 1), (1, -1), (-1, 1), (-1, -1)):
        quad = verts[(np.sign(verts[:, 0]) == sx) & (np.sign(verts[:, 2]) == sz)]
        if quad.size == 0:
            raise DegenerateMeshError(f"no vertices in xz-quadrant ({sx},{sz})")
        foot = quad[np.argmin(quad[:, 1])]
        attach = int(np.argmin(np.linalg.norm(spine - foot, axis=1)))
        k = np.arange(1, LEG_BONES + 1)[:, None] / LEG_BONES
        chain = spine[attach] + k * (foot - spine[attach])
        base = sum(j.shape[0] for j in joints)
        joints.append(chain)
        parent.extend([attach, base, base + 1])
        leg.extend([True] * LEG_BONES)
    skel = Skeleton("quadruped", np.concatenate(joints, axis=0),
                    np.array(parent), np.array(leg))
    skel.validate_tree()
    return skel


def estimate_bones(mesh, kind: str) -> Skeleton:
    if kind == "bird":
        return estimate_bones_bird(mesh)
    if kind == "quadruped":
        return estimate_bones_quadruped(mesh)
    raise ValueError(f"unknown topology kind: {kind}")


def skin_weights(verts, skeleton: Skeleton, temperature: float = 0.5) -> Tensor:
    """softmax_b(-d_ib / tau) with d_ib the squared point-segment distance.

    verts: (N, 3) or (S, N, 3); the root bone contributes the distance to
    the root joint itself.  The foot of each segment is held fixed when
    differentiating (exact by the envelope theorem).
    """
    v = verts if isinstance(verts, Tensor) else Tensor(np.asarray(verts))
    batched = len(v.shape) == 3
    vd = v.numpy() if batched else v.numpy()[None]
    jw = skeleton.joints_world.astype(vd.dtype)
    a = np.concatenate([jw[0][None], jw[skeleton.parent[1:]]], axis=0)  # (B,3) seg start
    b = jw                                                             # (B,3) seg end
    seg = b - a
    seg_len2 = np.maximum((seg * seg).sum(-1), 1e-30)
    # r* per (sample, vertex, bone), clipped to the segment
    r = (np.einsum("svd,bd->svb", vd, seg) - (a * seg).sum(-1)) / seg_len2
    r = np.clip(r, 0.0, 1.0)
    foot = a[None, None] + r[..., None] * seg[None, None]         # (S,N,B,3)
    foot_t = Tensor(foot if batched else foot[0])
    expand = tape.reshape(v, v.shape[:-1] + (1, 3))
    diff = tape.sub(expand, foot_t)
    d = tape.tsum(tape.mul(diff, diff), axis=-1)
    return tape.softmax(tape.mul(d, -1.0 / temperature), axis=-1)


def rotations_from_euler(angles: Tensor) -> Tensor:
    """Batched XYZ Euler angles (..., 3) to rotation matrices (..., 3, 3)."""
    x, y, z = angles[..., 0], angles[..., 1], angles[..., 2]
    cx, sx = tape.cos(x), tape.sin(x)
    cy, sy = tape.cos(y), tape.sin(y)
    cz, sz = tape.cos(z), tape.sin(z)
    one = tape.add(tape.mul(x, 0.0), 1.0)
    zero = tape.mul(x, 0.0)
    rx = tape.stack([tape.stack([one, zero, zero], -1),
                     tape.stack([zero, cx, tape.neg(sx)], -1),
                     tape.stack([zero, sx, cx], -1)], -2)
    ry = tape.stack([tape.stack([cy, zero, sy], -1),
                     tape.stack([zero, one, zero], -1),
                     tape.stack([tape.neg(sy), zero, cy], -1)], -2)
    rz = tape.stack([tape.stack([cz, tape.neg(sz), zero], -1),
                     tape.stack([sz, cz, zero], -1),
                     tape.stack([zero, zero, one], -1)], -2)
    return tape.einsum("...ij,...jk->...ik", tape.einsum("...ij,...jk->...ik", rx, ry), rz)


def forward_kinematics(skeleton: Skeleton, view_rot, view_t, bone_angles) -> tuple[Tensor, Tensor]:
    """Per-bone posing transforms M_b = G_b(xi) G_b(rest)^-1.

    view_rot: (S, 3, 3), view_t: (S, 3), bone_angles: (S, B-1, 3) Euler
    radians.  Returns (rot (S, B, 3, 3), trans (S, B, 3)); applying bone b
    to a vertex is rot_b @ v + trans_b.
    """
    skeleton.validate_tree()
    vr = view_rot if isinstance(view_rot, Tensor) else Tensor(np.asarray(view_rot))
    vt = view_t if isinstance(view_t, Tensor) else Tensor(np.asarray(view_t))
    ang = bone_angles if isinstance(bone_angles, Tensor) else Tensor(np.asarray(bone_angles))
    s = ang.shape[0]
    bm1 = skeleton.n_bones - 1
    jw = skeleton.joints_world[1:].astype(ang.dtype)          # (B-1, 3)

    r_local = rotations_from_euler(ang)                        # (S, B-1, 3, 3)
    # local translation (I - R) @ J for a pivot at the bone's own joint
    rj = tape.einsum("sbij,bj->sbi", r_local, jw)
    t_local = tape.sub(np.broadcast_to(jw, (s, bm1, 3)), rj)

    rots: list = [None] * skeleton.n_bones
    trans: list = [None] * skeleton.n_bones
    rots[0], trans[0] = vr, vt
    for level in skeleton.levels():
        for b in level:
            p = int(skeleton.parent[b])
            rl = r_local[:, b - 1]
            tl = t_local[:, b - 1]
            rots[b] = tape.matmul(rots[p], rl)
            trans[b] = tape.add(tape.einsum("sij,sj->si", rots[p], tl), trans[p])
    return tape.stack(rots, axis=1), tape.stack(trans, axis=1)


def blend_skin(verts, weights, rot: Tensor, trans: Tensor) -> Tensor:
    """Linear blend skinning: V_i = (sum_b w_ib M_b) applied to V_ins,i.

    verts: (S, N, 3) or (N, 3); weights: matching (S, N, B) or (N, B).
    """
    v = verts if isinstance(verts, Tensor) else Tensor(np.asarray(verts))
    w = weights if isinstance(weights, Tensor) else Tensor(np.asarray(weights))
    single = len(v.shape) == 2
    if single:
        v = tape.reshape(v, (1,) + tuple(v.shape))
        w = tape.reshape(w, (1,) + tuple(w.shape))
    rblend = tape.einsum("snb,sbij->snij", w, rot)
    tblend = tape.einsum("snb,sbi->sni", w, trans)
    posed = tape.add(tape.einsum("snij,snj->sni", rblend, v), tblend)
    return tape.reshape(posed, posed.shape[1:]) if single else posed


def pose_mesh(mesh, skeleton: Skeleton, view_rot, view_t, bone_angles,
              weights=None):
    """Convenience: skin a single canonical mesh into one posed copy."""
    from .tetra import Mesh
    if weights is None:
        weights = skin_weights(mesh.verts, skeleton)
    vr = np.asarray(view_rot, dtype=np.float64)[None]
    vt = np.asarray(view_t, dtype=np.float64)[None]
    ang = np.asarray(bone_angles, dtype=np.float64)[None]
    rot, trans = forward_kinematics(skeleton, vr, vt, ang)
    posed = blend_skin(tape.reshape(mesh.verts, (1,) + tuple(mesh.verts.shape)),
                       tape.reshape(weights, (1,) + tuple(weights.shape)), rot, trans)
    return Mesh(verts=tape.reshape(posed, posed.shape[1:]), faces=mesh.faces,
                canon=mesh.canon)


def clamp_rotations(raw, leg_mask: np.ndarray) -> Tensor:
    """tanh-bounded Euler angles: +-60 deg; +-18 deg on leg y/z axes."""
    r = raw if isinstance(raw, Tensor) else Tensor(np.asarray(raw))
    bones = leg_mask[1:]
    scale = np.full((bones.shape[0], 3), ANGLE_LIMIT)
    scale[bones, 1] = LEG_TWIST_LIMIT
    scale[bones, 2] = LEG_TWIST_LIMIT
    return tape.mul(tape.tanh(r), scale.astype(r.dtype))
