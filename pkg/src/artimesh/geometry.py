"""Closed-form geometry helpers shared by fields, synthesis and tests."""

from __future__ import annotations

import numpy as np


def ellipsoid_sdf(points: np.ndarray, semi_axes) -> np.ndarray:
    """Exact signed distance to an axis-aligned ellipsoid (negative inside).

    Solves the nearest-point problem per query via bisection on the Lagrange
    parameter t of q_i = a_i^2 p_i / (t + a_i^2).  Exact zeros are nudged so
    points on symmetry planes pick up the correct off-plane foot point.
    """
    p = np.asarray(points, dtype=np.float64)
    single = p.ndim == 1
    p = np.atleast_2d(p)
    a = np.asarray(semi_axes, dtype=np.float64)
    a2 = a * a

    # degenerate center query: distance is the smallest semi-axis
    r = np.linalg.norm(p, axis=1)
    center = r < 1e-12

    ps = np.where(np.abs(p) < 1e-12, 1e-12, p)
    inside = ((ps / a) ** 2).sum(axis=1) < 1.0

    def g(t):
        with np.errstate(divide="ignore", over="ignore"):
            return ((a * ps / (t[:, None] + a2)) ** 2).sum(axis=1)

    lo = np.where(inside, -a2.min() + 1e-18, 0.0)
    hi = np.where(inside, 0.0, a.max() * np.linalg.norm(ps, axis=1) + a2.max())
    # widen the outside bracket until g(hi) < 1
    for _ in range(60):
        bad = ~inside & (g(hi) >= 1.0)
        if not bad.any():
            break
        hi = np.where(bad, hi * 2.0 + 1.0, hi)
    for _ in range(100):
        mid = 0.5 * (lo + hi)
        gm = g(mid)
        take_lo = gm > 1.0  # root is to the right
        lo = np.where(take_lo, mid, lo)
        hi = np.where(take_lo, hi, mid)
    t = 0.5 * (lo + hi)
    q = a2 * ps / (t[:, None] + a2)
    d = np.linalg.norm(ps - q, axis=1)
    s = np.where(inside, -d, d)
    s = np.where(center, -a.min(), s)
    return s[0] if single else s


def euler_to_matrix(angles: np.ndarray) -> np.ndarray:
    """XYZ intrinsic Euler angles (radians) to rotation matrices.

    Accepts (..., 3); returns (..., 3, 3) with R = Rx @ Ry @ Rz.
    """
    ang = np.asarray(angles, dtype=np.float64)
    x, y, z = ang[..., 0], ang[..., 1], ang[..., 2]
    cx, sx = np.cos(x), np.sin(x)
    cy, sy = np.cos(y), np.sin(y)
    cz, sz = np.cos(z), np.sin(z)
    one = np.ones_like(x)
    zero = np.zeros_like(x)
    rx = np.stack([np.stack([one, zero, zero], -1),
                   np.stack([zero, cx, -sx], -1),
                   np.stack([zero, sx, cx], -1)], -2)
    ry = np.stack([np.stack([cy, zero, sy], -1),
                   np.stack([zero, one, zero], -1),
                   np.stack([-sy, zero, cy], -1)], -2)
    rz = np.stack([np.stack([cz, -sz, zero], -1),
                   np.stack([sz, cz, zero], -1),
                   np.stack([zero, zero, one], -1)], -2)
    return rx @ ry @ rz


def rotation_y(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rotation_x(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def rotation_z(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def view_rotation(azimuth: float, elevation: float = 0.0, roll: float = 0.0) -> np.ndarray:
    """Viewpoint rotation: spin about y (azimuth), tilt about x, roll about z.

    Conventions: the camera sits on the world +z axis; azimuth a means the
    camera sees the object from canonical direction (sin a, 0, cos a), and
    positive elevation looks down from above.  azimuth_of_rotation inverts
    the azimuth for any |elevation| < 90 deg.
    """
    return rotation_z(roll) @ rotation_x(elevation) @ rotation_y(-azimuth)


def azimuth_of_rotation(rot: np.ndarray) -> float:
    """Azimuth (radians, in [0, 2pi)) of the y-spin component of a viewpoint."""
    # direction in canonical coords that faces the camera (+z world)
    d = np.asarray(rot).T @ np.array([0.0, 0.0, 1.0])
    az = float(np.arctan2(d[0], d[2]))
    return az % (2.0 * np.pi)


def angle_difference(a: float, b: float) -> float:
    """Smallest absolute difference between two angles in radians."""
    d = (a - b) % (2.0 * np.pi)
    return float(min(d, 2.0 * np.pi - d))
