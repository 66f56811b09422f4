"""Perspective camera, differentiable rasterization, deferred shading.

Coverage, z-buffering and silhouette-edge selection are discrete and
recomputed each forward pass; barycentric weights, interpolated
attributes and the soft silhouette are tape expressions of the projected
vertex positions, so boundary gradients flow into the mesh.

The soft mask is sigmoid(d / gamma) where d is the signed screen distance
to the nearest silhouette edge (positive inside), evaluated in a band of
5*gamma pixels around the coverage boundary; outside the band the mask
equals hard coverage.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from . import tape
from .tape import Tensor


@dataclass
class Camera:
    fov_deg: float = 25.0
    position: tuple = (0.0, 0.0, 10.0)
    height: int = 64
    width: int = 64

    @property
    def focal_px(self) -> float:
        return (self.height / 2.0) / np.tan(np.deg2rad(self.fov_deg) / 2.0)

    @property
    def center(self) -> tuple:
        return ((self.width - 1) / 2.0, (self.height - 1) / 2.0)


def project(points, camera: Camera):
    """World points -> (u, v, depth); u is the column, v the row.

    The camera sits at `position` looking down -z with y up; depth is the
    distance along the viewing direction.
    """
    p = points if isinstance(points, Tensor) else Tensor(np.asarray(points))
    px, py, pz = p[..., 0], p[..., 1], p[..., 2]
    cx, cy = camera.center
    f = camera.focal_px
    depth = tape.sub(float(camera.position[2]), pz)
    x = tape.sub(px, float(camera.position[0]))
    y = tape.sub(py, float(camera.position[1]))
    u = tape.add(tape.mul(tape.div(x, depth), f), cx)
    v = tape.sub(cy, tape.mul(tape.div(y, depth), f))
    return u, v, depth


@dataclass
class RasterBuffers:
    """Flat per-covered-pixel quantities over a whole batch."""
    camera: Camera
    n_samples: int
    coverage: np.ndarray          # (S, H, W) bool, hard z-buffered coverage
    sample_idx: np.ndarray        # (P,) sample of each covered pixel
    pixel_idx: np.ndarray         # (P,) flat index into H*W
    tri_idx: np.ndarray           # (P,) triangle id
    bary: Tensor                  # (P, 3) differentiable barycentrics
    canon: Tensor                 # (P, 3) interpolated canonical coords
    normal: Tensor                # (P, 3) interpolated unit posed normals
    mask_soft: Tensor             # (S, H, W) soft silhouette in [0, 1]
    depth: np.ndarray             # (P,) interpolated depth (data only)

    @property
    def n_covered(self) -> int:
        return int(self.pixel_idx.shape[0])

    def flat_image_idx(self) -> np.ndarray:
        hw = self.camera.height * self.camera.width
        return self.sample_idx * hw + self.pixel_idx


def _hard_coverage(u: np.ndarray, v: np.ndarray, depth: np.ndarray,
                   faces: np.ndarray, h: int, w: int, near: float):
    """Z-buffered coverage for one sample; deterministic tie-breaks."""
    fu, fv, fd = u[faces], v[faces], depth[faces]
    ok = (fd > near).all(axis=1)
    area = ((fu[:, 1] - fu[:, 0]) * (fv[:, 2] - fv[:, 0])
            - (fu[:, 2] - fu[:, 0]) * (fv[:, 1] - fv[:, 0]))
    ok &= np.abs(area) > 1e-14
    fid = np.nonzero(ok)[0]
    if fid.size == 0:
        return (np.empty(0, np.int64), np.empty(0, np.int64),
                np.empty((0, 3)), np.empty(0))
    fu, fv, fd, area = fu[fid], fv[fid], fd[fid], area[fid]

    x0 = np.clip(np.ceil(fu.min(1)), 0, w - 1).astype(np.int64)
    x1 = np.clip(np.floor(fu.max(1)), 0, w - 1).astype(np.int64)
    y0 = np.clip(np.ceil(fv.min(1)), 0, h - 1).astype(np.int64)
    y1 = np.clip(np.floor(fv.max(1)), 0, h - 1).astype(np.int64)
    nx = np.maximum(x1 - x0 + 1, 0)
    ny = np.maximum(y1 - y0 + 1, 0)
    count = nx * ny
    keep = count > 0
    if not keep.any():
        return (np.empty(0, np.int64), np.empty(0, np.int64),
                np.empty((0, 3)), np.empty(0))
    fu, fv, fd, area = fu[keep], fv[keep], fd[keep], area[keep]
    fid, x0, y0, nx, ny, count = fid[keep], x0[keep], y0[keep], nx[keep], ny[keep], count[keep]

    rep = np.repeat(np.arange(fid.size), count)
    local = np.arange(count.sum()) - np.repeat(np.cumsum(count) - count, count)
    px = x0[rep] + local % nx[rep]
    py = y0[rep] + local // nx[rep]

    au, av = fu[rep], fv[rep]
    e0 = ((au[:, 1] - px) * (av[:, 2] - py) - (au[:, 2] - px) * (av[:, 1] - py))
    e1 = ((au[:, 2] - px) * (av[:, 0] - py) - (au[:, 0] - px) * (av[:, 2] - py))
    e2 = ((au[:, 0] - px) * (av[:, 1] - py) - (au[:, 1] - px) * (av[:, 0] - py))
    s = np.sign(area[rep])
    inside = (e0 * s >= 0) & (e1 * s >= 0) & (e2 * s >= 0)
    if not inside.any():
        return (np.empty(0, np.int64), np.empty(0, np.int64),
                np.empty((0, 3)), np.empty(0))
    rep, px, py = rep[inside], px[inside], py[inside]
    lam = np.stack([e0[inside], e1[inside], e2[inside]], axis=1) / area[rep][:, None]
    d = (lam * fd[rep]).sum(axis=1)

    pix = py * w + px
    order = np.lexsort((fid[rep], d, pix))
    pix_o = pix[order]
    first = np.ones(pix_o.size, dtype=bool)
    first[1:] = pix_o[1:] != pix_o[:-1]
    sel = order[first]
    return pix[sel], fid[rep[sel]], lam[sel], d[sel]


def _silhouette_edges(faces: np.ndarray, u: np.ndarray, v: np.ndarray,
                      depth: np.ndarray, near: float):
    """Mesh edges whose two adjacent faces differ in screen orientation."""
    fu, fv = u[faces], v[faces]
    area = ((fu[:, 1] - fu[:, 0]) * (fv[:, 2] - fv[:, 0])
            - (fu[:, 2] - fu[:, 0]) * (fv[:, 1] - fv[:, 0]))
    infront = (depth[faces] > near).all(axis=1)
    orient = np.where(infront, np.sign(area), 0.0)
    e = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]], axis=0)
    eo = np.concatenate([orient, orient, orient])
    a = np.minimum(e[:, 0], e[:, 1])
    b = np.maximum(e[:, 0], e[:, 1])
    key = a.astype(np.int64) * (int(u.shape[0]) + 1) + b
    order = np.argsort(key, kind="stable")
    ks, os_ = key[order], eo[order]
    asrt, bsrt = a[order], b[order]
    first_mask = np.r_[True, ks[1:] != ks[:-1]]
    idx = np.nonzero(first_mask)[0]
    nxt = np.r_[idx[1:], ks.size]
    o1 = os_[idx]
    o2 = np.where(nxt - idx >= 2, os_[np.minimum(idx + 1, ks.size - 1)], 0.0)
    silm = o1 * o2 <= 0
    return np.stack([asrt[idx][silm], bsrt[idx][silm]], axis=1)


def rasterize(posed_verts, faces: np.ndarray, canon, camera: Camera,
              gamma: float = 1.0, band: float = 5.0, near: float = 1e-3) -> RasterBuffers:
    """Batched differentiable rasterization.

    posed_verts: (S, N, 3) tape tensor (or array); canon: (N, 3) canonical
    coordinates shared by the batch.  Normals are area-weighted vertex
    normals of the posed mesh.
    """
    from .tetra import vertex_normals

    pv = posed_verts if isinstance(posed_verts, Tensor) else Tensor(np.asarray(posed_verts))
    if len(pv.shape) == 2:
        pv = tape.reshape(pv, (1,) + tuple(pv.shape))
    s, n, _ = pv.shape
    h, w = camera.height, camera.width
    canon_t = canon if isinstance(canon, Tensor) else Tensor(np.asarray(canon))

    u_t, v_t, depth_t = project(pv, camera)          # (S, N) tape
    u_d, v_d, d_d = u_t.numpy(), v_t.numpy(), depth_t.numpy()

    coverage = np.zeros((s, h, w), dtype=bool)
    pix_all, tri_all, samp_all, depth_all = [], [], [], []
    band_pix, band_sign, band_edge_a, band_edge_b, band_samp = [], [], [], [], []

    for si in range(s):
        pix, tri, _, dpt = _hard_coverage(u_d[si], v_d[si], d_d[si], faces, h, w, near)
        coverage[si].reshape(-1)[pix] = True
        pix_all.append(pix)
        tri_all.append(tri)
        samp_all.append(np.full(pix.size, si, dtype=np.int64))
        depth_all.append(dpt)

        if pix.size == 0:
            continue
        cov = coverage[si]
        inside_d = ndimage.distance_transform_edt(cov)
        outside_d = ndimage.distance_transform_edt(~cov)
        in_band = (inside_d <= band) & (outside_d <= band)
        bpix = np.nonzero(in_band.reshape(-1))[0]
        if bpix.size == 0:
            continue
        sil = _silhouette_edges(faces, u_d[si], v_d[si], d_d[si], near)
        if sil.size == 0:
            continue
        # keep only edges near the coverage boundary (drops self-occlusion
        # silhouettes interior to the union coverage)
        rim = cov & (inside_d <= 1.5)
        ry, rx = np.nonzero(rim)
        if rx.size == 0:
            continue
        tree = cKDTree(np.stack([rx, ry], axis=1))
        ea = np.stack([u_d[si][sil[:, 0]], v_d[si][sil[:, 0]]], axis=1)
        eb = np.stack([u_d[si][sil[:, 1]], v_d[si][sil[:, 1]]], axis=1)
        mid = 0.5 * (ea + eb)
        dist_rim = np.minimum.reduce([tree.query(ea)[0], tree.query(eb)[0],
                                      tree.query(mid)[0]])
        sil = sil[dist_rim <= 2.5]
        if sil.size == 0:
            continue
        ea = np.stack([u_d[si][sil[:, 0]], v_d[si][sil[:, 0]]], axis=1)
        eb = np.stack([u_d[si][sil[:, 1]], v_d[si][sil[:, 1]]], axis=1)

        py, px = np.divmod(bpix, w)
        p = np.stack([px, py], axis=1).astype(np.float64)
        seg = eb - ea
        seg2 = np.maximum((seg * seg).sum(1), 1e-30)
        t = ((p[:, None, :] - ea[None]) * seg[None]).sum(-1) / seg2[None]
        t = np.clip(t, 0.0, 1.0)
        foot = ea[None] + t[..., None] * seg[None]
        dist = np.linalg.norm(p[:, None] - foot, axis=-1)
        nearest = np.argmin(dist, axis=1)
        band_pix.append(bpix)
        band_sign.append(np.where(cov.reshape(-1)[bpix], 1.0, -1.0))
        band_edge_a.append(sil[nearest, 0])
        band_edge_b.append(sil[nearest, 1])
        band_samp.append(np.full(bpix.size, si, dtype=np.int64))

    pix = np.concatenate(pix_all) if pix_all else np.empty(0, np.int64)
    tri = np.concatenate(tri_all) if tri_all else np.empty(0, np.int64)
    samp = np.concatenate(samp_all) if samp_all else np.empty(0, np.int64)
    depths = np.concatenate(depth_all) if depth_all else np.empty(0)

    uv_flat_u = tape.reshape(u_t, (s * n,))
    uv_flat_v = tape.reshape(v_t, (s * n,))

    if pix.size:
        corners = faces[tri]                            # (P, 3)
        goff = samp[:, None] * n + corners
        cu = [tape.gather(uv_flat_u, goff[:, i]) for i in range(3)]
        cv = [tape.gather(uv_flat_v, goff[:, i]) for i in range(3)]
        ppx = (pix % w).astype(np.float64)
        ppy = (pix // w).astype(np.float64)
        area = tape.sub(tape.mul(tape.sub(cu[1], cu[0]), tape.sub(cv[2], cv[0])),
                        tape.mul(tape.sub(cu[2], cu[0]), tape.sub(cv[1], cv[0])))
        e_parts = []
        for i in range(3):
            j, k = (i + 1) % 3, (i + 2) % 3
            e = tape.sub(tape.mul(tape.sub(cu[j], ppx), tape.sub(cv[k], ppy)),
                         tape.mul(tape.sub(cu[k], ppx), tape.sub(cv[j], ppy)))
            e_parts.append(tape.div(e, area))
        bary = tape.stack(e_parts, axis=1)              # (P, 3)

        cc = [tape.gather(canon_t, corners[:, i]) for i in range(3)]
        canon_px = None
        for i in range(3):
            term = tape.mul(cc[i], tape.reshape(bary[:, i], (-1, 1)))
            canon_px = term if canon_px is None else tape.add(canon_px, term)

        vn = vertex_normals(pv, faces)                  # (S, N, 3)
        vn_flat = tape.reshape(vn, (s * n, 3))
        nrm_px = None
        for i in range(3):
            term = tape.mul(tape.gather(vn_flat, goff[:, i]),
                            tape.reshape(bary[:, i], (-1, 1)))
            nrm_px = term if nrm_px is None else tape.add(nrm_px, term)
        nlen = tape.norm_last(nrm_px, eps=1e-20)
        nrm_px = tape.div(nrm_px, tape.reshape(nlen, (-1, 1)))
    else:
        bary = Tensor(np.zeros((0, 3)))
        canon_px = Tensor(np.zeros((0, 3)))
        nrm_px = Tensor(np.zeros((0, 3)))

    base = coverage.astype(u_d.dtype)
    if band_pix:
        bp = np.concatenate(band_pix)
        bsign = np.concatenate(band_sign)
        bea = np.concatenate(band_edge_a)
        beb = np.concatenate(band_edge_b)
        bsamp = np.concatenate(band_samp)
        ga = bsamp * n + bea
        gb = bsamp * n + beb
        ax, ay = tape.gather(uv_flat_u, ga), tape.gather(uv_flat_v, ga)
        bx, by = tape.gather(uv_flat_u, gb), tape.gather(uv_flat_v, gb)
        ppx = (bp % w).astype(np.float64)
        ppy = (bp // w).astype(np.float64)
        sx, sy = tape.sub(bx, ax), tape.sub(by, ay)
        seg2 = np.maximum(sx.numpy() ** 2 + sy.numpy() ** 2, 1e-30)
        tpar = np.clip(((ppx - ax.numpy()) * sx.numpy()
                        + (ppy - ay.numpy()) * sy.numpy()) / seg2, 0.0, 1.0)
        fx = tape.add(ax, tape.mul(sx, tpar))
        fy = tape.add(ay, tape.mul(sy, tpar))
        dx, dy = tape.sub(ppx, fx), tape.sub(ppy, fy)
        dist = tape.sqrt(tape.add(tape.add(tape.mul(dx, dx), tape.mul(dy, dy)), 1e-20))
        signed = tape.mul(dist, bsign)
        soft = tape.sigmoid(tape.mul(signed, 1.0 / gamma))
        hw = h * w
        mask_soft = tape.reshape(
            tape.scatter_write(base.reshape(-1), bsamp * hw + bp, soft), (s, h, w))
    else:
        mask_soft = Tensor(base)

    return RasterBuffers(camera=camera, n_samples=s, coverage=coverage,
                         sample_idx=samp, pixel_idx=pix, tri_idx=tri,
                         bary=bary, canon=canon_px, normal=nrm_px,
                         mask_soft=mask_soft, depth=depths)


def shade(buffers: RasterBuffers, albedo_field, phi_out, light_dir, k_ambient,
          k_diffuse) -> Tensor:
    """Deferred Lambertian shading -> image (S, H, W, 3).

    phi_out: (S, D) conditioning codes; light_dir: (S, 3) unit vectors;
    k_ambient, k_diffuse: (S,).  The albedo field is queried exactly once
    per covered pixel.
    """
    s = buffers.n_samples
    h, w = buffers.camera.height, buffers.camera.width
    sidx = buffers.sample_idx
    phi = phi_out if isinstance(phi_out, Tensor) else Tensor(np.asarray(phi_out))
    ld = light_dir if isinstance(light_dir, Tensor) else Tensor(np.asarray(light_dir))
    ks = k_ambient if isinstance(k_ambient, Tensor) else Tensor(np.asarray(k_ambient))
    kd = k_diffuse if isinstance(k_diffuse, Tensor) else Tensor(np.asarray(k_diffuse))

    base = np.zeros((s, h, w, 3), dtype=buffers.mask_soft.dtype)
    if buffers.n_covered == 0:
        return Tensor(base)
    albedo = albedo_field(buffers.canon, tape.gather(phi, sidx))     # (P, 3)
    lam = tape.relu(tape.dot_last(buffers.normal, tape.gather(ld, sidx)))
    shading = tape.add(tape.gather(ks, sidx), tape.mul(tape.gather(kd, sidx), lam))
    rgb = tape.mul(albedo, tape.reshape(shading, (-1, 1)))
    flat = (buffers.flat_image_idx()[:, None] * 3 + np.arange(3)[None])
    return tape.reshape(tape.scatter_write(base.reshape(-1), flat, rgb), (s, h, w, 3))


def render_features(buffers: RasterBuffers, feature_field) -> Tensor:
    """Deferred feature rendering -> (S, H, W, D'); uncovered pixels zero."""
    s = buffers.n_samples
    h, w = buffers.camera.height, buffers.camera.width
    dim = feature_field.out_dim
    base = np.zeros((s, h, w, dim), dtype=buffers.mask_soft.dtype)
    if buffers.n_covered == 0:
        return Tensor(base)
    feats = feature_field(buffers.canon)                # (P, D')
    flat = (buffers.flat_image_idx()[:, None] * dim + np.arange(dim)[None])
    return tape.reshape(tape.scatter_write(base.reshape(-1), flat, feats),
                        (s, h, w, dim))


class EmptyMaskError(ValueError):
    pass


def distance_transform(mask: np.ndarray) -> np.ndarray:
    """Euclidean distance (pixels) to the nearest mask-interior pixel."""
    m = np.asarray(mask)
    binary = m > 0.5
    if not binary.any():
        raise EmptyMaskError("distance transform of an empty mask")
    return ndimage.distance_transform_edt(~binary)
