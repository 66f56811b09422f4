"""Tetrahedral grid, differentiable marching tetrahedra, Eikonal terms.

The canonical cube [-1,1]^3 is split into resolution^3 cells, each into 6
positively-oriented tetrahedra (Kuhn split around the main diagonal).
Surface vertices sit on sign-change edges by linear interpolation and are
differentiable w.r.t. the two endpoint SDF values; shared edges are
deduplicated so the output mesh is watertight.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dfield

import numpy as np

from . import tape
from .tape import Tensor


class EmptyMeshError(RuntimeError):
    """The SDF has no sign change anywhere on the grid."""


@dataclass
class Mesh:
    """Triangle mesh; canon keeps each vertex's canonical-space position."""
    verts: Tensor
    faces: np.ndarray
    canon: Tensor

    @property
    def n_verts(self) -> int:
        return self.verts.shape[0]

    @property
    def n_faces(self) -> int:
        return self.faces.shape[0]


# 6-tet Kuhn decomposition: paths of axis permutations from corner 0 to 7.
_CUBE_TET_CORNERS = np.array([
    [0, 1, 3, 7],
    [0, 1, 5, 7],
    [0, 2, 3, 7],
    [0, 2, 6, 7],
    [0, 4, 5, 7],
    [0, 4, 6, 7],
])

# tet-local edge k connects corner pair _TET_EDGES[k]
_TET_EDGES = np.array([[0, 1], [0, 2], [0, 3], [1, 2], [1, 3], [2, 3]])


def _build_tri_table() -> list:
    """case -> triangles as triples of tet-edge ids (bit i: corner i inside).

    Three crossing edges make one triangle; four make a quad, ordered into
    a cycle via shared corners and split along one diagonal.  Chirality is
    fixed at extraction time from the actual geometry.
    """
    table = [[] for _ in range(16)]
    for case in range(1, 15):
        inside = [(case >> i) & 1 for i in range(4)]
        crossing = [k for k, (a, b) in enumerate(_TET_EDGES) if inside[a] != inside[b]]
        if len(crossing) == 3:
            table[case] = [list(crossing)]
        else:
            # order the 4 edges cyclically: consecutive edges share a corner
            cycle = [crossing[0]]
            rest = set(crossing[1:])
            while rest:
                last = set(_TET_EDGES[cycle[-1]])
                nxt = next(k for k in sorted(rest) if last & set(_TET_EDGES[k]))
                cycle.append(nxt)
                rest.remove(nxt)
            table[case] = [[cycle[0], cycle[1], cycle[2]],
                           [cycle[0], cycle[2], cycle[3]]]
    return table


_TRI_TABLE = _build_tri_table()


class TetGrid:
    """Vertices on a (r+1)^3 lattice over [-1,1]^3 plus 6 r^3 tetrahedra."""

    def __init__(self, resolution: int):
        if resolution < 2:
            raise ValueError("resolution must be >= 2")
        self.resolution = resolution
        n = resolution + 1
        axis = np.linspace(-1.0, 1.0, n)
        gx, gy, gz = np.meshgrid(axis, axis, axis, indexing="ij")
        self.verts = np.stack([gx, gy, gz], axis=-1).reshape(-1, 3)

        ii, jj, kk = np.meshgrid(np.arange(resolution), np.arange(resolution),
                                 np.arange(resolution), indexing="ij")
        base = (ii * n * n + jj * n + kk).reshape(-1)
        # cube corner c (bit2=x, bit1=y, bit0=z) relative vertex offset
        offs = np.array([(b >> 2) * n * n + ((b >> 1) & 1) * n + (b & 1)
                         for b in range(8)])
        cubes = base[:, None] + offs[None, :]
        tets = cubes[:, _CUBE_TET_CORNERS].reshape(-1, 4)
        self.tets = _orient_positive(tets, self.verts)

    @property
    def n_verts(self) -> int:
        return self.verts.shape[0]

    @property
    def n_tets(self) -> int:
        return self.tets.shape[0]

    def tet_volumes(self) -> np.ndarray:
        v = self.verts[self.tets]
        return np.einsum("ij,ij->i", np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]),
                         v[:, 3] - v[:, 0]) / 6.0


def _orient_positive(tets: np.ndarray, verts: np.ndarray) -> np.ndarray:
    v = verts[tets]
    vol = np.einsum("ij,ij->i", np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]),
                    v[:, 3] - v[:, 0])
    flip = vol < 0
    tets = tets.copy()
    tets[flip, 2], tets[flip, 3] = tets[flip, 3].copy(), tets[flip, 2].copy()
    return tets


def build_grid(resolution: int) -> TetGrid:
    return TetGrid(resolution)


@dataclass
class ExtractionPlan:
    """Frozen combinatorics of one extraction: which edges cross where."""
    edge_a: np.ndarray      # (E,) grid vertex ids, negative-side endpoint
    edge_b: np.ndarray      # (E,) positive-side endpoint
    faces: np.ndarray       # (F, 3) indices into the edge list
    n_grid_verts: int = 0


def zero_nudge(values: np.ndarray) -> float:
    """Offset replacing near-zero grid values to keep cases generic.

    Sized so that plane extraction stays exact to well under 1e-6 while
    crossing vertices collapsing onto a lattice point stay far enough
    apart to avoid zero-area faces.
    """
    scale = float(np.max(np.abs(values))) if values.size else 1.0
    return 1e-7 * max(scale, 1e-6)


def snap_values(values: np.ndarray) -> np.ndarray:
    """Constant additive correction pushing |s| below the snap band to +nudge."""
    nudge = zero_nudge(values)
    mask = np.abs(values) < 1e-2 * nudge
    return np.where(mask, nudge - values, 0.0)


def plan_extraction(grid: TetGrid, values: np.ndarray) -> ExtractionPlan:
    """Vectorized case analysis; deterministic edge and face ordering.

    Exact-zero values must already be nudged (see marching_tets).
    """
    vals = np.asarray(values).reshape(-1)
    if vals.shape[0] != grid.n_verts:
        raise ValueError("values must cover every grid vertex")
    v = vals + snap_values(vals)
    inside = v < 0.0
    tet_in = inside[grid.tets]                       # (T, 4)
    case = (tet_in * np.array([1, 2, 4, 8])).sum(axis=1)
    active = (case > 0) & (case < 15)
    if not active.any():
        raise EmptyMeshError("no sign change on the grid")

    tets = grid.tets[active]
    cases = case[active]

    # gather per-active-tet triangles from the case table
    tri_tet, tri_edges = [], []
    for c in range(1, 15):
        rows = np.nonzero(cases == c)[0]
        if rows.size == 0:
            continue
        for tri in _TRI_TABLE[c]:
            tri_tet.append(rows)
            tri_edges.append(np.broadcast_to(np.array(tri), (rows.size, 3)))
    tri_tet = np.concatenate(tri_tet)
    tri_edges = np.concatenate(tri_edges)
    order = np.argsort(tri_tet, kind="stable")
    tri_tet = tri_tet[order]
    tri_edges = tri_edges[order]

    # map (tet, local edge) -> undirected grid edge, negative endpoint first
    corner_pairs = _TET_EDGES[tri_edges]                       # (F, 3, 2)
    va = tets[tri_tet[:, None], corner_pairs[..., 0]]
    vb = tets[tri_tet[:, None], corner_pairs[..., 1]]
    a_inside = inside[va]
    neg = np.where(a_inside, va, vb)
    pos = np.where(a_inside, vb, va)

    key = np.minimum(neg, pos).astype(np.int64) * grid.n_verts + np.maximum(neg, pos)
    uniq, inv = np.unique(key, return_inverse=True)
    faces = inv.reshape(-1, 3)
    first = np.zeros(uniq.size, dtype=np.int64)
    first[inv.reshape(-1)[::-1]] = np.arange(key.size)[::-1]
    edge_a = neg.reshape(-1)[first]
    edge_b = pos.reshape(-1)[first]

    # orient every face outward (normal away from the inside material);
    # this keeps orientation consistent regardless of table ordering
    sa = v[edge_a]
    sb = v[edge_b]
    t = (sb / (sb - sa))[:, None]
    crossings = t * grid.verts[edge_a] + (1.0 - t) * grid.verts[edge_b]
    tv = crossings[faces]
    fnormal = np.cross(tv[:, 1] - tv[:, 0], tv[:, 2] - tv[:, 0])
    tet_v = grid.verts[tets[tri_tet]]
    tet_in = inside[tets[tri_tet]]
    w_in = tet_in / np.maximum(tet_in.sum(1, keepdims=True), 1)
    w_out = ~tet_in / np.maximum((~tet_in).sum(1, keepdims=True), 1)
    outward = np.einsum("fc,fcd->fd", w_out - w_in, tet_v)
    flip = np.einsum("fd,fd->f", fnormal, outward) < 0
    faces[flip] = faces[flip][:, [0, 2, 1]]

    keep = faces[:, 0] != faces[:, 1]
    keep &= faces[:, 1] != faces[:, 2]
    keep &= faces[:, 0] != faces[:, 2]
    return ExtractionPlan(edge_a=edge_a, edge_b=edge_b, faces=faces[keep],
                          n_grid_verts=grid.n_verts)


def interpolate_crossings(plan: ExtractionPlan, s_a, s_b, x_a: np.ndarray,
                          x_b: np.ndarray) -> Tensor:
    """v = (s_b x_a - s_a x_b) / (s_b - s_a), differentiable in s_a, s_b."""
    denom_raw = tape.sub(s_b, s_a)
    tiny = np.abs(denom_raw.numpy()) < 1e-12
    if tiny.any():
        # split evenly: midpoint with no sensitivity to either endpoint
        safe = np.where(tiny, 1.0, denom_raw.numpy())
        denom = tape.add(tape.mul(denom_raw, ~tiny), tiny * safe)
    else:
        denom = denom_raw
    ta = tape.div(s_b, denom)
    tb = tape.div(tape.neg(s_a), denom)
    if tiny.any():
        ta = tape.add(tape.mul(ta, ~tiny), tiny * 0.5)
        tb = tape.add(tape.mul(tb, ~tiny), tiny * 0.5)
    va = tape.mul(tape.reshape(ta, (-1, 1)), x_a)
    vb = tape.mul(tape.reshape(tb, (-1, 1)), x_b)
    return tape.add(va, vb)


def marching_tets(grid: TetGrid, sdf_values) -> Mesh:
    """Extract the zero isosurface; works on plain arrays or tape tensors."""
    values = sdf_values if isinstance(sdf_values, Tensor) else Tensor(np.asarray(sdf_values, dtype=np.float64))
    correction = snap_values(values.numpy())
    if np.any(correction):
        values = tape.add(values, correction)
    plan = plan_extraction(grid, values.numpy())
    s_a = tape.gather(values, plan.edge_a)
    s_b = tape.gather(values, plan.edge_b)
    x_a = grid.verts[plan.edge_a].astype(values.dtype)
    x_b = grid.verts[plan.edge_b].astype(values.dtype)
    verts = interpolate_crossings(plan, s_a, s_b, x_a, x_b)
    return Mesh(verts=verts, faces=plan.faces, canon=verts)


@dataclass
class WatertightReport:
    ok: bool
    boundary_edges: int
    nonmanifold_edges: int
    inconsistent_edges: int
    degenerate_faces: int
    euler_characteristic: int
    messages: list = dfield(default_factory=list)


def validate_watertight(mesh: Mesh, area_tol: float = 1e-18) -> WatertightReport:
    """Edge-manifoldness, orientation, degeneracy and Euler characteristic.

    area_tol separates true vertex coincidence (area rounds to ~0) from the
    honest sliver triangles the zero-value snap produces (area >= ~1e-15).
    """
    faces = mesh.faces
    v = mesh.verts.numpy()
    e = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]], axis=0)
    key = np.minimum(e[:, 0], e[:, 1]).astype(np.int64) * (v.shape[0] + 1) + np.maximum(e[:, 0], e[:, 1])
    uniq, counts = np.unique(key, return_counts=True)
    boundary = int((counts == 1).sum())
    nonmanifold = int((counts > 2).sum())
    # orientation: each directed edge must appear exactly once
    dkey = e[:, 0].astype(np.int64) * (v.shape[0] + 1) + e[:, 1]
    _, dcounts = np.unique(dkey, return_counts=True)
    inconsistent = int((dcounts > 1).sum())
    areas = 0.5 * np.linalg.norm(
        np.cross(v[faces[:, 1]] - v[faces[:, 0]], v[faces[:, 2]] - v[faces[:, 0]]), axis=1)
    degenerate = int((areas <= area_tol).sum())
    used = np.unique(faces)
    euler = int(used.size - uniq.size + faces.shape[0])
    ok = boundary == 0 and nonmanifold == 0 and inconsistent == 0 and degenerate == 0
    msgs = []
    if boundary:
        msgs.append(f"{boundary} boundary edges")
    if nonmanifold:
        msgs.append(f"{nonmanifold} non-manifold edges")
    if inconsistent:
        msgs.append(f"{inconsistent} inconsistently oriented edges")
    if degenerate:
        msgs.append(f"{degenerate} degenerate faces")
    return WatertightReport(ok, boundary, nonmanifold, inconsistent, degenerate, euler, msgs)


def signed_volume(mesh: Mesh) -> float:
    v = mesh.verts.numpy()
    t = v[mesh.faces]
    return float(np.einsum("ij,ij->i", np.cross(t[:, 0], t[:, 1]), t[:, 2]).sum() / 6.0)


def vertex_normals(verts: Tensor, faces: np.ndarray) -> Tensor:
    """Area-weighted per-vertex normals of the (posed) mesh, normalized."""
    n = verts.shape[-2]
    batched = len(verts.shape) == 3
    ax = 1 if batched else 0
    v0 = tape.gather(verts, faces[:, 0], axis=ax)
    v1 = tape.gather(verts, faces[:, 1], axis=ax)
    v2 = tape.gather(verts, faces[:, 2], axis=ax)
    fn = tape.cross3(tape.sub(v1, v0), tape.sub(v2, v0))   # 2x area weighting
    idx = np.concatenate([faces[:, 0], faces[:, 1], faces[:, 2]])
    if batched:
        s = verts.shape[0]
        flat = tape.reshape(tape.transpose(fn, (1, 0, 2)), (faces.shape[0], s * 3))
        contrib = tape.concat([flat, flat, flat], axis=0)
        acc = tape.index_add((n, s * 3), idx, contrib)
        vn = tape.transpose(tape.reshape(acc, (n, s, 3)), (1, 0, 2))
    else:
        contrib = tape.concat([fn, fn, fn], axis=0)
        vn = tape.index_add((n, 3), idx, contrib)
    norm = tape.norm_last(vn, eps=1e-20)
    return tape.div(vn, tape.reshape(norm, norm.shape + (1,)))


def sample_eikonal_points(count: int, seed: int) -> np.ndarray:
    """Uniform random points in the canonical cube, deterministic per seed."""
    rng = np.random.default_rng(seed)
    return rng.uniform(-1.0, 1.0, size=(count, 3))


def eikonal_reg(sdf_field, points) -> Tensor:
    """Mean (||grad s|| - 1)^2 over the sample points."""
    pts = points if isinstance(points, Tensor) else Tensor(np.asarray(points))
    _, g = sdf_field.with_grad(pts)
    gn = tape.norm_last(g)
    return tape.tmean(tape.power(tape.sub(gn, 1.0), 2.0))


def surface_samples(mesh: Mesh, count: int, rng: np.random.Generator) -> np.ndarray:
    """Area-weighted random points on the mesh surface (plain numpy)."""
    v = mesh.verts.numpy() if isinstance(mesh.verts, Tensor) else np.asarray(mesh.verts)
    t = v[mesh.faces]
    areas = 0.5 * np.linalg.norm(np.cross(t[:, 1] - t[:, 0], t[:, 2] - t[:, 0]), axis=1)
    probs = areas / areas.sum()
    pick = rng.choice(len(areas), size=count, p=probs)
    r1 = np.sqrt(rng.uniform(size=count))[:, None]
    r2 = rng.uniform(size=count)[:, None]
    a, b, c = t[pick, 0], t[pick, 1], t[pick, 2]
    return (1 - r1) * a + r1 * (1 - r2) * b + r1 * r2 * c
