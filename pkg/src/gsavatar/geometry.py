"""Tetrahedral SDF lattice, marching tetrahedra, ICP and the mesh losses.

Lattice convention: vertex ``(i, j, k)`` sits at ``lo + (i, j, k) * h`` with
``h = (hi - lo) / (R - 1)``. Each cube cell is cut into six tetrahedra that
all share the cell diagonal from local corner (0,0,0) to (1,1,1); tetrahedron
``p`` walks from (0,0,0) to (1,1,1) along the axes in the order given by the
``p``-th permutation of (x, y, z). Neighbouring cells use the same diagonal
direction, so the decomposition is conforming.
"""
from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass
from functools import lru_cache
from typing import Optional, Tuple

import numpy as np
import scipy.sparse as sp
from scipy.spatial import cKDTree

from . import _rotation as rot
from .core import RigidTransform

log = logging.getLogger(__name__)

PERMUTATIONS: Tuple[Tuple[int, int, int], ...] = tuple(itertools.permutations(range(3)))


class GeometryError(ValueError):
    pass


@dataclass
class SdfGrid:
    s: np.ndarray
    eta: Optional[np.ndarray] = None
    lo: float = -0.5
    hi: float = 0.5

    def __post_init__(self) -> None:
        self.s = np.asarray(self.s, dtype=np.float64)
        if self.s.ndim != 3 or len(set(self.s.shape)) != 1 or self.s.shape[0] < 2:
            raise GeometryError(f"s must be a cubic R^3 array with R >= 2, got {self.s.shape}")
        if not np.all(np.isfinite(self.s)):
            raise GeometryError("non-finite SDF values")
        if self.eta is None:
            self.eta = np.zeros(self.s.shape + (0,))
        self.eta = np.asarray(self.eta, dtype=np.float64)
        if self.eta.shape[:3] != self.s.shape:
            raise GeometryError("eta must share the lattice shape")

    @property
    def resolution(self) -> int:
        return self.s.shape[0]

    @property
    def spacing(self) -> float:
        return (self.hi - self.lo) / (self.resolution - 1)

    @property
    def cell_diagonal(self) -> float:
        return self.spacing * np.sqrt(3.0)

    def lattice_points(self) -> np.ndarray:
        return lattice_points(self.resolution, self.lo, self.hi)

    @classmethod
    def from_function(cls, fn, resolution: int = 32, d_eta: int = 8, lo: float = -0.5, hi: float = 0.5):
        pts = lattice_points(resolution, lo, hi)
        s = np.asarray(fn(pts), dtype=np.float64).reshape((resolution,) * 3)
        return cls(s, np.zeros((resolution,) * 3 + (d_eta,)), lo, hi)

    def copy(self) -> "SdfGrid":
        return SdfGrid(self.s.copy(), self.eta.copy(), self.lo, self.hi)


def lattice_points(resolution: int, lo: float = -0.5, hi: float = 0.5) -> np.ndarray:
    ax = np.linspace(lo, hi, resolution)
    g = np.stack(np.meshgrid(ax, ax, ax, indexing="ij"), axis=-1)
    return g.reshape(-1, 3)


def sphere_sdf(radius: float = 0.5, center=(0.0, 0.0, 0.0)):
    c = np.asarray(center, dtype=np.float64)
    return lambda p: np.linalg.norm(p - c, axis=-1) - radius


def tet_volumes_total(resolution: int, lo: float = -0.5, hi: float = 0.5) -> float:
    """Sum of absolute tetrahedron volumes of the decomposition."""
    pts = lattice_points(resolution, lo, hi)
    tets = tetrahedra(resolution)
    a, b, c, d = (pts[tets[:, k]] for k in range(4))
    vol = np.abs(np.einsum("ij,ij->i", b - a, np.cross(c - a, d - a))) / 6.0
    return float(vol.sum())


@lru_cache(maxsize=8)
def tetrahedra(resolution: int) -> np.ndarray:
    """(6 * (R-1)^3, 4) flat lattice indices, cell-major then permutation order."""
    r = resolution
    ii, jj, kk = np.meshgrid(np.arange(r - 1), np.arange(r - 1), np.arange(r - 1), indexing="ij")
    base = np.stack([ii.ravel(), jj.ravel(), kk.ravel()], axis=1)
    out = np.empty((len(base), 6, 4), dtype=np.int64)
    for p, perm in enumerate(PERMUTATIONS):
        corner = base.copy()
        out[:, p, 0] = _flat(corner, r)
        for step in range(3):
            corner = corner.copy()
            corner[:, perm[step]] += 1
            out[:, p, step + 1] = _flat(corner, r)
    out.setflags(write=False)
    return out.reshape(-1, 4)


def _flat(ijk: np.ndarray, r: int) -> np.ndarray:
    return (ijk[..., 0] * r + ijk[..., 1]) * r + ijk[..., 2]


def locate(grid: SdfGrid, x: np.ndarray):
    """Containing cell, tetrahedron permutation and barycentric weights."""
    x = np.asarray(x, dtype=np.float64)
    tol = 1e-12 * max(1.0, grid.hi - grid.lo)
    if np.any(x < grid.lo - tol) or np.any(x > grid.hi + tol):
        raise GeometryError(f"point {x.tolist()} outside grid bounds [{grid.lo}, {grid.hi}]")
    u = (x - grid.lo) / grid.spacing
    cell = np.clip(np.floor(u).astype(np.int64), 0, grid.resolution - 2)
    local = np.clip(u - cell, 0.0, 1.0)
    order = tuple(int(a) for a in np.argsort(-local, kind="stable"))
    return cell, order, tet_barycentric(local, order)


def tet_barycentric(local: np.ndarray, perm) -> np.ndarray:
    a, b, c = (local[perm[0]], local[perm[1]], local[perm[2]])
    return np.array([1.0 - a, a - b, b - c, c])


def _tet_vertices(cell: np.ndarray, perm, r: int) -> np.ndarray:
    corner = cell.copy()
    ids = [_flat(corner, r)]
    for step in range(3):
        corner = corner.copy()
        corner[perm[step]] += 1
        ids.append(_flat(corner, r))
    return np.array(ids)


def sdf_eval(grid: SdfGrid, x: np.ndarray, perm=None):
    """Barycentric interpolation of (s, eta) inside the containing tetrahedron.

    Passing ``perm`` evaluates with that tetrahedron of the containing cell,
    which only makes sense for points on its closure (e.g. a shared face).
    """
    cell, order, bary = locate(grid, x)
    if perm is not None:
        u = (np.asarray(x, dtype=np.float64) - grid.lo) / grid.spacing - cell
        order = tuple(perm)
        bary = tet_barycentric(u, order)
        if np.any(bary < -1e-9):
            raise GeometryError(f"point not in tetrahedron {order} of cell {cell.tolist()}")
    ids = _tet_vertices(cell, order, grid.resolution)
    s = float(bary @ grid.s.reshape(-1)[ids])
    eta = bary @ grid.eta.reshape(grid.s.size, grid.eta.shape[-1])[ids]
    return s, eta


@dataclass
class TriangleMesh:
    vertices: np.ndarray
    triangles: np.ndarray
    edges: Optional[np.ndarray] = None  # lattice vertex pair per vertex, when extracted
    features: Optional[np.ndarray] = None

    def __post_init__(self) -> None:
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)

    def __len__(self) -> int:
        return len(self.vertices)

    def validate(self) -> "TriangleMesh":
        m = len(self.vertices)
        if self.triangles.size and (self.triangles.min() < 0 or self.triangles.max() >= m):
            raise GeometryError("triangle index out of range")
        if not np.all(np.isfinite(self.vertices)):
            raise GeometryError("non-finite vertices")
        if self.triangles.size and np.any(triangle_areas(self) <= 1e-12):
            raise GeometryError("degenerate triangle")
        return self

    def edge_counts(self) -> dict:
        t = self.triangles
        e = np.sort(np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]]), axis=1)
        keys, counts = np.unique(e, axis=0, return_counts=True)
        return {tuple(k): int(c) for k, c in zip(keys, counts)}

    def is_watertight(self) -> bool:
        if not len(self.triangles):
            return False
        return all(c == 2 for c in self.edge_counts().values())

    def translated(self, offset) -> "TriangleMesh":
        return TriangleMesh(self.vertices + np.asarray(offset, dtype=np.float64), self.triangles.copy())

    def transformed(self, t: RigidTransform) -> "TriangleMesh":
        return TriangleMesh(t.apply(self.vertices), self.triangles.copy())


def triangle_areas(mesh: TriangleMesh) -> np.ndarray:
    v = mesh.vertices[mesh.triangles]
    return 0.5 * np.linalg.norm(np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]), axis=1)


def surface_centroid(mesh: TriangleMesh) -> np.ndarray:
    """Area-weighted centroid of the surface; insensitive to how it is tessellated."""
    a = triangle_areas(mesh)
    if a.sum() <= 0:
        raise GeometryError("mesh has no area")
    mid = mesh.vertices[mesh.triangles].mean(axis=1)
    return (a[:, None] * mid).sum(axis=0) / a.sum()


# Local triangle tables: for each inside/outside pattern, triangles as pairs
# (inside corner, outside corner) of tetrahedron corners.
def _case_triangles(inside: Tuple[int, ...]):
    outside = tuple(k for k in range(4) if k not in inside)
    if len(inside) == 1:
        a = inside[0]
        return [[(a, outside[0]), (a, outside[1]), (a, outside[2])]]
    if len(inside) == 3:
        d = outside[0]
        return [[(inside[0], d), (inside[1], d), (inside[2], d)]]
    a, b = inside
    c, d = outside
    return [[(a, c), (a, d), (b, d)], [(a, c), (b, d), (b, c)]]


def extract_surface(grid: SdfGrid) -> TriangleMesh:
    """Marching tetrahedra; zero crossings at ``v_a + s_a / (s_a - s_b) * (v_b - v_a)``.

    Inside is ``s < 0``. Triangles are wound so their normals point toward
    positive ``s``. Degenerate triangles (area <= 1e-12, from exact zeros on
    lattice vertices) are dropped along with vertices no triangle uses.
    """
    r = grid.resolution
    s = grid.s.reshape(-1)
    pts = grid.lattice_points()
    tets = tetrahedra(r)
    inside = s[tets] < 0
    n_in = inside.sum(axis=1)
    active = (n_in > 0) & (n_in < 4)
    tets = tets[active]
    inside = inside[active]
    if not len(tets):
        return TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64), np.zeros((0, 2), dtype=np.int64),
                            np.zeros((0, grid.eta.shape[-1])))

    code = inside @ np.array([1, 2, 4, 8])
    tri_a, tri_b, tri_src = [], [], []
    for c in np.unique(code):
        rows = np.flatnonzero(code == c)
        ins = tuple(k for k in range(4) if (int(c) >> k) & 1)
        for tri in _case_triangles(ins):
            tri_a.append(np.stack([tets[rows, p[0]] for p in tri], axis=1))
            tri_b.append(np.stack([tets[rows, p[1]] for p in tri], axis=1))
            tri_src.append(rows)
    ea = np.concatenate(tri_a)  # inside lattice vertex per triangle corner
    eb = np.concatenate(tri_b)  # outside lattice vertex
    src = np.concatenate(tri_src)
    # stable global order: by source tetrahedron then emission
    order = np.argsort(src, kind="stable")
    ea, eb, src = ea[order], eb[order], src[order]

    lo_id = np.minimum(ea, eb)
    hi_id = np.maximum(ea, eb)
    keys = lo_id * (r ** 3) + hi_id
    uniq, inv = np.unique(keys.ravel(), return_inverse=True)
    faces = inv.reshape(-1, 3)
    edges = np.stack([uniq // (r ** 3), uniq % (r ** 3)], axis=1)
    verts, feats = _crossings(grid, edges, pts, s)

    # orient toward positive s: outside-minus-inside direction of the source tet
    tv = tets[src]
    tin = inside[src]
    p = pts[tv]
    w_in = tin / tin.sum(axis=1, keepdims=True)
    w_out = (~tin) / (~tin).sum(axis=1, keepdims=True)
    direction = np.einsum("nk,nkd->nd", w_out, p) - np.einsum("nk,nkd->nd", w_in, p)
    fv = verts[faces]
    normal = np.cross(fv[:, 1] - fv[:, 0], fv[:, 2] - fv[:, 0])
    flip = np.einsum("nd,nd->n", normal, direction) < 0
    faces[flip] = faces[flip][:, [0, 2, 1]]

    area = 0.5 * np.linalg.norm(normal, axis=1)
    faces = faces[area > 1e-12]
    used = np.unique(faces)
    remap = np.full(len(verts), -1, dtype=np.int64)
    remap[used] = np.arange(len(used))
    return TriangleMesh(verts[used], remap[faces], edges[used], feats[used])


def _crossings(grid: SdfGrid, edges: np.ndarray, pts: np.ndarray, s: np.ndarray):
    sa, sb = s[edges[:, 0]], s[edges[:, 1]]
    t = sa / (sa - sb)
    va, vb = pts[edges[:, 0]], pts[edges[:, 1]]
    eta = grid.eta.reshape(len(s), grid.eta.shape[-1])
    feats = eta[edges[:, 0]] + t[:, None] * (eta[edges[:, 1]] - eta[edges[:, 0]])
    return va + t[:, None] * (vb - va), feats


def surface_vertex_partials(grid: SdfGrid, mesh: TriangleMesh):
    """d vertex / d s_a and d vertex / d s_b for every extracted vertex (each (M, 3))."""
    pts = grid.lattice_points()
    s = grid.s.reshape(-1)
    a, b = mesh.edges[:, 0], mesh.edges[:, 1]
    sa, sb = s[a], s[b]
    den = (sa - sb) ** 2
    dv = pts[b] - pts[a]
    return (-sb / den)[:, None] * dv, (sa / den)[:, None] * dv


def surface_vjp(
    grid: SdfGrid,
    mesh: TriangleMesh,
    grad_vertices: np.ndarray,
    grad_features: Optional[np.ndarray] = None,
):
    """Pull vertex (and optional feature) gradients back to lattice s and eta."""
    s = grid.s.reshape(-1)
    pts = grid.lattice_points()
    a, b = mesh.edges[:, 0], mesh.edges[:, 1]
    sa, sb = s[a], s[b]
    den = (sa - sb) ** 2
    g_t = np.einsum("md,md->m", grad_vertices, pts[b] - pts[a])
    d_eta = grid.eta.shape[-1]
    g_eta = np.zeros((len(s), d_eta))
    if grad_features is not None and d_eta:
        eta = grid.eta.reshape(len(s), d_eta)
        g_t = g_t + np.einsum("md,md->m", grad_features, eta[b] - eta[a])
        t = sa / (sa - sb)
        np.add.at(g_eta, a, (1.0 - t)[:, None] * grad_features)
        np.add.at(g_eta, b, t[:, None] * grad_features)
    g_s = np.zeros(len(s))
    np.add.at(g_s, a, g_t * (-sb / den))
    np.add.at(g_s, b, g_t * (sa / den))
    return g_s.reshape(grid.s.shape), g_eta.reshape(grid.eta.shape)


def mesh_center_scale(mesh) -> Tuple[np.ndarray, float]:
    v = mesh.vertices if isinstance(mesh, TriangleMesh) else np.asarray(mesh, dtype=np.float64)
    if len(v) == 0:
        raise GeometryError("empty mesh")
    c = v.mean(axis=0)
    return c, float(np.linalg.norm(v - c, axis=1).mean())


def mesh_alignment_loss(prior, pred):
    """Center/scale alignment loss and its gradient w.r.t. predicted vertices."""
    c_p, s_p = mesh_center_scale(prior)
    v = pred.vertices if isinstance(pred, TriangleMesh) else np.asarray(pred, dtype=np.float64)
    c, s = mesh_center_scale(v)
    m = len(v)
    dc = c - c_p
    ds = s - s_p
    loss = float(dc @ dc + ds * ds)
    rel = v - c
    norms = np.linalg.norm(rel, axis=1, keepdims=True)
    unit = np.divide(rel, norms, out=np.zeros_like(rel), where=norms > 0)
    # d s / d v_k = (u_k - mean_j u_j) / M ; d c / d v_k = I / M
    grad = (2.0 * dc[None, :] + 2.0 * ds * (unit - unit.mean(axis=0))) / m
    return loss, grad


@dataclass
class IcpConfig:
    max_iters: int = 50
    tol: float = 1e-6
    trim_fraction: float = 0.0


def _kabsch(src: np.ndarray, dst: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    cs, cd = src.mean(axis=0), dst.mean(axis=0)
    h = (src - cs).T @ (dst - cd)
    u, _, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(vt.T @ u.T))
    if d == 0:
        d = 1.0
    r = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    return r, cd - r @ cs


def icp_align(source, target, cfg: Optional[IcpConfig] = None) -> Tuple[RigidTransform, float]:
    """Rigid point-to-point ICP mapping ``source`` vertices onto ``target``."""
    cfg = cfg or IcpConfig()
    src = source.vertices if isinstance(source, TriangleMesh) else np.asarray(source, dtype=np.float64)
    dst = target.vertices if isinstance(target, TriangleMesh) else np.asarray(target, dtype=np.float64)
    if len(src) == 0 or len(dst) == 0:
        raise GeometryError("empty point cloud")
    centered = src - src.mean(axis=0)
    sv = np.linalg.svd(centered, compute_uv=False) if len(src) >= 2 else np.zeros(1)
    if len(src) < 3 or sv.size < 2 or sv[1] <= 1e-9 * max(sv[0], 1e-300):
        raise GeometryError("degenerate configuration: source points are colinear")
    tree = cKDTree(dst)
    r_acc = np.eye(3)
    t_acc = dst.mean(axis=0) - src.mean(axis=0)
    prev = np.inf
    rms = np.inf
    for _ in range(cfg.max_iters):
        moved = src @ r_acc.T + t_acc
        dist, nn = tree.query(moved)
        keep = np.arange(len(src))
        if cfg.trim_fraction > 0:
            n_keep = max(3, int(round(len(src) * (1.0 - cfg.trim_fraction))))
            keep = np.argsort(dist, kind="stable")[:n_keep]
        rms = float(np.sqrt(np.mean(dist[keep] ** 2)))
        if abs(prev - rms) < cfg.tol:
            break
        prev = rms
        r, t = _kabsch(moved[keep], dst[nn[keep]])
        r_acc = r @ r_acc
        t_acc = r @ t_acc + t
    rms = _residual(tree, src @ r_acc.T + t_acc, cfg)
    # never worse than leaving the source where it is; an already aligned
    # source then comes back untouched rather than off by rounding noise
    rms_id = _residual(tree, src, cfg)
    if rms_id <= rms:
        return RigidTransform.identity(), rms_id
    return RigidTransform(rot.from_matrix(r_acc), t_acc), rms


def _residual(tree, moved: np.ndarray, cfg: IcpConfig) -> float:
    dist, _ = tree.query(moved)
    if cfg.trim_fraction > 0:
        n_keep = max(3, int(round(len(moved) * (1.0 - cfg.trim_fraction))))
        dist = np.sort(dist)[:n_keep]
    return float(np.sqrt(np.mean(dist ** 2)))


def vertex_adjacency(mesh: TriangleMesh) -> sp.csr_matrix:
    t = mesh.triangles
    m = len(mesh.vertices)
    i = np.concatenate([t[:, 0], t[:, 1], t[:, 2], t[:, 1], t[:, 2], t[:, 0]])
    j = np.concatenate([t[:, 1], t[:, 2], t[:, 0], t[:, 0], t[:, 1], t[:, 2]])
    a = sp.coo_matrix((np.ones(len(i)), (i, j)), shape=(m, m)).tocsr()
    a.data[:] = 1.0
    return a


def uniform_laplacian(mesh: TriangleMesh) -> Tuple[sp.csr_matrix, np.ndarray]:
    """Operator with rows ``mean(neighbors) - v``; rows of isolated vertices are zero."""
    a = vertex_adjacency(mesh)
    deg = np.asarray(a.sum(axis=1)).ravel()
    isolated = np.flatnonzero(deg == 0)
    inv = np.divide(1.0, deg, out=np.zeros_like(deg), where=deg > 0)
    lap = sp.diags(inv) @ a - sp.diags((deg > 0).astype(np.float64))
    return lap.tocsr(), isolated


def laplacian_loss(mesh: TriangleMesh, subset: Optional[np.ndarray] = None):
    """Mean squared uniform-Laplacian magnitude and its vertex gradient.

    ``subset`` restricts the mean to those vertices (their neighbors still
    enter through the operator).
    """
    if len(mesh.vertices) == 0:
        raise GeometryError("empty mesh")
    lap, isolated = uniform_laplacian(mesh)
    if isolated.size:
        log.warning("laplacian_loss: %d vertices have no neighbors and contribute zero", isolated.size)
    if subset is not None:
        lap = lap[np.asarray(subset)]
    delta = lap @ mesh.vertices
    k = delta.shape[0]
    loss = float(np.sum(delta * delta) / k)
    grad = (2.0 / k) * (lap.T @ delta)
    return loss, np.asarray(grad)


def eikonal_loss(grid: SdfGrid):
    """Mean of (|grad s| - 1)^2 over lattice cells (forward differences) and d/ds.

    Keeps the lattice close to a distance field so edits near the surface do
    not open spurious zero crossings elsewhere.
    """
    s, h = grid.s, grid.spacing
    base = s[:-1, :-1, :-1]
    gx = (s[1:, :-1, :-1] - base) / h
    gy = (s[:-1, 1:, :-1] - base) / h
    gz = (s[:-1, :-1, 1:] - base) / h
    norm = np.sqrt(gx * gx + gy * gy + gz * gz)
    m = norm.size
    r = norm - 1.0
    loss = float(np.sum(r * r) / m)
    c = np.divide(2.0 * r / m, norm, out=np.zeros_like(norm), where=norm > 0) / h
    ax, ay, az = c * gx, c * gy, c * gz
    grad = np.zeros_like(s)
    grad[1:, :-1, :-1] += ax
    grad[:-1, 1:, :-1] += ay
    grad[:-1, :-1, 1:] += az
    grad[:-1, :-1, :-1] -= ax + ay + az
    return loss, grad


def landmark_loss(pred_points: np.ndarray, target_points: np.ndarray):
    p = np.asarray(pred_points, dtype=np.float64).reshape(-1, 3)
    t = np.asarray(target_points, dtype=np.float64).reshape(-1, 3)
    if p.shape != t.shape:
        raise GeometryError(f"landmark count mismatch: {len(p)} vs {len(t)}")
    if len(p) == 0:
        raise GeometryError("no landmarks")
    diff = p - t
    return float(np.sum(diff * diff) / len(p)), 2.0 * diff / len(p)


def nearest_vertices(mesh: TriangleMesh, points: np.ndarray) -> np.ndarray:
    """Index of the mesh vertex closest to each query point."""
    return cKDTree(mesh.vertices).query(np.asarray(points, dtype=np.float64))[1]


__all__ = [
    "GeometryError",
    "IcpConfig",
    "PERMUTATIONS",
    "SdfGrid",
    "TriangleMesh",
    "eikonal_loss",
    "extract_surface",
    "icp_align",
    "landmark_loss",
    "laplacian_loss",
    "lattice_points",
    "locate",
    "mesh_alignment_loss",
    "mesh_center_scale",
    "nearest_vertices",
    "sdf_eval",
    "sphere_sdf",
    "surface_centroid",
    "surface_vertex_partials",
    "surface_vjp",
    "tet_volumes_total",
    "tetrahedra",
    "triangle_areas",
    "uniform_laplacian",
    "vertex_adjacency",
]
