"""Stage I: fit an SDF lattice (and a coarse deformation) to multi-view images.

Each step extracts the surface, deforms its vertices with RBF fields driven by
expression and pose, places one isotropic Gaussian per vertex (color from the
first three vertex features) and renders. Every loss gradient reaches the
lattice through the vertex position's dependence on the two SDF samples of
its edge.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import scipy.sparse as sp

from ..core import WorldGaussians
from ..fields import POSE_DIM, RBFField
from ..geometry import (
    GeometryError,
    IcpConfig,
    SdfGrid,
    TriangleMesh,
    eikonal_loss,
    extract_surface,
    icp_align,
    landmark_loss,
    laplacian_loss,
    lattice_points,
    mesh_alignment_loss,
    nearest_vertices,
    surface_vjp,
)
from ..render import rasterize, rasterize_backward
from .adam import AdamState, OptimConfig, adam_step
from .losses import LossWeights, image_terms, offset_loss, weighted_total
from .stage2 import FitError, Observation
from .trace import FitTrace, TraceRow


@dataclass(frozen=True)
class Stage1Config:
    iterations: int = 300
    weights: LossWeights = field(default_factory=LossWeights.stage1)
    optim: OptimConfig = field(default_factory=OptimConfig)
    icp: bool = True
    icp_config: IcpConfig = field(default_factory=IcpConfig)
    gaussian_scale: float = 0.6  # isotropic std as a fraction of the lattice spacing
    opacity: float = 0.95
    rbf_per_axis: int = 4
    rbf_bandwidth: float = 0.25
    sdf_basis: int = 8  # coarse control lattice per axis, trilinearly upsampled; 0 disables
    sdf_fine: bool = True  # also optimize a full-resolution residual
    lap_target: str = "offsets"  # "offsets" (deformation Laplacian) or "surface"
    remesh_every: int = 1
    # exponential learning-rate decay: the last step runs at this fraction
    lr_final_fraction: float = 1.0
    background: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    log_every: int = 1
    seed: int = 0
    backend: Optional[str] = None


def upsample_matrix(resolution: int, coarse: int) -> sp.csr_matrix:
    """Trilinear interpolation from a ``coarse``^3 lattice to ``resolution``^3 (same box)."""
    x = np.linspace(0.0, coarse - 1.0, resolution)
    i0 = np.minimum(np.floor(x).astype(np.int64), coarse - 2)
    f = x - i0
    rows = np.concatenate([np.arange(resolution)] * 2)
    a = sp.csr_matrix((np.concatenate([1.0 - f, f]), (rows, np.concatenate([i0, i0 + 1]))),
                      shape=(resolution, coarse))
    return sp.kron(sp.kron(a, a), a).tocsr()


@dataclass
class GeometryModel:
    """SDF as ``base + U @ coarse (+ fine)`` plus vertex features and RBF deformation."""

    base: np.ndarray
    eta: np.ndarray
    def_exp: RBFField
    def_pose: RBFField
    coarse: Optional[np.ndarray] = None
    fine: Optional[np.ndarray] = None
    upsample: Optional[sp.csr_matrix] = None
    lo: float = -0.5
    hi: float = 0.5

    @classmethod
    def create(cls, grid: SdfGrid, d_exp: int = 32, per_axis: int = 4, bandwidth: float = 0.25,
               sdf_basis: int = 0, sdf_fine: bool = True) -> "GeometryModel":
        centers = lattice_points(per_axis, grid.lo, grid.hi)
        k = len(centers)
        coarse = up = None
        if sdf_basis:
            if sdf_basis < 2:
                raise ValueError("sdf_basis must be 0 or >= 2")
            coarse = np.zeros(sdf_basis**3)
            up = upsample_matrix(grid.resolution, sdf_basis)
        fine = np.zeros_like(grid.s) if (sdf_fine or not sdf_basis) else None
        return cls(grid.s.copy(), grid.eta.copy(), RBFField(centers, bandwidth, np.zeros((k, 3, d_exp))),
                   RBFField(centers, bandwidth, np.zeros((k, 3, POSE_DIM))), coarse, fine, up, grid.lo, grid.hi)

    @property
    def spacing(self) -> float:
        return (self.hi - self.lo) / (self.base.shape[0] - 1)

    @property
    def grid(self) -> SdfGrid:
        s = self.base
        if self.coarse is not None:
            s = s + (self.upsample @ self.coarse).reshape(s.shape)
        if self.fine is not None:
            s = s + self.fine
        return SdfGrid(s, self.eta, self.lo, self.hi)

    def params(self) -> Dict[str, np.ndarray]:
        p = {
            "s1.grid.eta": self.eta,
            "s1.def.exp.weights": self.def_exp.weights,
            "s1.def.pose.weights": self.def_pose.weights,
        }
        if self.coarse is not None:
            p["s1.grid.coarse"] = self.coarse
        if self.fine is not None:
            p["s1.grid.s"] = self.fine
        return p

    def with_params(self, p: Dict[str, np.ndarray]) -> "GeometryModel":
        return GeometryModel(
            self.base, p["s1.grid.eta"],
            self.def_exp.replace(weights=p["s1.def.exp.weights"]),
            self.def_pose.replace(weights=p["s1.def.pose.weights"]),
            p.get("s1.grid.coarse", self.coarse), p.get("s1.grid.s", self.fine), self.upsample, self.lo, self.hi,
        )

    def grid_grads(self, g_s: np.ndarray) -> Dict[str, np.ndarray]:
        out = {}
        if self.coarse is not None:
            out["s1.grid.coarse"] = self.upsample.T @ g_s.reshape(-1)
        if self.fine is not None:
            out["s1.grid.s"] = g_s
        return out


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def vertex_colors(mesh: TriangleMesh) -> np.ndarray:
    f = mesh.features
    if f is None or f.shape[1] < 3:
        return np.full((len(mesh.vertices), 3), 0.5)
    return _sigmoid(f[:, :3])


def vertex_gaussians(points: np.ndarray, mesh: TriangleMesh, spacing: float, cfg: Stage1Config) -> WorldGaussians:
    n = len(points)
    rots = np.tile([1.0, 0.0, 0.0, 0.0], (n, 1))
    ls = np.full((n, 3), np.log(cfg.gaussian_scale * spacing))
    logit = np.full(n, np.log(cfg.opacity / (1.0 - cfg.opacity)))
    return WorldGaussians(points, vertex_colors(mesh), rots, ls, logit)


def render_geometry(model: GeometryModel, obs: Observation, cfg: Stage1Config, mesh: Optional[TriangleMesh] = None):
    mesh = mesh if mesh is not None else extract_surface(model.grid)
    v = mesh.vertices
    local = v + model.def_exp.evaluate(v, obs.theta) + model.def_pose.evaluate(v, obs.beta)
    world = vertex_gaussians(obs.transform.apply(local), mesh, model.spacing, cfg)
    frame = rasterize(world, world.colors, obs.camera, cfg.background, backend=cfg.backend)
    return frame, world, mesh, local


def stage1_loss_and_grad(model: GeometryModel, obs: Observation, cfg: Stage1Config,
                         prior: Optional[TriangleMesh] = None, mesh: Optional[TriangleMesh] = None):
    """Unweighted terms and gradients (keyed like :meth:`GeometryModel.params`)."""
    w = cfg.weights
    grid = model.grid
    mesh = mesh if mesh is not None else extract_surface(grid)
    if len(mesh.vertices) == 0:
        raise FitError("the SDF has no zero crossing")
    frame, world, mesh, local = render_geometry(model, obs, cfg, mesh)
    terms, g_rgb, g_alpha = image_terms(frame, obs.rgb, obs.mask, w)
    rg = rasterize_backward(world, world.colors, obs.camera, cfg.background, g_rgb, g_alpha, state=frame.state)
    v = mesh.vertices
    g_local = rg.positions @ obs.transform.matrix
    col = world.colors
    g_feat = np.zeros_like(mesh.features)
    if g_feat.shape[1] >= 3:
        g_feat[:, :3] = rg.colors * col * (1.0 - col)

    o_exp = model.def_exp.evaluate(v, obs.theta)
    o_pose = model.def_pose.evaluate(v, obs.beta)
    g_off_exp = np.zeros_like(v)
    g_off_pose = np.zeros_like(v)
    if w.offset:
        terms["offset"], (ge, gp) = offset_loss(o_exp, o_pose)
        g_off_exp += w.offset * ge
        g_off_pose += w.offset * gp
    if w.lmk and obs.landmarks is not None and len(obs.landmarks):
        idx = nearest_vertices(TriangleMesh(local, mesh.triangles), obs.landmarks)
        terms["lmk"], gl = landmark_loss(local[idx], obs.landmarks)
        np.add.at(g_local, idx, w.lmk * gl)

    g_v = g_local.copy()
    if w.lap and cfg.lap_target == "offsets":
        # change of Laplacian coordinates under deformation: L(x_def) - L(x_can) = L(offsets)
        terms["lap"], gl = laplacian_loss(TriangleMesh(o_exp + o_pose, mesh.triangles))
        g_off_exp += w.lap * gl
        g_off_pose += w.lap * gl
    elif w.lap:
        terms["lap"], gl = laplacian_loss(mesh)
        g_v += w.lap * gl
    fe = model.def_exp.vjp(v, obs.theta, g_local + g_off_exp)
    fp = model.def_pose.vjp(v, obs.beta, g_local + g_off_pose)
    g_v += fe.inputs + fp.inputs
    if w.mesh and prior is not None:
        terms["mesh"], gm = mesh_alignment_loss(prior, mesh)
        g_v += w.mesh * gm
    g_s, g_eta = surface_vjp(grid, mesh, g_v, g_feat)
    if w.eik:
        terms["eik"], ge = eikonal_loss(grid)
        g_s = g_s + w.eik * ge
    grads = {
        "s1.grid.eta": g_eta,
        "s1.def.exp.weights": fe.params["weights"],
        "s1.def.pose.weights": fp.params["weights"],
        **model.grid_grads(g_s),
    }
    return terms, grads, frame, mesh


def fit_stage1(grid: SdfGrid, prior: Optional[TriangleMesh], observations: Sequence[Observation],
               cfg: Optional[Stage1Config] = None, d_exp: Optional[int] = None, callback=None):
    """Returns ``(model, mesh, trace)``; ``model.grid`` is the optimized lattice.

    Zero iterations return the input lattice and its surface with an empty trace.

    With ``cfg.icp`` the prior is rigidly aligned to the initial extracted
    surface once, before the first step. ``callback(it, model, mesh)`` runs
    after every step.
    """
    cfg = cfg or Stage1Config()
    if not observations:
        raise FitError("no observations")
    d_exp = d_exp or len(observations[0].theta)
    if cfg.lap_target not in ("offsets", "surface"):
        raise ValueError(f"unknown lap_target {cfg.lap_target!r}")
    model = GeometryModel.create(grid, d_exp, cfg.rbf_per_axis, cfg.rbf_bandwidth, cfg.sdf_basis, cfg.sdf_fine)
    trace = FitTrace("stage1")
    if prior is not None and cfg.icp:
        init_mesh = extract_surface(model.grid)
        if len(init_mesh.vertices) == 0:
            raise FitError("the SDF has no zero crossing")
        try:
            t, rms = icp_align(prior, init_mesh, cfg.icp_config)
        except GeometryError as e:
            raise FitError(f"prior alignment failed: {e}") from e
        prior = prior.transformed(t)
        trace.info["icp_rms"] = rms
    rng = np.random.default_rng(cfg.seed)
    state = AdamState()
    start = time.perf_counter()
    order: List[int] = []
    mesh = extract_surface(model.grid)
    for it in range(cfg.iterations):
        if not order:
            order = list(rng.permutation(len(observations)))
        obs = observations[order.pop(0)]
        terms, grads, _, mesh = stage1_loss_and_grad(model, obs, cfg, prior, mesh)
        total = weighted_total(terms, cfg.weights)
        if not np.isfinite(total):
            raise FitError(f"non-finite loss at iteration {it}")
        scale = cfg.lr_final_fraction ** (it / max(cfg.iterations - 1, 1))
        params, state = adam_step(model.params(), grads, state, cfg.optim, scale)
        model = model.with_params(params)
        if (it + 1) % max(cfg.remesh_every, 1) == 0:
            mesh = extract_surface(model.grid)
        if it == cfg.iterations - 1 or it % max(cfg.log_every, 1) == 0:
            trace.append(TraceRow(it, total, terms, len(mesh.vertices), 0, None, time.perf_counter() - start))
        if callback is not None:
            callback(it, model, mesh)
    mesh = extract_surface(model.grid)
    return model, mesh, trace


__all__ = [
    "GeometryModel",
    "upsample_matrix",
    "Stage1Config",
    "fit_stage1",
    "render_geometry",
    "stage1_loss_and_grad",
    "vertex_colors",
    "vertex_gaussians",
]
