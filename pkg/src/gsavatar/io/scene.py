"""Deterministic synthetic scenes for tests, benchmarks and the CLI."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from .. import _rotation as rot
from ..control import ControlConfig
from ..core import GaussianSet, RigidTransform
from ..fields import ResidualFieldBank
from ..render import Camera
from ..train.stage2 import Avatar, Observation, render_observation

MOUTH_CENTER = np.array([0.0, -0.16, 0.30])


def fibonacci_sphere(n: int) -> np.ndarray:
    i = np.arange(n) + 0.5
    phi = np.arccos(1 - 2 * i / n)
    theta = np.pi * (1 + 5**0.5) * i
    return np.stack([np.cos(theta) * np.sin(phi), np.sin(theta) * np.sin(phi), np.cos(phi)], axis=1)


def ring_cameras(n_views: int = 4, size: int = 64, distance: float = 2.2, spread_deg: float = 80.0,
                 fx: Optional[float] = None) -> List[Camera]:
    """Cameras on an arc in front of the subject (+z), looking at the origin."""
    fx = fx if fx is not None else 1.45 * size
    if n_views == 1:
        angles = np.zeros(1)
    else:
        angles = np.radians(np.linspace(-spread_deg / 2, spread_deg / 2, n_views))
    return [
        Camera.look_at((distance * np.sin(a), 0.0, distance * np.cos(a)), (0, 0, 0), (0, -1, 0),
                       fx=fx, width=size, height=size)
        for a in angles
    ]


@dataclass
class SyntheticScene:
    kind: str
    avatar: Avatar
    observations: List[Observation]
    cameras: List[Camera]
    thetas: np.ndarray
    control: ControlConfig = field(default_factory=ControlConfig)


def blendshape_head(n: int = 200, n_mouth: Optional[int] = None, d_feat: int = 16, d_exp: int = 32,
                    seed: int = 0) -> Avatar:
    """Ellipsoidal head whose mouth patch is driven by the first expression coefficient."""
    if n_mouth is None:
        n_mouth = min(40, n // 5)
    rng = np.random.default_rng(seed)
    radii = np.array([0.30, 0.36, 0.32])
    head = fibonacci_sphere(n - n_mouth) * radii
    # mouth patch: a disc on the front of the head, tangent to the surface
    ang = rng.uniform(0, 2 * np.pi, n_mouth)
    rad = 0.085 * np.sqrt(rng.uniform(0, 1, n_mouth))
    mouth = MOUTH_CENTER + np.stack([rad * np.cos(ang), 0.6 * rad * np.sin(ang), np.zeros(n_mouth)], axis=1)
    pos = np.concatenate([head, mouth])
    feats = rng.normal(0.0, 1.0, (n, d_feat))
    quats = rot.normalize(rng.normal(0.0, 1.0, (n, 4)))
    log_s = np.log(np.concatenate([np.full((n - n_mouth, 3), 0.05), np.full((n_mouth, 3), 0.022)]))
    log_s = log_s + rng.normal(0.0, 0.1, (n, 3))
    opac = np.full(n, 2.0)
    g = GaussianSet(pos, feats, quats, log_s, opac)

    bank = ResidualFieldBank.linear_blend(n, d_feat, d_exp, rng=rng, std=0.004)
    p = bank.params()
    proj = rng.normal(0.0, 0.7, (3, d_feat)) / np.sqrt(d_feat) * 2.0
    p["field.color.exp.input_proj"] = proj
    p["field.color.pose.input_proj"] = np.zeros_like(proj)
    w = p["field.def.exp.weights"].copy()
    fall = np.exp(-np.sum((pos - MOUTH_CENTER) ** 2, axis=1) / (2 * 0.06**2))
    w[:, :, 0] += fall[:, None] * np.array([0.0, 0.55, 0.08])  # +y is down in camera space
    p["field.def.exp.weights"] = w
    cw = p["field.color.exp.weights"].copy()
    cw[:, :, 0] += fall[:, None] * np.array([1.2, -0.6, -0.6])
    p["field.color.exp.weights"] = cw
    return Avatar(g, bank.with_params(p))


def expression_sequence(n_frames: int, d_exp: int = 32, seed: int = 0) -> np.ndarray:
    """Jaw coefficient sweeps 0..0.9 so mouth displacements straddle 0.3."""
    rng = np.random.default_rng(seed + 1)
    th = rng.normal(0.0, 0.3, (n_frames, d_exp))
    th[:, 0] = np.linspace(0.0, 0.9, n_frames)
    return th


def make_head_scene(n: int = 200, n_frames: int = 6, n_views: int = 4, size: int = 64, seed: int = 0,
                    ctl: Optional[ControlConfig] = None) -> SyntheticScene:
    ctl = ctl or ControlConfig(split_enabled=False)
    avatar = blendshape_head(n, seed=seed)
    cams = ring_cameras(n_views, size)
    thetas = expression_sequence(n_frames, avatar.bank.d_exp, seed)
    obs = []
    for th in thetas:
        beta = np.zeros(6)
        for cam in cams:
            o = Observation(th, beta, RigidTransform.identity(), cam, np.zeros((size, size, 3)))
            frame = render_observation(avatar, o, ctl)[0]
            obs.append(Observation(th, beta, o.transform, cam, frame.rgb, frame.alpha))
    return SyntheticScene("blendshape-head", avatar, obs, cams, thetas, ctl)


def perturb_avatar(avatar: Avatar, seed: int = 0, pos_std: float = 0.004, color_std: float = 0.5,
                   scale_std: float = 0.1) -> Avatar:
    """Initialization for self-reconstruction: nearby geometry, scrambled appearance."""
    rng = np.random.default_rng(seed + 100)
    p = avatar.params()
    p["gauss.positions"] = p["gauss.positions"] + rng.normal(0, pos_std, p["gauss.positions"].shape)
    p["gauss.log_scales"] = p["gauss.log_scales"] + rng.normal(0, scale_std, p["gauss.log_scales"].shape)
    for k in ("field.color.exp.input_proj", "field.color.exp.weights"):
        p[k] = p[k] + rng.normal(0, color_std, p[k].shape) * (0.3 if k.endswith("weights") else 1.0)
    return avatar.with_params(p)


@dataclass
class SphereScene:
    """Translated-sphere case for the geometry stage."""

    init: "SdfGrid"
    truth: "SdfGrid"
    prior: "TriangleMesh"
    observations: List[Observation]
    offset: np.ndarray


SPHERE_COLOR_LOGITS = np.array([1.2, -0.4, 0.3])


def _colored_sphere(radius, center, resolution, d_eta=8, textured=False):
    from ..geometry import SdfGrid, sphere_sdf

    g = SdfGrid.from_function(sphere_sdf(radius, center), resolution, d_eta)
    if textured:
        rel = g.lattice_points() - np.asarray(center, dtype=np.float64)
        g.eta[..., :3] = (3.0 * rel).reshape(g.s.shape + (3,))
    else:
        g.eta[..., :3] = SPHERE_COLOR_LOGITS
    return g


def make_sphere_scene(seed: int = 0, resolution: int = 20, size: int = 24, radius: float = 0.22,
                      offset=(0.0, 0.0, 0.2), n_views: int = 1, init_jitter: float = 0.005,
                      stage1_cfg=None) -> SphereScene:
    """Images and prior show a sphere at ``offset``; the initial lattice holds it at the origin.

    With the default single frontal view the offset lies along the optical axis,
    which silhouettes and colors constrain only weakly.
    """
    from ..geometry import extract_surface
    from ..train.stage1 import GeometryModel, Stage1Config, render_geometry

    rng = np.random.default_rng(seed)
    off = np.asarray(offset, dtype=np.float64)
    truth = _colored_sphere(radius, off, resolution)
    prior = extract_surface(truth)
    # the seed jitters the starting sphere slightly
    init = _colored_sphere(radius + rng.normal(0.0, init_jitter), rng.normal(0.0, init_jitter, 3), resolution)
    cfg = stage1_cfg or Stage1Config()
    model = GeometryModel.create(truth, 32)
    obs = []
    for cam in ring_cameras(n_views, size, spread_deg=60.0):
        o = Observation(np.zeros(32), np.zeros(6), RigidTransform.identity(), cam, np.zeros((size, size, 3)))
        frame = render_geometry(model, o, cfg)[0]
        obs.append(Observation(o.theta, o.beta, o.transform, cam, frame.rgb, frame.alpha))
    return SphereScene(init, truth, prior, obs, off)
