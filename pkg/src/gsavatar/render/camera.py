"""Pinhole camera, frames, and the EWA projection of 3D Gaussians."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .. import _rotation as rot
from ..core import RigidTransform

NEAR_PLANE = 0.01
AA_FLOOR = 0.3  # px^2 added to both diagonal entries of the 2D covariance
DET_MIN = 1e-12


@dataclass(frozen=True)
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    world_to_camera: RigidTransform = field(default_factory=RigidTransform.identity)

    def __post_init__(self) -> None:
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 < self.width <= 4096 and 0 < self.height <= 4096):
            raise ValueError(f"image size {self.width}x{self.height} outside (0, 4096]")

    @classmethod
    def look_at(cls, eye, target=(0.0, 0.0, 0.0), up=(0.0, 1.0, 0.0), *, fx, fy=None, width, height,
                cx=None, cy=None) -> "Camera":
        """Camera at ``eye`` looking at ``target`` (x right, y down, z forward)."""
        eye = np.asarray(eye, dtype=np.float64)
        fwd = np.asarray(target, dtype=np.float64) - eye
        fwd /= np.linalg.norm(fwd)
        right = np.cross(fwd, np.asarray(up, dtype=np.float64))
        if np.linalg.norm(right) < 1e-9:
            right = np.cross(fwd, np.array([1.0, 0.0, 0.0]))
        right /= np.linalg.norm(right)
        down = np.cross(fwd, right)
        r = np.stack([right, down, fwd])
        return cls(
            float(fx), float(fy if fy is not None else fx),
            float(cx if cx is not None else width / 2.0),
            float(cy if cy is not None else height / 2.0),
            int(width), int(height),
            RigidTransform.from_matrix(r, -r @ eye),
        )


@dataclass
class Frame:
    rgb: np.ndarray
    alpha: np.ndarray
    depth: Optional[np.ndarray] = None
    skipped: int = 0
    state: object = None

    @property
    def shape(self):
        return self.alpha.shape


@dataclass
class Projection:
    """Per-Gaussian projection results plus what the backward pass needs."""

    visible: np.ndarray
    mean2d: np.ndarray
    cov2d: np.ndarray
    conic: np.ndarray  # (a, b, c) of the inverse 2D covariance
    depth: np.ndarray
    t_cam: np.ndarray
    jac: np.ndarray
    cov_cam: np.ndarray
    rot_mats: np.ndarray
    unit_quats: np.ndarray
    scales: np.ndarray
    skipped: int


def project(positions, rotations, log_scales, cam: Camera) -> Projection:
    positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    n = len(positions)
    w = cam.world_to_camera.matrix
    t = positions @ w.T + cam.world_to_camera.translation
    z = t[:, 2]
    in_front = z > NEAR_PLANE
    zs = np.where(in_front, z, 1.0)
    q = rot.normalize(np.asarray(rotations, dtype=np.float64).reshape(-1, 4))
    rm = rot.to_matrix(q)
    s = np.exp(np.asarray(log_scales, dtype=np.float64).reshape(-1, 3))
    m = rm * s[:, None, :]
    sigma = m @ np.swapaxes(m, 1, 2)
    cov_cam = w[None] @ sigma @ w.T[None]
    jac = np.zeros((n, 2, 3))
    jac[:, 0, 0] = cam.fx / zs
    jac[:, 0, 2] = -cam.fx * t[:, 0] / zs**2
    jac[:, 1, 1] = cam.fy / zs
    jac[:, 1, 2] = -cam.fy * t[:, 1] / zs**2
    cov2d = jac @ cov_cam @ np.swapaxes(jac, 1, 2)
    cov2d[:, 0, 0] += AA_FLOOR
    cov2d[:, 1, 1] += AA_FLOOR
    det = cov2d[:, 0, 0] * cov2d[:, 1, 1] - cov2d[:, 0, 1] * cov2d[:, 1, 0]
    ok_det = det >= DET_MIN
    visible = in_front & ok_det
    safe = np.where(ok_det, det, 1.0)
    conic = np.stack([cov2d[:, 1, 1] / safe, -cov2d[:, 0, 1] / safe, cov2d[:, 0, 0] / safe], axis=1)
    mean2d = np.stack([cam.fx * t[:, 0] / zs + cam.cx, cam.fy * t[:, 1] / zs + cam.cy], axis=1)
    return Projection(
        visible=visible,
        mean2d=mean2d,
        cov2d=cov2d,
        conic=conic,
        depth=z,
        t_cam=t,
        jac=jac,
        cov_cam=cov_cam,
        rot_mats=rm,
        unit_quats=q,
        scales=s,
        skipped=int(np.sum(in_front & ~ok_det)),
    )


def project_gaussian(mean, rotation, scale, cam: Camera):
    """Project one Gaussian; ``scale`` is the decoded (linear) scale.

    Returns ``(mean2d, cov2d, depth)`` or ``None`` when culled.
    """
    p = project(np.asarray(mean)[None], np.asarray(rotation)[None], np.log(np.asarray(scale, dtype=np.float64))[None], cam)
    if p.depth[0] <= NEAR_PLANE:
        return None
    return p.mean2d[0], p.cov2d[0], float(p.depth[0])


def project_vjp(positions, proj: Projection, cam: Camera, g_mean2d: np.ndarray, g_conic: np.ndarray):
    """Chain image-space gradients to world positions, quaternions and log-scales.

    ``g_conic`` is w.r.t. (a, b, c) where the 2D quadratic form is
    ``a dx^2 + 2 b dx dy + c dy^2``. Terms, in order: conic -> cov2d
    (matrix inverse), cov2d -> (J, cov_cam), J and mean2d -> camera point,
    cov_cam -> world covariance -> (rotation, scale) factors.
    """
    n = len(proj.depth)
    vis = proj.visible
    conic = proj.conic
    kmat = np.empty((n, 2, 2))
    kmat[:, 0, 0], kmat[:, 0, 1], kmat[:, 1, 0], kmat[:, 1, 1] = conic[:, 0], conic[:, 1], conic[:, 1], conic[:, 2]
    gk = np.empty((n, 2, 2))
    gk[:, 0, 0] = g_conic[:, 0]
    gk[:, 0, 1] = gk[:, 1, 0] = 0.5 * g_conic[:, 1]
    gk[:, 1, 1] = g_conic[:, 2]
    # d inv(C) : dL/dC = -K G K
    g_cov2d = -kmat @ gk @ kmat
    jt = np.swapaxes(proj.jac, 1, 2)
    g_cov_cam = jt @ g_cov2d @ proj.jac
    g_jac = 2.0 * g_cov2d @ proj.jac @ proj.cov_cam

    t = proj.t_cam
    z = np.where(vis, t[:, 2], 1.0)
    fx, fy = cam.fx, cam.fy
    g_t = np.zeros((n, 3))
    # mean2d = (fx x / z + cx, fy y / z + cy)
    g_t[:, 0] += g_mean2d[:, 0] * fx / z
    g_t[:, 1] += g_mean2d[:, 1] * fy / z
    g_t[:, 2] += -g_mean2d[:, 0] * fx * t[:, 0] / z**2 - g_mean2d[:, 1] * fy * t[:, 1] / z**2
    # J = [[fx/z, 0, -fx x/z^2], [0, fy/z, -fy y/z^2]]
    g_t[:, 0] += -g_jac[:, 0, 2] * fx / z**2
    g_t[:, 1] += -g_jac[:, 1, 2] * fy / z**2
    g_t[:, 2] += (
        -g_jac[:, 0, 0] * fx / z**2
        + g_jac[:, 0, 2] * 2.0 * fx * t[:, 0] / z**3
        - g_jac[:, 1, 1] * fy / z**2
        + g_jac[:, 1, 2] * 2.0 * fy * t[:, 1] / z**3
    )
    w = cam.world_to_camera.matrix
    g_pos = g_t @ w

    g_sigma = w.T[None] @ g_cov_cam @ w[None]
    m = proj.rot_mats * proj.scales[:, None, :]
    g_m = (g_sigma + np.swapaxes(g_sigma, 1, 2)) @ m
    g_rm = g_m * proj.scales[:, None, :]
    g_s = np.sum(g_m * proj.rot_mats, axis=1)
    g_logs = g_s * proj.scales
    g_qhat = rot.to_matrix_vjp(proj.unit_quats, g_rm)
    mask = vis[:, None]
    return g_pos * mask, g_qhat * mask, g_logs * mask


__all__ = [
    "AA_FLOOR",
    "Camera",
    "DET_MIN",
    "Frame",
    "NEAR_PLANE",
    "Projection",
    "project",
    "project_gaussian",
    "project_vjp",
]
