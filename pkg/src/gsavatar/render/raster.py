"""Front-to-back Gaussian splatting and its analytic backward pass.

Per pixel (integer pixel coordinates, pixel ``(row, col)`` samples
``(x=col, y=row)``), visible Gaussians are visited in ascending camera depth
with index tie-break. Each contributes ``alpha = min(0.99, o * exp(-m2 / 2))``
when its Mahalanobis square ``m2 <= 9`` (the 3-sigma footprint), and
compositing stops once transmittance drops below 1e-4.

The compiled kernel is used when importable; ``GSAVATAR_BACKEND=python``
forces the NumPy fallback. ``GSAVATAR_WORKERS`` sets the thread count for the
compiled path; rows are processed in fixed bands whose partial gradients are
reduced in band order, so results do not depend on the worker count.
"""
from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .. import _rotation as rot
from . import _kernels_py
from .camera import Camera, Frame, Projection, project, project_vjp

try:
    from . import _kernels as _ext
except ImportError:  # pragma: no cover - exercised only without a build
    _ext = None

BAND_ROWS = 16


def available_backends():
    return ["python"] + (["compiled"] if _ext is not None else [])


def default_backend() -> str:
    env = os.environ.get("GSAVATAR_BACKEND", "").strip().lower()
    if env in ("python", "numpy"):
        return "python"
    if env == "compiled" and _ext is None:
        raise RuntimeError("GSAVATAR_BACKEND=compiled but the extension is not built")
    return "compiled" if _ext is not None else "python"


def _workers() -> int:
    try:
        return max(1, int(os.environ.get("GSAVATAR_WORKERS", "1")))
    except ValueError:
        return 1


@dataclass
class RenderState:
    n: int
    width: int
    height: int
    proj: Projection
    order: np.ndarray
    bbox: np.ndarray
    opac: np.ndarray
    colors: np.ndarray
    bg: np.ndarray
    backend: str


@dataclass
class RasterGrads:
    colors: np.ndarray
    opacity_logits: np.ndarray
    positions: np.ndarray
    rotations: np.ndarray
    log_scales: np.ndarray
    mean2d: np.ndarray
    conic: np.ndarray


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


def _bboxes(proj: Projection, width: int, height: int) -> np.ndarray:
    """Integer pixel boxes covering the m2 <= 9 ellipse, widened by one pixel."""
    ext_x = 3.0 * np.sqrt(np.maximum(proj.cov2d[:, 0, 0], 0.0))
    ext_y = 3.0 * np.sqrt(np.maximum(proj.cov2d[:, 1, 1], 0.0))
    mx, my = proj.mean2d[:, 0], proj.mean2d[:, 1]
    with np.errstate(invalid="ignore"):
        x0 = np.floor(mx - ext_x) - 1
        x1 = np.ceil(mx + ext_x) + 1
        y0 = np.floor(my - ext_y) - 1
        y1 = np.ceil(my + ext_y) + 1
    box = np.stack([
        np.clip(x0, 0, width), np.clip(x1, -1, width - 1),
        np.clip(y0, 0, height), np.clip(y1, -1, height - 1),
    ], axis=1)
    box = np.where(np.isfinite(box), box, -1)
    box[~proj.visible] = [1, 0, 1, 0]
    return box.astype(np.int64)


def _prepare(gaussians, colors, cam: Camera, background, backend: Optional[str]) -> RenderState:
    backend = backend or default_backend()
    pos = np.asarray(gaussians.positions, dtype=np.float64)
    n = len(pos)
    col = np.ascontiguousarray(colors if colors is not None else gaussians.colors, dtype=np.float64).reshape(n, 3)
    if len(gaussians.opacity_logits) != n or len(gaussians.rotations) != n or len(gaussians.log_scales) != n:
        raise ValueError("Gaussian arrays are not aligned")
    proj = project(pos, gaussians.rotations, gaussians.log_scales, cam)
    vis = np.flatnonzero(proj.visible)
    order = vis[np.lexsort((vis, proj.depth[vis]))].astype(np.int64)
    bbox = _bboxes(proj, cam.width, cam.height)
    opac = _sigmoid(gaussians.opacity_logits)
    bg = np.asarray(background, dtype=np.float64).reshape(3)
    return RenderState(n, cam.width, cam.height, proj, order, bbox, opac, col, bg, backend)


def _bands(height: int):
    return [(r, min(r + BAND_ROWS, height)) for r in range(0, height, BAND_ROWS)]


def rasterize(gaussians, colors, cam: Camera, background=(0.0, 0.0, 0.0), backend: Optional[str] = None) -> Frame:
    st = _prepare(gaussians, colors, cam, background, backend)
    h, w = cam.height, cam.width
    p = st.proj
    mean2d = np.ascontiguousarray(p.mean2d)
    conic = np.ascontiguousarray(p.conic)
    depth = np.ascontiguousarray(p.depth)
    if st.backend == "python":
        rgb, alpha, dimg, _ = _kernels_py.forward(mean2d, conic, st.opac, st.colors, depth, st.bbox,
                                                  st.order, st.bg, w, h)
    else:
        rgb = np.zeros((h, w, 3))
        alpha = np.zeros((h, w))
        dimg = np.zeros((h, w))
        count = np.zeros((h, w), dtype=np.int64)

        def run(band):
            _ext.forward_rows(mean2d, conic, st.opac, st.colors, depth, st.bbox, st.order, st.bg,
                              w, band[0], band[1], rgb, alpha, dimg, count)

        bands = _bands(h)
        nw = _workers()
        if nw > 1:
            with ThreadPoolExecutor(nw) as pool:
                list(pool.map(run, bands))
        else:
            for band in bands:
                run(band)
    return Frame(rgb, alpha, dimg, skipped=p.skipped, state=st)


def _image_grads(st: RenderState, grad_rgb, grad_alpha):
    h, w = st.height, st.width
    p = st.proj
    mean2d = np.ascontiguousarray(p.mean2d)
    conic = np.ascontiguousarray(p.conic)
    if st.backend == "python":
        return _kernels_py.backward(mean2d, conic, st.opac, st.colors, p.depth, st.bbox, st.order, st.bg,
                                    w, h, grad_rgb, grad_alpha)
    n = st.n
    bands = _bands(h)

    def run(band):
        out = (np.zeros((n, 3)), np.zeros(n), np.zeros((n, 2)), np.zeros((n, 3)))
        _ext.backward_rows(mean2d, conic, st.opac, st.colors, st.bbox, st.order, st.bg, w,
                           band[0], band[1], grad_rgb, grad_alpha, *out)
        return out

    nw = _workers()
    if nw > 1:
        with ThreadPoolExecutor(nw) as pool:
            parts = list(pool.map(run, bands))
    else:
        parts = [run(b) for b in bands]
    total = [np.zeros_like(a) for a in parts[0]]
    for part in parts:  # fixed band order
        for acc, a in zip(total, part):
            acc += a
    return tuple(total)


def rasterize_backward(
    gaussians,
    colors,
    cam: Camera,
    background=(0.0, 0.0, 0.0),
    grad_rgb: Optional[np.ndarray] = None,
    grad_alpha: Optional[np.ndarray] = None,
    state: Optional[RenderState] = None,
    backend: Optional[str] = None,
) -> RasterGrads:
    """Gradients of a scalar loss given d loss / d rgb and d loss / d alpha.

    ``state`` (``frame.state`` from :func:`rasterize`) skips re-projection;
    it must come from the same inputs.
    """
    h, w = cam.height, cam.width
    if state is None:
        state = _prepare(gaussians, colors, cam, background, backend)
    elif state.n != len(gaussians.positions) or (state.width, state.height) != (w, h):
        raise ValueError("saved render state does not match the inputs")
    grad_rgb = np.zeros((h, w, 3)) if grad_rgb is None else np.ascontiguousarray(grad_rgb, dtype=np.float64)
    grad_alpha = np.zeros((h, w)) if grad_alpha is None else np.ascontiguousarray(grad_alpha, dtype=np.float64)
    if grad_rgb.shape != (h, w, 3) or grad_alpha.shape != (h, w):
        raise ValueError("image gradient shapes do not match the camera")
    g_col, g_op, g_mean, g_con = _image_grads(state, grad_rgb, grad_alpha)
    g_logit = g_op * state.opac * (1.0 - state.opac)
    g_pos, g_qhat, g_logs = project_vjp(gaussians.positions, state.proj, cam, g_mean, g_con)
    g_quat = rot.normalize_vjp(np.asarray(gaussians.rotations, dtype=np.float64), g_qhat)
    return RasterGrads(g_col, g_logit, g_pos, g_quat, g_logs, g_mean, g_con)


def composite_reference(gaussians, colors, cam: Camera, background=(0.0, 0.0, 0.0)) -> Frame:
    """Brute-force per-pixel evaluation of every Gaussian in full depth order.

    No bounding boxes, no visibility ordering shortcuts: every projected
    Gaussian is evaluated at every pixel with plain Python loops. Only for
    tiny scenes.
    """
    pos = np.asarray(gaussians.positions, dtype=np.float64)
    proj = project(pos, gaussians.rotations, gaussians.log_scales, cam)
    opac = _sigmoid(gaussians.opacity_logits)
    col = np.asarray(colors if colors is not None else gaussians.colors, dtype=np.float64)
    idx = [i for i in range(len(pos)) if proj.visible[i]]
    idx.sort(key=lambda i: (proj.depth[i], i))
    bg = np.asarray(background, dtype=np.float64)
    rgb = np.zeros((cam.height, cam.width, 3))
    alpha = np.zeros((cam.height, cam.width))
    for y in range(cam.height):
        for x in range(cam.width):
            t = 1.0
            acc = np.zeros(3)
            for i in idx:
                cov = proj.cov2d[i]
                d = np.array([x - proj.mean2d[i, 0], y - proj.mean2d[i, 1]])
                m2 = float(d @ np.linalg.solve(cov, d))
                if m2 > _kernels_py.SUPPORT:
                    continue
                a = min(opac[i] * np.exp(-0.5 * m2), _kernels_py.ALPHA_MAX)
                if a <= 0:
                    continue
                acc += a * t * col[i]
                t *= 1.0 - a
                if t < _kernels_py.T_MIN:
                    break
            rgb[y, x] = acc + t * bg
            alpha[y, x] = 1.0 - t
    return Frame(rgb, alpha)


__all__ = [
    "BAND_ROWS",
    "RasterGrads",
    "RenderState",
    "available_backends",
    "composite_reference",
    "default_backend",
    "rasterize",
    "rasterize_backward",
]
