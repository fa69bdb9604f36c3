"""NumPy compositing kernels, used when the compiled extension is unavailable.

Same contract as ``_kernels.pyx``: Gaussians are visited in ``order``
(front to back); each is vectorized over the pixels of its bounding box.
"""
from __future__ import annotations

import numpy as np

ALPHA_MAX = 0.99
T_MIN = 1e-4
SUPPORT = 9.0


def _patch(k, bbox, mean2d, conic):
    x0, x1, y0, y1 = bbox[k]
    xs = np.arange(x0, x1 + 1, dtype=np.float64)
    ys = np.arange(y0, y1 + 1, dtype=np.float64)
    dx = xs[None, :] - mean2d[k, 0]
    dy = ys[:, None] - mean2d[k, 1]
    a, b, c = conic[k]
    m2 = a * dx * dx + 2.0 * b * dx * dy + c * dy * dy
    return (slice(y0, y1 + 1), slice(x0, x1 + 1)), dx, dy, m2


def forward(mean2d, conic, opac, colors, depth, bbox, order, bg, width, height):
    rgb = np.zeros((height, width, 3))
    dimg = np.zeros((height, width))
    trans = np.ones((height, width))
    done = np.zeros((height, width), dtype=bool)
    count = np.zeros((height, width), dtype=np.int64)
    for k in order:
        if bbox[k, 0] > bbox[k, 1] or bbox[k, 2] > bbox[k, 3]:
            continue
        sl, dx, dy, m2 = _patch(k, bbox, mean2d, conic)
        alpha = np.minimum(opac[k] * np.exp(-0.5 * m2), ALPHA_MAX)
        hit = (m2 <= SUPPORT) & (alpha > 0) & ~done[sl]
        alpha = np.where(hit, alpha, 0.0)
        t = trans[sl]
        w = alpha * t
        rgb[sl] += w[..., None] * colors[k]
        dimg[sl] += w * depth[k]
        t_new = t * (1.0 - alpha)
        trans[sl] = t_new
        count[sl] += hit
        done[sl] |= hit & (t_new < T_MIN)
    rgb += trans[..., None] * np.asarray(bg, dtype=np.float64)
    return rgb, 1.0 - trans, dimg, count


def backward(mean2d, conic, opac, colors, depth, bbox, order, bg, width, height, grad_rgb, grad_alpha):
    n = len(opac)
    trans = np.ones((height, width))
    done = np.zeros((height, width), dtype=bool)
    saved = []
    for k in order:
        if bbox[k, 0] > bbox[k, 1] or bbox[k, 2] > bbox[k, 3]:
            continue
        sl, dx, dy, m2 = _patch(k, bbox, mean2d, conic)
        gauss = np.exp(-0.5 * m2)
        raw = opac[k] * gauss
        hit = (m2 <= SUPPORT) & (raw > 0) & ~done[sl]
        alpha = np.where(hit, np.minimum(raw, ALPHA_MAX), 0.0)
        t = trans[sl].copy()
        t_new = t * (1.0 - alpha)
        trans[sl] = t_new
        done[sl] |= hit & (t_new < T_MIN)
        saved.append((k, sl, dx, dy, gauss, alpha, t, hit & (raw <= ALPHA_MAX)))

    g_col = np.zeros((n, 3))
    g_op = np.zeros(n)
    g_mean = np.zeros((n, 2))
    g_con = np.zeros((n, 3))
    bg = np.asarray(bg, dtype=np.float64)
    t_final = trans
    suffix = t_final[..., None] * bg
    for k, sl, dx, dy, gauss, alpha, t, free in reversed(saved):
        gr = grad_rgb[sl]
        w = alpha * t
        g_col[k] = np.sum(gr * w[..., None], axis=(0, 1))
        inv = 1.0 / (1.0 - alpha)
        s = suffix[sl]
        g_alpha = np.sum(gr * (colors[k] * t[..., None] - s * inv[..., None]), axis=2)
        g_alpha += grad_alpha[sl] * t_final[sl] * inv
        suffix[sl] = s + w[..., None] * colors[k]
        g_alpha = np.where(free, g_alpha, 0.0)
        g_op[k] = np.sum(g_alpha * gauss)
        g_m2 = g_alpha * (-0.5 * alpha)
        a, b, c = conic[k]
        g_mean[k, 0] = np.sum(g_m2 * (-2.0) * (a * dx + b * dy))
        g_mean[k, 1] = np.sum(g_m2 * (-2.0) * (b * dx + c * dy))
        g_con[k, 0] = np.sum(g_m2 * dx * dx)
        g_con[k, 1] = np.sum(g_m2 * 2.0 * dx * dy)
        g_con[k, 2] = np.sum(g_m2 * dy * dy)
    return g_col, g_op, g_mean, g_con
