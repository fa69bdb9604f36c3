"""PSNR and windowed SSIM (with an analytic gradient for the patch proxy)."""
from __future__ import annotations

import numpy as np
from scipy.ndimage import correlate1d

PSNR_CAP = 99.0
SSIM_K1 = 0.01
SSIM_K2 = 0.03
SSIM_SIGMA = 1.5
SSIM_RADIUS = 5  # 11x11 window


def _as_array(x) -> np.ndarray:
    rgb = getattr(x, "rgb", x)
    return np.asarray(rgb, dtype=np.float64)


def psnr(a, b) -> float:
    a, b = _as_array(a), _as_array(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(1.0 / mse))


def _kernel() -> np.ndarray:
    x = np.arange(-SSIM_RADIUS, SSIM_RADIUS + 1, dtype=np.float64)
    k = np.exp(-(x * x) / (2.0 * SSIM_SIGMA**2))
    return k / k.sum()


_KERNEL = _kernel()


def _valid(img: np.ndarray) -> np.ndarray:
    """Separable 'valid' correlation over the first two axes."""
    r = SSIM_RADIUS
    out = correlate1d(img, _KERNEL, axis=0, mode="constant")[r:-r]
    return correlate1d(out, _KERNEL, axis=1, mode="constant")[:, r:-r]


def _valid_adjoint(g: np.ndarray) -> np.ndarray:
    r = 2 * SSIM_RADIUS
    pad = [(r, r), (r, r)] + [(0, 0)] * (g.ndim - 2)
    return _valid(np.pad(g, pad))


def _channels(x: np.ndarray) -> np.ndarray:
    return x[..., None] if x.ndim == 2 else x


def ssim_with_grad(a, b):
    """Mean SSIM over valid window positions and channels, and d SSIM / d a."""
    a, b = _channels(_as_array(a)), _channels(_as_array(b))
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    win = 2 * SSIM_RADIUS + 1
    if min(a.shape[:2]) < win:
        raise ValueError(f"frame {a.shape[:2]} smaller than the {win}x{win} window")
    c1 = (SSIM_K1 * 1.0) ** 2
    c2 = (SSIM_K2 * 1.0) ** 2
    mu_a, mu_b = _valid(a), _valid(b)
    e_aa, e_bb, e_ab = _valid(a * a), _valid(b * b), _valid(a * b)
    var_a = e_aa - mu_a**2
    var_b = e_bb - mu_b**2
    cov = e_ab - mu_a * mu_b
    a1 = 2 * mu_a * mu_b + c1
    a2 = 2 * cov + c2
    b1 = mu_a**2 + mu_b**2 + c1
    b2 = var_a + var_b + c2
    smap = (a1 * a2) / (b1 * b2)
    value = float(smap.mean())

    scale = 1.0 / smap.size
    d_mu = smap * (2 * mu_b / a1 - 2 * mu_a / b1 - 2 * mu_b / a2 + 2 * mu_a / b2) * scale
    d_eaa = -smap / b2 * scale
    d_eab = 2 * smap / a2 * scale
    grad = _valid_adjoint(d_mu) + 2 * a * _valid_adjoint(d_eaa) + b * _valid_adjoint(d_eab)
    return value, grad


def ssim(a, b) -> float:
    return ssim_with_grad(a, b)[0]


__all__ = ["PSNR_CAP", "psnr", "ssim", "ssim_with_grad"]
