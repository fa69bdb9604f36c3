"""Photometric, silhouette and regularization losses with their image gradients."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Tuple

import numpy as np

from ..render.losses import silhouette_loss
from .metrics import ssim_with_grad


@dataclass(frozen=True)
class LossWeights:
    rgb: float = 1.0
    sil: float = 0.1
    offset: float = 0.01
    lmk: float = 0.1
    lap: float = 100.0
    mesh: float = 1.0
    perc: float = 0.1
    eik: float = 0.1  # lattice regularity; stands in for the smoothness of a network SDF

    def __post_init__(self) -> None:
        for k, v in self.__dict__.items():
            if v < 0:
                raise ValueError(f"loss weight {k} must be non-negative")

    @classmethod
    def stage1(cls, **kw) -> "LossWeights":
        return cls(**{"perc": 0.0, **kw})

    @classmethod
    def stage2(cls, **kw) -> "LossWeights":
        base = dict(rgb=1.0, sil=0.0, offset=0.0, lmk=0.0, lap=0.0, mesh=0.0, perc=0.1, eik=0.0)
        return cls(**{**base, **kw})


def rgb_loss(pred: np.ndarray, target: np.ndarray) -> Tuple[float, np.ndarray]:
    """Mean absolute error and its (sub)gradient; sign(0) = 0."""
    diff = np.asarray(pred, dtype=np.float64) - np.asarray(target, dtype=np.float64)
    if diff.size == 0:
        raise ValueError("empty image")
    return float(np.mean(np.abs(diff))), np.sign(diff) / diff.size


def offset_loss(*offsets: np.ndarray) -> Tuple[float, list]:
    """Mean squared norm of residual offsets, summed over the given fields."""
    total = 0.0
    grads = []
    for o in offsets:
        o = np.asarray(o, dtype=np.float64)
        n = max(len(o), 1)
        total += float(np.sum(o * o)) / n
        grads.append(2.0 * o / n)
    return total, grads


def patch_boxes(height: int, width: int, size: int, count: int, rng: np.random.Generator):
    """``count`` square patches of side ``min(size, H, W)`` at seeded offsets."""
    ph, pw = min(size, height), min(size, width)
    ys = rng.integers(0, height - ph + 1, size=count)
    xs = rng.integers(0, width - pw + 1, size=count)
    return [(int(y), int(x), ph, pw) for y, x in zip(ys, xs)]


def perceptual_proxy(pred: np.ndarray, target: np.ndarray, boxes) -> Tuple[float, np.ndarray]:
    """Mean of (1 - SSIM) over patches; stands in for the learned perceptual term."""
    grad = np.zeros_like(pred, dtype=np.float64)
    total = 0.0
    uniq = {}
    for b in boxes:
        uniq[b] = uniq.get(b, 0) + 1
    for (y, x, h, w), mult in uniq.items():
        v, g = ssim_with_grad(pred[y:y + h, x:x + w], target[y:y + h, x:x + w])
        total += mult * (1.0 - v)
        grad[y:y + h, x:x + w] -= mult * g.reshape(grad[y:y + h, x:x + w].shape)
    k = max(len(boxes), 1)
    return total / k, grad / k


def image_terms(frame, target_rgb, target_mask, w: LossWeights, boxes=()) -> Tuple[Dict[str, float], np.ndarray, np.ndarray]:
    """Weighted image losses; returns (unweighted terms, d/d rgb, d/d alpha)."""
    terms: Dict[str, float] = {}
    g_rgb = np.zeros_like(frame.rgb)
    g_alpha = np.zeros_like(frame.alpha)
    if w.rgb:
        terms["rgb"], g = rgb_loss(frame.rgb, target_rgb)
        g_rgb += w.rgb * g
    if w.sil and target_mask is not None:
        terms["sil"], g = silhouette_loss(frame.alpha, target_mask)
        g_alpha += w.sil * g
    if w.perc and len(boxes):
        terms["perc"], g = perceptual_proxy(frame.rgb, target_rgb, boxes)
        g_rgb += w.perc * g
    return terms, g_rgb, g_alpha


def weighted_total(terms: Dict[str, float], w: LossWeights) -> float:
    return float(sum(getattr(w, k) * v for k, v in sorted(terms.items())))


__all__ = [
    "LossWeights",
    "image_terms",
    "offset_loss",
    "patch_boxes",
    "perceptual_proxy",
    "rgb_loss",
    "silhouette_loss",
    "weighted_total",
]
