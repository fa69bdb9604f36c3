"""Image-space losses on rendered frames."""
from __future__ import annotations

import numpy as np


def silhouette_loss(frame_alpha: np.ndarray, mask: np.ndarray):
    """Mean absolute difference between the alpha channel and a binary mask."""
    a = np.asarray(frame_alpha, dtype=np.float64)
    m = np.asarray(mask, dtype=np.float64)
    if a.shape != m.shape:
        raise ValueError(f"shape mismatch: alpha {a.shape} vs mask {m.shape}")
    diff = a - m
    return float(np.abs(diff).mean()), np.sign(diff) / diff.size
