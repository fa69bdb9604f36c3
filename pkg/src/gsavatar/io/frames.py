"""Frame files: 8-bit PNG for viewing, 32-bit float NPY for metrics."""
from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image


def to_uint8(img: np.ndarray) -> np.ndarray:
    """Clamp to [0, 1], scale by 255 and round half away from zero."""
    x = np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0) * 255.0
    return np.floor(x + 0.5).astype(np.uint8)  # values are >= 0, so this is half-away-from-zero


def save_png(img: np.ndarray, path) -> None:
    a = to_uint8(img)
    Image.fromarray(a, mode="RGB" if a.ndim == 3 else "L").save(path, format="PNG")


def load_png(path) -> np.ndarray:
    with Image.open(path) as im:
        a = np.asarray(im.convert("RGB") if im.mode not in ("L", "RGB") else im)
    return a.astype(np.float64) / 255.0


def save_frame(img: np.ndarray, path) -> None:
    np.save(path, np.asarray(img, dtype="<f4"), allow_pickle=False)


def load_frame(path) -> np.ndarray:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"frame not found: {path}")
    if p.suffix.lower() == ".png":
        return load_png(p)
    return np.load(p, allow_pickle=False).astype(np.float64)


def list_frames(directory):
    """Frame files in a directory, NPY preferred over PNG with the same stem."""
    d = Path(directory)
    if not d.is_dir():
        raise FileNotFoundError(f"directory not found: {directory}")
    by_stem = {}
    for p in sorted(d.iterdir()):
        ext = p.suffix.lower()
        if ext == ".npy" or (ext == ".png" and p.stem not in by_stem):
            by_stem[p.stem] = p
    return [by_stem[k] for k in sorted(by_stem)]
