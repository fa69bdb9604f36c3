"""Per-frame driver tracks as CSV: frame, theta_*, beta_*, T (quaternion wxyz, translation)."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import List

import numpy as np

from ..core import RigidTransform

T_COLUMNS = ["t_qw", "t_qx", "t_qy", "t_qz", "t_x", "t_y", "t_z"]


@dataclass
class Track:
    frames: List[int]
    theta: np.ndarray  # (F, d_exp)
    beta: np.ndarray  # (F, 6)
    transforms: List[RigidTransform]

    def __len__(self) -> int:
        return len(self.frames)


def write_track(track: Track, path) -> None:
    d_exp = track.theta.shape[1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["frame"] + [f"theta_{i}" for i in range(d_exp)] + [f"beta_{i}" for i in range(6)] + T_COLUMNS)
        for f, th, be, t in zip(track.frames, track.theta, track.beta, track.transforms):
            vals = list(th) + list(be) + list(t.rotation) + list(t.translation)
            w.writerow([f] + [repr(float(v)) for v in vals])


def read_track(path) -> Track:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError(f"{path}: empty track file")
    head = rows[0]
    if head[0] != "frame" or head[-7:] != T_COLUMNS:
        raise ValueError(f"{path}:1: unexpected header")
    n_theta = sum(1 for h in head if h.startswith("theta_"))
    n_beta = sum(1 for h in head if h.startswith("beta_"))
    if n_beta != 6:
        raise ValueError(f"{path}:1: expected 6 beta columns, found {n_beta}")
    frames, th, be, ts = [], [], [], []
    for lineno, r in enumerate(rows[1:], 2):
        if len(r) != len(head):
            raise ValueError(f"{path}:{lineno}: expected {len(head)} fields, got {len(r)}")
        try:
            vals = [float(x) for x in r[1:]]
            frames.append(int(r[0]))
        except ValueError:
            raise ValueError(f"{path}:{lineno}: non-numeric field") from None
        th.append(vals[:n_theta])
        be.append(vals[n_theta:n_theta + 6])
        q, t = vals[n_theta + 6:n_theta + 10], vals[n_theta + 10:]
        ts.append(RigidTransform(np.asarray(q), np.asarray(t)))
    return Track(frames, np.asarray(th).reshape(len(frames), n_theta), np.asarray(be).reshape(len(frames), 6), ts)
