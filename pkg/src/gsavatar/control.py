"""Controllable Gaussians: control selection, radius propagation, splitting."""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np


class ControlError(ValueError):
    pass


class SplitCapExceeded(ControlError):
    pass


@dataclass(frozen=True)
class ControlConfig:
    tau_control: float = 0.3
    tau_split: float = 0.2
    radius_r: float = 0.05
    sigma: Optional[float] = None  # defaults to radius_r / 2
    n_max: int = 100_000
    split_epsilon: float = 0.25
    split_scale_factor: float = 0.8
    control_enabled: bool = True
    split_enabled: bool = True
    split_every: int = 500

    def __post_init__(self) -> None:
        if self.sigma is None:
            object.__setattr__(self, "sigma", self.radius_r / 2.0)
        if self.tau_control <= 0 or self.tau_split <= 0:
            raise ControlError("thresholds must be positive")
        if self.radius_r <= 0 or self.sigma <= 0:
            raise ControlError("radius_r and sigma must be positive")
        if not 0 < self.split_scale_factor <= 1:
            raise ControlError("split_scale_factor must lie in (0, 1]")
        if self.n_max < 1 or self.split_every < 1:
            raise ControlError("n_max and split_every must be >= 1")

    def replace(self, **kw) -> "ControlConfig":
        if "radius_r" in kw and "sigma" not in kw:
            kw["sigma"] = None
        return dataclasses.replace(self, **kw)


def displacement_magnitudes(positions: np.ndarray, theta: np.ndarray, bank) -> np.ndarray:
    """Norm of the expression-driven position residual per Gaussian.

    The pose residual is deliberately left out.
    """
    theta = np.asarray(theta, dtype=np.float64)
    f = bank[("def", "exp")]
    if f.driver_dim != theta.shape[0]:
        raise ControlError(f"expression dim {theta.shape[0]} != field driver dim {f.driver_dim}")
    if f.count is not None and f.count != len(positions):
        raise ControlError(f"field rows {f.count} != Gaussian count {len(positions)}")
    return np.linalg.norm(f.evaluate(np.asarray(positions, dtype=np.float64), theta), axis=1)


def select_controls(delta: np.ndarray, tau: float) -> np.ndarray:
    delta = np.asarray(delta, dtype=np.float64)
    return np.flatnonzero(delta > tau)


class SpatialIndex:
    """Uniform hash grid; ``cell`` is normally the query radius.

    Points are kept sorted by a linearized cell key, so the cells around many
    query points resolve with two ``searchsorted`` calls instead of dict probes.
    """

    def __init__(self, positions: np.ndarray, cell: float):
        self.positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
        self.cell = float(cell)
        self._keys = np.floor(self.positions / self.cell).astype(np.int64)
        self._cells: Optional[Dict[tuple, np.ndarray]] = None

    @property
    def cells(self) -> Dict[tuple, np.ndarray]:
        """Cell key -> ascending point indices (built on first use)."""
        if self._cells is None:
            self._cells = {}
            keys = self._keys
            order = np.lexsort(keys.T[::-1])
            if len(order):
                breaks = np.flatnonzero(np.any(np.diff(keys[order], axis=0) != 0, axis=1)) + 1
                for chunk in np.split(order, breaks):
                    # plain-int keys hash much faster than tuples of numpy scalars
                    self._cells[tuple(keys[chunk[0]].tolist())] = np.sort(chunk)
        return self._cells

    def candidates(self, point: np.ndarray, radius: float) -> np.ndarray:
        """Indices in every cell overlapping the box around ``point``, ascending."""
        lo = np.floor((np.asarray(point) - radius) / self.cell).astype(np.int64).tolist()
        hi = np.floor((np.asarray(point) + radius) / self.cell).astype(np.int64).tolist()
        get = self.cells.get
        found = [hit for i in range(lo[0], hi[0] + 1) for j in range(lo[1], hi[1] + 1)
                 for k in range(lo[2], hi[2] + 1) if (hit := get((i, j, k))) is not None]
        if not found:
            return np.empty(0, dtype=np.int64)
        return np.sort(np.concatenate(found)) if len(found) > 1 else found[0]

    def query_ball(self, point: np.ndarray, radius: float) -> np.ndarray:
        """Indices strictly closer than ``radius``, ascending."""
        cand = self.candidates(point, radius)
        diff = self.positions[cand] - point
        return cand[np.einsum("ij,ij->i", diff, diff) < radius * radius]

    def pairs_within(self, centers: np.ndarray, radius: float):
        """All ``(row, point)`` with ``|x_point - x_centers[row]| < radius``, sorted by row then point."""
        centers = np.asarray(centers, dtype=np.int64)
        if len(centers) == 0 or len(self.positions) == 0:
            return np.empty(0, dtype=np.int64), np.empty(0, dtype=np.int64)
        m = max(1, int(math.ceil(radius / self.cell)))
        keys = self._keys
        lo = keys.min(axis=0) - m
        span = keys.max(axis=0) + m - lo + 1
        strides = np.array([span[1] * span[2], span[2], 1], dtype=np.int64)
        lin = (keys - lo) @ strides
        order = np.argsort(lin, kind="stable")
        slin = lin[order]
        r = np.arange(-m, m + 1)
        offs = np.stack(np.meshgrid(r, r, r, indexing="ij"), axis=-1).reshape(-1, 3) @ strides
        clin = (((keys[centers] - lo) @ strides)[:, None] + offs[None, :]).ravel()
        first = np.searchsorted(slin, clin, "left")
        counts = np.searchsorted(slin, clin, "right") - first
        total = int(counts.sum())
        block_start = np.cumsum(counts) - counts
        within = np.arange(total) - np.repeat(block_start, counts)
        pts = order[np.repeat(first, counts) + within]
        rows = np.repeat(np.arange(len(clin)) // len(offs), counts)
        diff = self.positions[pts] - self.positions[centers[rows]]
        keep = np.einsum("ij,ij->i", diff, diff) < radius * radius
        rows, pts = rows[keep], pts[keep]
        srt = np.lexsort((pts, rows))
        return rows[srt], pts[srt]


def neighborhoods(
    positions: np.ndarray,
    controls: Sequence[int],
    cfg: ControlConfig,
    index: Optional[SpatialIndex] = None,
) -> Dict[int, np.ndarray]:
    """Non-control Gaussians strictly within ``radius_r`` of each control."""
    positions = np.asarray(positions, dtype=np.float64)
    if index is None:
        index = SpatialIndex(positions, cfg.radius_r)
    controls = np.asarray(controls, dtype=np.int64)
    is_control = np.zeros(len(positions), dtype=bool)
    is_control[controls] = True
    rows, pts = index.pairs_within(controls, cfg.radius_r)
    keep = ~is_control[pts]
    rows, pts = rows[keep], pts[keep]
    bounds = np.searchsorted(rows, np.arange(len(controls) + 1)).tolist()
    return {i: pts[a:b] for i, a, b in zip(controls.tolist(), bounds[:-1], bounds[1:])}


def memberships(neigh: Mapping[int, np.ndarray]) -> Dict[int, np.ndarray]:
    """Invert control -> neighbors into neighbor -> ascending controls."""
    ks = sorted(neigh)
    parts = [np.asarray(neigh[i], dtype=np.int64).ravel() for i in ks]
    if not parts or sum(p.size for p in parts) == 0:
        return {}
    nbr = np.concatenate(parts)
    ctrl = np.repeat(np.asarray(ks, dtype=np.int64), [p.size for p in parts])
    order = np.lexsort((ctrl, nbr))
    nbr, ctrl = nbr[order], ctrl[order]
    bounds = np.concatenate(([0], np.flatnonzero(np.diff(nbr)) + 1, [nbr.size]))
    starts, ends = bounds[:-1].tolist(), bounds[1:].tolist()
    return {j: ctrl[a:b] for j, a, b in zip(nbr[bounds[:-1]].tolist(), starts, ends)}


def propagation_weights(
    positions: np.ndarray, j: int, controls: Sequence[int], sigma: float
) -> np.ndarray:
    controls = np.asarray(controls, dtype=np.int64)
    if controls.size == 0:
        raise ControlError(f"Gaussian {j} has no affecting controls")
    diff = positions[controls] - positions[j]
    logits = np.einsum("ij,ij->i", diff, diff) * (-1.0 / sigma**2)
    # shift by the max so distant-only neighborhoods do not underflow to 0/0
    e = np.exp(logits - logits.max())
    return e / e.sum()


def propagation_weight_table(
    positions: np.ndarray, members: Mapping[int, Sequence[int]], sigma: float
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """All propagation weights at once, as flat (gaussian, control, weight) rows.

    Rows are grouped by Gaussian in ascending order; each group is a softmax
    matching propagation_weights for that Gaussian.
    """
    js = sorted(members)
    lens = np.fromiter((len(members[j]) for j in js), dtype=np.int64, count=len(js))
    if np.any(lens == 0):
        raise ControlError(f"Gaussian {js[int(np.argmin(lens))]} has no affecting controls")
    if not js:
        empty = np.zeros(0, dtype=np.int64)
        return empty, empty.copy(), np.zeros(0)
    rows = np.repeat(np.asarray(js, dtype=np.int64), lens)
    cols = np.concatenate([np.asarray(members[j], dtype=np.int64) for j in js])
    diff = positions[cols] - positions[rows]
    logits = np.einsum("ij,ij->i", diff, diff) * (-1.0 / sigma**2)
    starts = np.concatenate(([0], np.cumsum(lens)[:-1]))
    seg = np.repeat(np.arange(len(js)), lens)
    e = np.exp(logits - np.maximum.reduceat(logits, starts)[seg])
    return rows, cols, e / np.add.reduceat(e, starts)[seg]


def propagate(
    base_deformed: np.ndarray,
    canonical: np.ndarray,
    control_displacements: Mapping[int, np.ndarray],
    members: Mapping[int, Sequence[int]],
    cfg: ControlConfig,
) -> np.ndarray:
    out = np.array(base_deformed, dtype=np.float64, copy=True)
    active = {j: cj for j, cj in members.items() if j not in control_displacements}
    rows, cols, w = propagation_weight_table(canonical, active, cfg.sigma)
    if rows.size == 0:
        return out
    ids = sorted(control_displacements)
    lookup = {c: k for k, c in enumerate(ids)}
    try:
        slot = np.fromiter((lookup[int(c)] for c in cols), dtype=np.int64, count=cols.size)
    except KeyError as exc:
        bad = int(exc.args[0])
        j = int(rows[np.flatnonzero(cols == bad)[0]])
        raise ControlError(f"membership of {j} references non-control {bad}") from None
    disp = np.stack([np.asarray(control_displacements[c], dtype=np.float64) for c in ids])
    np.add.at(out, rows, w[:, None] * disp[slot])
    return out


def propagate_vjp(
    canonical: np.ndarray,
    control_displacements: Mapping[int, np.ndarray],
    members: Mapping[int, Sequence[int]],
    cfg: ControlConfig,
    grad_out: np.ndarray,
):
    """Gradients of :func:`propagate` w.r.t. base, control displacements and canonical positions.

    Control and neighborhood membership are treated as fixed (piecewise
    constant); the kernel weights are differentiated through the softmax.
    """
    grad_base = np.array(grad_out, dtype=np.float64, copy=True)
    grad_disp = {int(i): np.zeros(3) for i in control_displacements}
    grad_canon = np.zeros_like(canonical, dtype=np.float64)
    s2 = cfg.sigma**2
    for j in sorted(members):
        if j in control_displacements:
            continue
        cj = np.asarray(members[j], dtype=np.int64)
        g = grad_out[j]
        w = propagation_weights(canonical, j, cj, cfg.sigma)
        disp = np.stack([control_displacements[int(i)] for i in cj])
        for k, i in enumerate(cj):
            grad_disp[int(i)] += w[k] * g
        gd = disp @ g
        # d loss / d logit_ij for logits a_ij = -|x_j - x_i|^2 / sigma^2
        ga = w * (gd - w @ gd)
        diff = canonical[j] - canonical[cj]
        grad_canon[j] += np.sum((ga * (-2.0 / s2))[:, None] * diff, axis=0)
        np.add.at(grad_canon, cj, (ga * (2.0 / s2))[:, None] * diff)
    return grad_base, grad_disp, grad_canon


@dataclass
class SplitReport:
    parents: List[int] = field(default_factory=list)
    children: List[List[int]] = field(default_factory=list)
    magnitudes: List[float] = field(default_factory=list)
    iteration: int = 0
    degenerate: List[int] = field(default_factory=list)

    def __post_init__(self) -> None:
        if len(self.children) != len(self.parents):
            raise ControlError("each parent needs exactly one child pair")

    @property
    def count(self) -> int:
        return len(self.parents)

    def to_dict(self) -> dict:
        return {
            "parents": [int(p) for p in self.parents],
            "children": [[int(a), int(b)] for a, b in self.children],
            "magnitudes": [float(m) for m in self.magnitudes],
            "iteration": int(self.iteration),
            "degenerate": [int(d) for d in self.degenerate],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SplitReport":
        return cls(
            parents=list(d["parents"]),
            children=[list(c) for c in d["children"]],
            magnitudes=list(d["magnitudes"]),
            iteration=int(d.get("iteration", 0)),
            degenerate=list(d.get("degenerate", [])),
        )


def split_index(n: int, parents: np.ndarray) -> np.ndarray:
    """Source row for every output row: originals in place, then second children."""
    return np.concatenate([np.arange(n), np.asarray(parents, dtype=np.int64)])


def split_gaussians(
    gaussians,
    delta: np.ndarray,
    cfg: ControlConfig,
    directions: Optional[np.ndarray] = None,
    iteration: int = 0,
):
    """Replace every Gaussian with ``delta > tau_split`` by two children.

    ``gaussians`` is any dataclass carrying ``positions``, ``log_scales`` and
    per-row arrays; every per-row field is reindexed. Child one keeps the
    parent's slot at ``x + eps * mean_scale * dir``, child two is appended at
    ``x - eps * mean_scale * dir``. Returns ``(new_set, report, index)``.
    """
    delta = np.asarray(delta, dtype=np.float64)
    n = len(gaussians.positions)
    if delta.shape != (n,):
        raise ControlError(f"delta has shape {delta.shape}, expected ({n},)")
    parents = np.flatnonzero(delta > cfg.tau_split)
    if parents.size == 0:
        return gaussians, SplitReport(iteration=iteration), np.arange(n)
    if n + parents.size > cfg.n_max:
        raise SplitCapExceeded(
            f"splitting {parents.size} Gaussians would give {n + parents.size} > n_max={cfg.n_max}"
        )
    if directions is None:
        dirs = np.zeros((parents.size, 3))
    else:
        dirs = np.asarray(directions, dtype=np.float64)[parents]
    norms = np.linalg.norm(dirs, axis=1)
    degenerate = norms < 1e-12
    unit = np.where(degenerate[:, None], np.array([1.0, 0.0, 0.0]), dirs / np.where(degenerate, 1.0, norms)[:, None])

    index = split_index(n, parents)
    updates = {}
    for f in dataclasses.fields(gaussians):
        val = getattr(gaussians, f.name)
        if isinstance(val, np.ndarray) and val.ndim >= 1 and val.shape[0] == n:
            updates[f.name] = val[index]
    mean_scale = np.exp(gaussians.log_scales[parents]).mean(axis=1)
    offset = cfg.split_epsilon * mean_scale[:, None] * unit
    pos = updates["positions"]
    pos[parents] = gaussians.positions[parents] + offset
    pos[n:] = gaussians.positions[parents] - offset
    ls = updates["log_scales"]
    shrink = math.log(cfg.split_scale_factor)
    ls[parents] = gaussians.log_scales[parents] + shrink
    ls[n:] = gaussians.log_scales[parents] + shrink
    out = dataclasses.replace(gaussians, **updates)
    report = SplitReport(
        parents=[int(p) for p in parents],
        children=[[int(p), n + k] for k, p in enumerate(parents)],
        magnitudes=[float(delta[p]) for p in parents],
        iteration=iteration,
        degenerate=[int(p) for p in parents[degenerate]],
    )
    return out, report, index


__all__ = [
    "ControlConfig",
    "ControlError",
    "SpatialIndex",
    "SplitCapExceeded",
    "SplitReport",
    "displacement_magnitudes",
    "memberships",
    "neighborhoods",
    "propagate",
    "propagate_vjp",
    "propagation_weight_table",
    "propagation_weights",
    "select_controls",
    "split_gaussians",
    "split_index",
]
