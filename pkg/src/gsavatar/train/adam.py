"""Adam with per-group learning rates over flat parameter dicts."""
from __future__ import annotations

from dataclasses import dataclass, field, fields
from typing import Dict, Tuple

import numpy as np


class NonFiniteGradient(FloatingPointError):
    """A parameter group produced a NaN or infinite gradient."""

    def __init__(self, group: str, key: str):
        super().__init__(f"non-finite gradient in group '{group}' (parameter {key})")
        self.group = group
        self.key = key


@dataclass(frozen=True)
class OptimConfig:
    lr_fields: float = 1e-4
    lr_positions: float = 1e-5
    lr_features: float = 1e-5
    lr_rotations: float = 1e-5
    lr_scales: float = 3e-5
    lr_opacity: float = 1e-4
    lr_stage1: float = 1e-3
    # lattice SDF values sit one Adam step per unit lr from the surface, so
    # they need a larger rate than network weights would
    lr_sdf: float = 3e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    # keys with these prefixes update lazily: entries whose gradient is exactly
    # zero keep their value and moments (surface-local SDF updates)
    lazy_prefixes: Tuple[str, ...] = ("s1.grid.",)

    def __post_init__(self) -> None:
        for f in fields(self):
            if f.name.startswith("lr_") and not getattr(self, f.name) > 0:
                raise ValueError(f"{f.name} must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("betas must lie in [0, 1)")

    def group_of(self, key: str) -> str:
        if key in ("s1.grid.s", "s1.grid.coarse"):
            return "sdf"
        if key.startswith("s1."):
            return "stage1"
        if key.startswith("field."):
            return "fields"
        tail = key.split(".", 1)[-1]
        return {
            "positions": "positions",
            "features": "features",
            "rotations": "rotations",
            "log_scales": "scales",
            "opacity_logits": "opacity",
        }.get(tail, "fields")

    def lr_for(self, key: str) -> float:
        return getattr(self, "lr_" + self.group_of(key))


@dataclass
class AdamState:
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)

    def take(self, index: np.ndarray, row_keys) -> "AdamState":
        """Reindex moments of per-row parameters after the set changes size."""
        m = {k: (a[index] if k in row_keys else a) for k, a in self.m.items()}
        v = {k: (a[index] if k in row_keys else a) for k, a in self.v.items()}
        return AdamState(self.step, m, v)


def adam_step(
    params: Dict[str, np.ndarray],
    grads: Dict[str, np.ndarray],
    state: AdamState,
    cfg: OptimConfig,
    lr_scale: float = 1.0,
) -> Tuple[Dict[str, np.ndarray], AdamState]:
    """One bias-corrected Adam update; parameters without a gradient are kept.

    ``lr_scale`` multiplies every group's rate (learning-rate schedules).
    """
    for k in sorted(grads):
        if not np.all(np.isfinite(grads[k])):
            raise NonFiniteGradient(cfg.group_of(k), k)
    t = state.step + 1
    c1 = 1.0 - cfg.beta1**t
    c2 = 1.0 - cfg.beta2**t
    out = dict(params)
    m_new, v_new = dict(state.m), dict(state.v)
    for k in sorted(grads):
        if k not in params:
            raise KeyError(f"gradient for unknown parameter {k}")
        g = np.asarray(grads[k], dtype=np.float64)
        m0 = state.m.get(k, np.zeros_like(g))
        v0 = state.v.get(k, np.zeros_like(g))
        m = cfg.beta1 * m0 + (1 - cfg.beta1) * g
        v = cfg.beta2 * v0 + (1 - cfg.beta2) * g * g
        step = lr_scale * cfg.lr_for(k) * (m / c1) / (np.sqrt(v / c2) + cfg.eps)
        if cfg.lazy_prefixes and k.startswith(cfg.lazy_prefixes):
            live = g != 0.0
            m = np.where(live, m, m0)
            v = np.where(live, v, v0)
            step = np.where(live, step, 0.0)
        out[k] = params[k] - step
        m_new[k], v_new[k] = m, v
    return out, AdamState(t, m_new, v_new)


__all__ = ["AdamState", "NonFiniteGradient", "OptimConfig", "adam_step"]
