"""Stage II: fit canonical Gaussians and the residual field bank to video frames."""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from ..control import ControlConfig, displacement_magnitudes, split_gaussians
from ..core import GaussianSet, RigidTransform, assemble_with_context, avatar_vjp
from ..fields import ResidualFieldBank
from ..render import Camera, rasterize, rasterize_backward
from .adam import AdamState, OptimConfig, adam_step
from .losses import LossWeights, image_terms, patch_boxes, weighted_total
from .metrics import psnr
from .trace import FitTrace, TraceRow


class FitError(RuntimeError):
    pass


@dataclass(frozen=True)
class Observation:
    """One training image with its tracked drivers."""

    theta: np.ndarray
    beta: np.ndarray
    transform: RigidTransform
    camera: Camera
    rgb: np.ndarray
    mask: Optional[np.ndarray] = None
    landmarks: Optional[np.ndarray] = None  # (K, 3) deformed canonical points, stage I only


@dataclass(frozen=True)
class Stage2Config:
    iterations: int = 2000
    weights: LossWeights = field(default_factory=LossWeights.stage2)
    optim: OptimConfig = field(default_factory=OptimConfig)
    control: ControlConfig = field(default_factory=ControlConfig)
    patch_size: int = 64
    patches_per_step: int = 4
    seed: int = 0
    background: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    log_every: int = 1
    eval_every: int = 0  # 0: only at the end
    frozen: Tuple[str, ...] = ()  # parameter-key prefixes left untouched
    backend: Optional[str] = None


@dataclass
class Avatar:
    gaussians: GaussianSet
    bank: ResidualFieldBank

    def params(self):
        return {**self.gaussians.params(), **self.bank.params()}

    def with_params(self, flat) -> "Avatar":
        g = {k: v for k, v in flat.items() if k.startswith("gauss.")}
        b = {k: v for k, v in flat.items() if k.startswith("field.")}
        return Avatar(self.gaussians.with_params(g), self.bank.with_params(b))


def render_observation(avatar: Avatar, obs: Observation, ctl: Optional[ControlConfig], background=(0, 0, 0),
                       backend=None):
    """Assemble (without per-call splitting) and rasterize one observation."""
    ctl_eval = ctl.replace(split_enabled=False) if ctl is not None else None
    world, ctx = assemble_with_context(avatar.gaussians, obs.theta, obs.beta, obs.transform, avatar.bank, ctl_eval)
    frame = rasterize(world, world.colors, obs.camera, background, backend=backend)
    return frame, world, ctx


def evaluate_psnr(avatar: Avatar, observations: Sequence[Observation], ctl, background=(0, 0, 0), backend=None) -> float:
    vals = [psnr(render_observation(avatar, o, ctl, background, backend)[0].rgb, o.rgb) for o in observations]
    return float(np.mean(vals))


def stage2_loss_and_grad(avatar: Avatar, obs: Observation, cfg: Stage2Config, boxes=()):
    frame, world, ctx = render_observation(avatar, obs, cfg.control, cfg.background, cfg.backend)
    terms, g_rgb, g_alpha = image_terms(frame, obs.rgb, obs.mask, cfg.weights, boxes)
    rg = rasterize_backward(world, world.colors, obs.camera, cfg.background, g_rgb, g_alpha,
                            state=frame.state)
    grads = avatar_vjp(ctx, {
        "positions": rg.positions,
        "colors": rg.colors,
        "rotations": rg.rotations,
        "log_scales": rg.log_scales,
        "opacity_logits": rg.opacity_logits,
    })
    return terms, grads, frame


def _split_canonical(avatar: Avatar, state: AdamState, theta, ctl: ControlConfig, iteration: int):
    g, bank = avatar.gaussians, avatar.bank
    delta = displacement_magnitudes(g.positions, theta, bank)
    dirs = bank["def", "exp"].evaluate(g.positions, np.asarray(theta, dtype=np.float64))
    new_g, report, index = split_gaussians(g, delta, ctl, directions=dirs, iteration=iteration)
    if not report.count:
        return avatar, state, report
    old = avatar.params()
    new = Avatar(new_g, bank.take(index))
    row_keys = {k for k, v in new.params().items() if v.shape != old[k].shape}
    return new, state.take(index, row_keys), report


def fit_stage2(avatar: Avatar, observations: Sequence[Observation], cfg: Optional[Stage2Config] = None):
    """Adam over canonical and field parameters, one observation per step.

    The visiting order is a seeded permutation per pass over the data.
    Splitting runs every ``control.split_every`` steps on the canonical set
    (driven by the current step's expression) and is persistent. Returns
    ``(avatar, trace)``.
    """
    cfg = cfg or Stage2Config()
    if not observations:
        raise FitError("no observations")
    rng = np.random.default_rng(cfg.seed)
    trace = FitTrace("stage2")
    state = AdamState()
    start = time.perf_counter()
    order: List[int] = []
    ctl = cfg.control
    for it in range(cfg.iterations):
        if not order:
            order = list(rng.permutation(len(observations)))
        obs = observations[order.pop(0)]
        n_split = 0
        if ctl.split_enabled and it > 0 and it % ctl.split_every == 0:
            avatar, state, report = _split_canonical(avatar, state, obs.theta, ctl, it)
            n_split = report.count
            if n_split:
                trace.split_events.append(report.to_dict())
        h, w = obs.rgb.shape[:2]
        boxes = patch_boxes(h, w, cfg.patch_size, cfg.patches_per_step, rng) if cfg.weights.perc else ()
        terms, grads, _ = stage2_loss_and_grad(avatar, obs, cfg, boxes)
        grads = {k: v for k, v in grads.items() if not k.startswith(cfg.frozen or ("\0",))}
        total = weighted_total(terms, cfg.weights)
        if not np.isfinite(total):
            raise FitError(f"non-finite loss at iteration {it}")
        params, state = adam_step(avatar.params(), grads, state, cfg.optim)
        avatar = avatar.with_params(params)
        val = None
        last = it == cfg.iterations - 1
        if last or (cfg.eval_every and it % cfg.eval_every == 0):
            val = evaluate_psnr(avatar, observations, ctl, cfg.background, cfg.backend)
        if last or it % max(cfg.log_every, 1) == 0 or n_split:
            trace.append(TraceRow(it, total, terms, len(avatar.gaussians), n_split, val,
                                  time.perf_counter() - start))
    return avatar, trace


__all__ = [
    "Avatar",
    "FitError",
    "Observation",
    "Stage2Config",
    "evaluate_psnr",
    "fit_stage2",
    "render_observation",
    "stage2_loss_and_grad",
]
