"""Canonical Gaussian set and the expression/pose residual pipeline."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Optional

import numpy as np

from . import _rotation as rot
from .control import (
    ControlConfig,
    SpatialIndex,
    SplitReport,
    memberships,
    neighborhoods,
    propagate,
    propagate_vjp,
    select_controls,
    split_gaussians,
)
from .fields import POSE_DIM, ResidualFieldBank, add_param_grads


class GaussianSetError(ValueError):
    pass


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


@dataclass(frozen=True)
class GaussianSet:
    """Canonical primitives. Scales are stored as logs, opacities as logits."""

    positions: np.ndarray
    features: np.ndarray
    rotations: np.ndarray
    log_scales: np.ndarray
    opacity_logits: np.ndarray

    def __post_init__(self) -> None:
        for name in ("positions", "features", "rotations", "log_scales", "opacity_logits"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.float64))

    def __len__(self) -> int:
        return len(self.positions)

    @property
    def scales(self) -> np.ndarray:
        return np.exp(self.log_scales)

    @property
    def opacities(self) -> np.ndarray:
        return _sigmoid(self.opacity_logits)

    @property
    def d_feat(self) -> int:
        return self.features.shape[1]

    def take(self, index: np.ndarray) -> "GaussianSet":
        return GaussianSet(
            self.positions[index],
            self.features[index],
            self.rotations[index],
            self.log_scales[index],
            self.opacity_logits[index],
        )

    def params(self) -> Dict[str, np.ndarray]:
        return {
            "gauss.positions": self.positions,
            "gauss.features": self.features,
            "gauss.rotations": self.rotations,
            "gauss.log_scales": self.log_scales,
            "gauss.opacity_logits": self.opacity_logits,
        }

    def with_params(self, flat: Dict[str, np.ndarray]) -> "GaussianSet":
        cur = self.params()
        cur.update({k: v for k, v in flat.items() if k in cur})
        return GaussianSet(*(cur[k] for k in (
            "gauss.positions", "gauss.features", "gauss.rotations",
            "gauss.log_scales", "gauss.opacity_logits",
        )))


def validate_neutral_set(g: GaussianSet) -> GaussianSet:
    """Check shapes, finiteness and quaternion norms; renormalize near-unit quaternions."""
    n = len(g.positions)
    if n < 1:
        raise GaussianSetError("empty Gaussian set")
    expected = {
        "positions": (n, 3),
        "rotations": (n, 4),
        "log_scales": (n, 3),
        "opacity_logits": (n,),
    }
    for name, shape in expected.items():
        arr = getattr(g, name)
        if arr.shape[0] != n:
            raise GaussianSetError(f"length mismatch: positions has {n}, {name} has {arr.shape[0]}")
        if arr.shape != shape:
            raise GaussianSetError(f"{name} has shape {arr.shape}, expected {shape}")
    if g.features.ndim != 2 or g.features.shape[0] != n:
        raise GaussianSetError(f"length mismatch: positions has {n}, features has {g.features.shape[0]}")
    for name in ("positions", "features", "rotations", "log_scales", "opacity_logits"):
        if not np.all(np.isfinite(getattr(g, name))):
            raise GaussianSetError(f"non-finite values in {name}")
    norms = np.linalg.norm(g.rotations, axis=1)
    if np.any(norms == 0):
        raise GaussianSetError("zero quaternion")
    if np.any(np.abs(norms - 1.0) > 1e-3):
        bad = int(np.argmax(np.abs(norms - 1.0)))
        raise GaussianSetError(f"quaternion {bad} has norm {norms[bad]:.6g}, outside 1e-3 of unit")
    return GaussianSet(g.positions, g.features, g.rotations / norms[:, None], g.log_scales, g.opacity_logits)


@dataclass(frozen=True)
class ExpressionParams:
    coefficients: np.ndarray

    def __post_init__(self) -> None:
        c = np.asarray(self.coefficients, dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(c)):
            raise ValueError("non-finite expression coefficients")
        object.__setattr__(self, "coefficients", c)

    @classmethod
    def zeros(cls, d_exp: int = 32) -> "ExpressionParams":
        return cls(np.zeros(d_exp))


@dataclass(frozen=True)
class PoseParams:
    rotation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self) -> None:
        r = np.asarray(self.rotation, dtype=np.float64).reshape(3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(r)) and np.all(np.isfinite(t))):
            raise ValueError("non-finite pose parameters")
        if np.linalg.norm(r) >= np.pi:
            raise ValueError("pose rotation magnitude must be < pi")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @property
    def vector(self) -> np.ndarray:
        return np.concatenate([self.rotation, self.translation])


@dataclass(frozen=True)
class RigidTransform:
    rotation: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self) -> None:
        q = np.asarray(self.rotation, dtype=np.float64).reshape(4)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if abs(np.linalg.norm(q) - 1.0) > 1e-6:
            raise ValueError(f"transform quaternion norm {np.linalg.norm(q):.9g} is not unit")
        object.__setattr__(self, "rotation", q)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls()

    @classmethod
    def from_matrix(cls, r: np.ndarray, t: np.ndarray) -> "RigidTransform":
        return cls(rot.from_matrix(r), t)

    @classmethod
    def from_axis_angle(cls, v: np.ndarray, t: np.ndarray) -> "RigidTransform":
        return cls(rot.from_axis_angle(v), t)

    @property
    def matrix(self) -> np.ndarray:
        return rot.to_matrix(self.rotation)

    def apply(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.matrix.T + self.translation

    def inverse(self) -> "RigidTransform":
        qi = rot.conjugate(self.rotation)
        return RigidTransform(qi, -(rot.to_matrix(qi) @ self.translation))

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """``self ∘ other``: apply ``other`` first."""
        q = rot.normalize(rot.multiply(self.rotation, other.rotation))
        return RigidTransform(q, self.matrix @ other.translation + self.translation)


def _check_bank(g: GaussianSet, theta: np.ndarray, beta: np.ndarray, bank: ResidualFieldBank) -> None:
    if theta.shape != (bank.d_exp,):
        raise GaussianSetError(f"expression dim {theta.shape[0]} != bank d_exp {bank.d_exp}")
    if beta.shape != (POSE_DIM,):
        raise GaussianSetError("pose vector must have 6 entries")
    if g.d_feat != bank.d_feat:
        raise GaussianSetError(f"feature dim {g.d_feat} != bank d_feat {bank.d_feat}")
    n = bank.count
    if n is not None and n != len(g):
        raise GaussianSetError(f"bank has {n} per-Gaussian rows, set has {len(g)}")


def _drivers(theta, beta):
    t = theta.coefficients if isinstance(theta, ExpressionParams) else np.asarray(theta, dtype=np.float64)
    b = beta.vector if isinstance(beta, PoseParams) else np.asarray(beta, dtype=np.float64)
    return t, b


def _field_inputs(g: GaussianSet) -> Dict[str, np.ndarray]:
    return {
        "def": g.positions,
        "color": g.features,
        "rot": g.rotations,
        "scale": g.log_scales,
        "alpha": g.opacity_logits[:, None],
    }


@dataclass(frozen=True)
class Deformed:
    positions: np.ndarray
    rotations: np.ndarray
    log_scales: np.ndarray
    opacity_logits: np.ndarray
    exp_offsets: np.ndarray
    pose_offsets: np.ndarray
    raw_rotations: np.ndarray

    def __iter__(self):
        return iter((self.positions, self.rotations, self.log_scales, self.opacity_logits))


def deform_geometry(g: GaussianSet, theta, beta, bank: ResidualFieldBank) -> Deformed:
    t, b = _drivers(theta, beta)
    _check_bank(g, t, b, bank)
    inputs = _field_inputs(g)
    res = {}
    for attr in ("def", "rot", "scale", "alpha"):
        res[attr, "exp"] = bank[attr, "exp"].evaluate(inputs[attr], t)
        res[attr, "pose"] = bank[attr, "pose"].evaluate(inputs[attr], b)
    for key, r in res.items():
        if not np.all(np.isfinite(r)):
            raise GaussianSetError(f"non-finite residual from field {key[0]}.{key[1]}")
    raw_q = g.rotations + res["rot", "exp"] + res["rot", "pose"]
    qn = np.linalg.norm(raw_q, axis=1)
    if np.any(qn < 1e-12):
        raise GaussianSetError("rotation residual cancels the quaternion")
    return Deformed(
        positions=g.positions + res["def", "exp"] + res["def", "pose"],
        rotations=raw_q / qn[:, None],
        log_scales=g.log_scales + res["scale", "exp"] + res["scale", "pose"],
        opacity_logits=g.opacity_logits + (res["alpha", "exp"] + res["alpha", "pose"])[:, 0],
        exp_offsets=res["def", "exp"],
        pose_offsets=res["def", "pose"],
        raw_rotations=raw_q,
    )


def color_logits(g: GaussianSet, theta, beta, bank: ResidualFieldBank) -> np.ndarray:
    t, b = _drivers(theta, beta)
    _check_bank(g, t, b, bank)
    return bank["color", "exp"].evaluate(g.features, t) + bank["color", "pose"].evaluate(g.features, b)


def predict_colors(g: GaussianSet, theta, beta, bank: ResidualFieldBank) -> np.ndarray:
    """Colors in [0, 1]: logistic of the summed expression and pose color residuals."""
    return _sigmoid(color_logits(g, theta, beta, bank))


def to_world(positions: np.ndarray, rotations: np.ndarray, t: RigidTransform):
    r = t.matrix
    pos = np.asarray(positions, dtype=np.float64) @ r.T + t.translation
    quats = rot.normalize(rot.multiply(t.rotation[None, :], np.asarray(rotations, dtype=np.float64)))
    return pos, quats


@dataclass(frozen=True)
class WorldGaussians:
    positions: np.ndarray
    colors: np.ndarray
    rotations: np.ndarray
    log_scales: np.ndarray
    opacity_logits: np.ndarray
    split_child: np.ndarray = None
    source: np.ndarray = None
    controls: np.ndarray = None

    def __post_init__(self) -> None:
        n = len(self.positions)
        if self.split_child is None:
            object.__setattr__(self, "split_child", np.zeros(n, dtype=bool))
        if self.source is None:
            object.__setattr__(self, "source", np.arange(n))
        if self.controls is None:
            object.__setattr__(self, "controls", np.empty(0, dtype=np.int64))

    def __len__(self) -> int:
        return len(self.positions)

    @property
    def scales(self) -> np.ndarray:
        return np.exp(self.log_scales)

    @property
    def opacities(self) -> np.ndarray:
        return _sigmoid(self.opacity_logits)


@dataclass
class AssemblyContext:
    """Intermediate state kept by :func:`assemble_with_context` for the backward pass."""

    g: GaussianSet
    theta: np.ndarray
    beta: np.ndarray
    transform: RigidTransform
    bank: ResidualFieldBank
    ctl: Optional[ControlConfig]
    deformed: Deformed
    colors: np.ndarray
    local_positions: np.ndarray
    control_disp: Dict[int, np.ndarray]
    members: Dict[int, np.ndarray]
    report: SplitReport


def assemble_with_context(g, theta, beta, transform, bank, ctl=None):
    t, b = _drivers(theta, beta)
    d = deform_geometry(g, t, b, bank)
    colors = predict_colors(g, t, b, bank)
    positions = d.positions
    control_disp: Dict[int, np.ndarray] = {}
    members: Dict[int, np.ndarray] = {}
    controls = np.empty(0, dtype=np.int64)
    mags = np.linalg.norm(d.exp_offsets, axis=1)
    if ctl is not None and ctl.control_enabled:
        controls = select_controls(mags, ctl.tau_control)
        if controls.size:
            index = SpatialIndex(g.positions, ctl.radius_r)
            members = memberships(neighborhoods(g.positions, controls, ctl, index))
            control_disp = {int(i): d.exp_offsets[i] for i in controls}
            positions = propagate(d.positions, g.positions, control_disp, members, ctl)
    local = positions
    world = WorldGaussians(positions, colors, d.rotations, d.log_scales, d.opacity_logits, controls=controls)
    report = SplitReport()
    if ctl is not None and ctl.split_enabled:
        world, report, index = split_gaussians(world, mags, ctl, directions=d.exp_offsets)
        if report.count:
            child = np.zeros(len(world), dtype=bool)
            child[report.parents] = True
            child[len(g):] = True
            world = WorldGaussians(
                world.positions, world.colors, world.rotations, world.log_scales,
                world.opacity_logits, child, index, controls,
            )
    wp, wq = to_world(world.positions, world.rotations, transform)
    world = WorldGaussians(wp, world.colors, wq, world.log_scales, world.opacity_logits,
                           world.split_child, world.source, world.controls)
    ctx = AssemblyContext(g, t, b, transform, bank, ctl, d, colors, local, control_disp, members, report)
    return world, ctx


def assemble_avatar(g, theta, beta, transform, bank, ctl: Optional[ControlConfig] = None) -> WorldGaussians:
    """Deform, propagate controls, split, then move to world space.

    ``ctl=None`` disables both optional stages.
    """
    return assemble_with_context(g, theta, beta, transform, bank, ctl)[0]


def to_world_vjp(rotations: np.ndarray, t: RigidTransform, grad_pos: np.ndarray, grad_quat: np.ndarray):
    r = t.matrix
    raw = rot.multiply(t.rotation[None, :], rotations)
    g_raw = rot.normalize_vjp(raw, grad_quat)
    left = rot.left_matrix(t.rotation)
    return grad_pos @ r, g_raw @ left


def avatar_vjp(ctx: AssemblyContext, grads: Dict[str, np.ndarray]):
    """Backpropagate world-space gradients to canonical and bank parameters.

    ``grads`` holds any of ``positions, colors, rotations, log_scales,
    opacity_logits`` for the world set. Returns a flat dict keyed like
    :meth:`GaussianSet.params` and :meth:`ResidualFieldBank.params`.
    """
    if ctx.report.count:
        raise NotImplementedError("no backward through per-call splitting; split the canonical set instead")
    g, d, bank = ctx.g, ctx.deformed, ctx.bank
    n = len(g)
    zeros3 = np.zeros((n, 3))
    g_pos_w = grads.get("positions", zeros3)
    g_q_w = grads.get("rotations", np.zeros((n, 4)))
    g_local, g_q = to_world_vjp(d.rotations, ctx.transform, g_pos_w, g_q_w)

    g_canon = np.zeros((n, 3))
    g_exp_off = np.zeros((n, 3))
    if ctx.members:
        g_base, g_disp, g_c = propagate_vjp(g.positions, ctx.control_disp, ctx.members, ctx.ctl, g_local)
        g_canon += g_c
        for i, v in g_disp.items():
            g_exp_off[i] += v
    else:
        g_base = g_local

    out: Dict[str, np.ndarray] = {}
    inputs = _field_inputs(g)
    # positions: X0 + exp(X0) + pose(X0)
    g_canon += g_base
    for drv, drv_vec, extra in (("exp", ctx.theta, g_exp_off), ("pose", ctx.beta, 0.0)):
        fg = bank["def", drv].vjp(inputs["def"], drv_vec, g_base + extra)
        add_param_grads(out, "def", drv, fg)
        g_canon += fg.inputs

    g_raw_q = rot.normalize_vjp(d.raw_rotations, g_q)
    g_rot_in = g_raw_q.copy()
    g_ls = grads.get("log_scales", zeros3)
    g_ls_in = g_ls.copy()
    g_op = grads.get("opacity_logits", np.zeros(n))[:, None]
    g_op_in = g_op.copy()
    for drv, drv_vec in (("exp", ctx.theta), ("pose", ctx.beta)):
        fg = bank["rot", drv].vjp(inputs["rot"], drv_vec, g_raw_q)
        add_param_grads(out, "rot", drv, fg)
        g_rot_in += fg.inputs
        fg = bank["scale", drv].vjp(inputs["scale"], drv_vec, g_ls)
        add_param_grads(out, "scale", drv, fg)
        g_ls_in += fg.inputs
        fg = bank["alpha", drv].vjp(inputs["alpha"], drv_vec, g_op)
        add_param_grads(out, "alpha", drv, fg)
        g_op_in += fg.inputs

    g_col = grads.get("colors", zeros3)
    g_logit = g_col * ctx.colors * (1.0 - ctx.colors)
    g_feat = np.zeros_like(g.features)
    for drv, drv_vec in (("exp", ctx.theta), ("pose", ctx.beta)):
        fg = bank["color", drv].vjp(inputs["color"], drv_vec, g_logit)
        add_param_grads(out, "color", drv, fg)
        g_feat += fg.inputs

    out["gauss.positions"] = g_canon
    out["gauss.features"] = g_feat
    out["gauss.rotations"] = g_rot_in
    out["gauss.log_scales"] = g_ls_in
    out["gauss.opacity_logits"] = g_op_in[:, 0]
    return out


__all__ = [
    "AssemblyContext",
    "Deformed",
    "ExpressionParams",
    "GaussianSet",
    "GaussianSetError",
    "PoseParams",
    "RigidTransform",
    "WorldGaussians",
    "assemble_avatar",
    "assemble_with_context",
    "avatar_vjp",
    "color_logits",
    "deform_geometry",
    "predict_colors",
    "to_world",
    "to_world_vjp",
    "validate_neutral_set",
]
