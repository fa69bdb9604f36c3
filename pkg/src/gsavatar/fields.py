"""Residual predictors driving the expression/pose deformation.

Each field maps a per-Gaussian input row and a driver vector (expression
coefficients or the 6-dim pose vector) to a residual of fixed width. Both
families are linear in their parameters, so zero parameters always give a
zero residual, and both expose a vector-Jacobian product used by the fitting
code.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Iterable, Optional, Tuple

import numpy as np

#: residual width per attribute
ATTRIBUTE_DIMS: Dict[str, int] = {"def": 3, "color": 3, "rot": 4, "scale": 3, "alpha": 1}
ATTRIBUTES: Tuple[str, ...] = tuple(ATTRIBUTE_DIMS)
DRIVERS: Tuple[str, ...] = ("exp", "pose")
POSE_DIM = 6


@dataclass
class FieldGrad:
    params: Dict[str, np.ndarray]
    inputs: np.ndarray
    driver: np.ndarray


@dataclass
class LinearBlendField:
    """Per-Gaussian basis: ``r_i = W_i @ driver (+ P @ input_i)``.

    ``weights`` has shape (N, out, D). The optional shared ``input_proj`` of
    shape (out, in) lets a field read its per-Gaussian input (used by the
    color fields so features matter).
    """

    weights: np.ndarray
    input_proj: Optional[np.ndarray] = None

    kind = "linear_blend"

    @property
    def out_dim(self) -> int:
        return self.weights.shape[1]

    @property
    def driver_dim(self) -> int:
        return self.weights.shape[2]

    @property
    def count(self) -> Optional[int]:
        return self.weights.shape[0]

    def params(self) -> Dict[str, np.ndarray]:
        out = {"weights": self.weights}
        if self.input_proj is not None:
            out["input_proj"] = self.input_proj
        return out

    def replace(self, **params: np.ndarray) -> "LinearBlendField":
        return LinearBlendField(
            weights=params.get("weights", self.weights),
            input_proj=params.get("input_proj", self.input_proj),
        )

    def take(self, index: np.ndarray) -> "LinearBlendField":
        return LinearBlendField(self.weights[index], self.input_proj)

    def evaluate(self, inputs: np.ndarray, driver: np.ndarray) -> np.ndarray:
        out = self.weights @ driver
        if self.input_proj is not None:
            out = out + inputs @ self.input_proj.T
        return out

    def driver_jacobian(self, inputs: np.ndarray, driver: np.ndarray) -> np.ndarray:
        return self.weights.copy()

    def vjp(self, inputs: np.ndarray, driver: np.ndarray, grad_out: np.ndarray) -> FieldGrad:
        params = {"weights": grad_out[:, :, None] * driver[None, None, :]}
        grad_inputs = np.zeros_like(inputs)
        if self.input_proj is not None:
            params["input_proj"] = grad_out.T @ inputs
            grad_inputs = grad_out @ self.input_proj
        grad_driver = np.einsum("no,nod->d", grad_out, self.weights)
        return FieldGrad(params, grad_inputs, grad_driver)


@dataclass
class RBFField:
    """Fixed radial centers in the field's input space.

    ``r(x) = sum_k phi_k(x) V_k @ driver`` with
    ``phi_k(x) = exp(-|x - c_k|^2 / (2 h^2))``. Not tied to a Gaussian count,
    so it survives splitting and re-extraction without reindexing.
    """

    centers: np.ndarray
    bandwidth: float
    weights: np.ndarray

    kind = "rbf"

    @property
    def out_dim(self) -> int:
        return self.weights.shape[1]

    @property
    def driver_dim(self) -> int:
        return self.weights.shape[2]

    @property
    def count(self) -> Optional[int]:
        return None

    def params(self) -> Dict[str, np.ndarray]:
        return {"weights": self.weights}

    def replace(self, **params: np.ndarray) -> "RBFField":
        return RBFField(self.centers, self.bandwidth, params.get("weights", self.weights))

    def take(self, index: np.ndarray) -> "RBFField":
        return self

    def _phi(self, inputs: np.ndarray) -> np.ndarray:
        c = self.centers
        d2 = np.einsum("nd,nd->n", inputs, inputs)[:, None] + np.einsum("kd,kd->k", c, c)[None, :] - 2.0 * inputs @ c.T
        return np.exp(-np.maximum(d2, 0.0) / (2.0 * self.bandwidth**2))

    def evaluate(self, inputs: np.ndarray, driver: np.ndarray) -> np.ndarray:
        return self._phi(inputs) @ (self.weights @ driver)

    def driver_jacobian(self, inputs: np.ndarray, driver: np.ndarray) -> np.ndarray:
        return np.einsum("nk,kod->nod", self._phi(inputs), self.weights)

    def vjp(self, inputs: np.ndarray, driver: np.ndarray, grad_out: np.ndarray) -> FieldGrad:
        phi = self._phi(inputs)
        mixed = self.weights @ driver  # (K, out)
        per_center = phi.T @ grad_out  # (K, out)
        params = {"weights": per_center[:, :, None] * driver[None, None, :]}
        grad_driver = np.einsum("ko,kod->d", per_center, self.weights)
        coeff = (grad_out @ mixed.T) * phi / self.bandwidth**2  # (N, K)
        grad_inputs = coeff @ self.centers - coeff.sum(axis=1)[:, None] * inputs
        return FieldGrad(params, grad_inputs, grad_driver)


def _input_dims(d_feat: int) -> Dict[str, int]:
    return {"def": 3, "color": d_feat, "rot": 4, "scale": 3, "alpha": 1}


@dataclass
class ResidualFieldBank:
    """The ten residual fields keyed by (attribute, driver)."""

    fields: Dict[Tuple[str, str], object]
    d_exp: int
    d_feat: int

    def __post_init__(self) -> None:
        missing = {(a, d) for a in ATTRIBUTES for d in DRIVERS} - set(self.fields)
        if missing:
            raise ValueError(f"bank is missing fields {sorted(missing)}")
        for (attr, drv), f in self.fields.items():
            if f.out_dim != ATTRIBUTE_DIMS[attr]:
                raise ValueError(f"field {attr}.{drv} outputs {f.out_dim}, expected {ATTRIBUTE_DIMS[attr]}")
            want = self.d_exp if drv == "exp" else POSE_DIM
            if f.driver_dim != want:
                raise ValueError(f"field {attr}.{drv} expects driver dim {f.driver_dim}, bank says {want}")

    def __getitem__(self, key: Tuple[str, str]):
        return self.fields[key]

    @property
    def count(self) -> Optional[int]:
        counts = {f.count for f in self.fields.values() if f.count is not None}
        if len(counts) > 1:
            raise ValueError(f"inconsistent per-Gaussian field sizes {sorted(counts)}")
        return counts.pop() if counts else None

    @classmethod
    def linear_blend(
        cls,
        n: int,
        d_feat: int = 16,
        d_exp: int = 32,
        *,
        rng: Optional[np.random.Generator] = None,
        std: float = 0.0,
        color_input: bool = True,
    ) -> "ResidualFieldBank":
        """LinearBlend bank; zero parameters unless ``rng`` and ``std`` given."""
        fields = {}
        for attr in ATTRIBUTES:
            for drv in DRIVERS:
                dim = d_exp if drv == "exp" else POSE_DIM
                shape = (n, ATTRIBUTE_DIMS[attr], dim)
                w = rng.normal(0.0, std, shape) if rng is not None and std > 0 else np.zeros(shape)
                proj = None
                if attr == "color" and color_input:
                    pshape = (3, d_feat)
                    proj = rng.normal(0.0, std, pshape) if rng is not None and std > 0 else np.zeros(pshape)
                fields[(attr, drv)] = LinearBlendField(w, proj)
        return cls(fields, d_exp, d_feat)

    @classmethod
    def rbf(
        cls,
        centers: Dict[str, np.ndarray],
        bandwidth: Dict[str, float],
        d_feat: int = 16,
        d_exp: int = 32,
        *,
        rng: Optional[np.random.Generator] = None,
        std: float = 0.0,
    ) -> "ResidualFieldBank":
        """RBF bank with per-attribute center sets in that attribute's input space."""
        dims = _input_dims(d_feat)
        fields = {}
        for attr in ATTRIBUTES:
            c = np.asarray(centers[attr], dtype=np.float64)
            if c.shape[1] != dims[attr]:
                raise ValueError(f"{attr} centers have dim {c.shape[1]}, need {dims[attr]}")
            for drv in DRIVERS:
                dim = d_exp if drv == "exp" else POSE_DIM
                shape = (c.shape[0], ATTRIBUTE_DIMS[attr], dim)
                w = rng.normal(0.0, std, shape) if rng is not None and std > 0 else np.zeros(shape)
                fields[(attr, drv)] = RBFField(c, float(bandwidth[attr]), w)
        return cls(fields, d_exp, d_feat)

    def params(self) -> Dict[str, np.ndarray]:
        """Flat parameter dict keyed ``field.<attr>.<driver>.<name>``."""
        out = {}
        for (attr, drv), f in self.fields.items():
            for name, arr in f.params().items():
                out[f"field.{attr}.{drv}.{name}"] = arr
        return out

    def with_params(self, flat: Dict[str, np.ndarray]) -> "ResidualFieldBank":
        fields = {}
        for (attr, drv), f in self.fields.items():
            prefix = f"field.{attr}.{drv}."
            upd = {k[len(prefix):]: v for k, v in flat.items() if k.startswith(prefix)}
            fields[(attr, drv)] = f.replace(**upd) if upd else f
        return ResidualFieldBank(fields, self.d_exp, self.d_feat)

    def take(self, index: np.ndarray) -> "ResidualFieldBank":
        return ResidualFieldBank(
            {k: f.take(index) for k, f in self.fields.items()}, self.d_exp, self.d_feat
        )

    def restrict(self, drivers: Iterable[str]) -> "ResidualFieldBank":
        """Copy with every field outside ``drivers`` zeroed."""
        keep = set(drivers)
        fields = {}
        for (attr, drv), f in self.fields.items():
            if drv in keep:
                fields[(attr, drv)] = f
            else:
                fields[(attr, drv)] = f.replace(**{k: np.zeros_like(v) for k, v in f.params().items()})
        return ResidualFieldBank(fields, self.d_exp, self.d_feat)


def add_param_grads(acc: Dict[str, np.ndarray], attr: str, drv: str, grad: FieldGrad) -> None:
    for name, g in grad.params.items():
        key = f"field.{attr}.{drv}.{name}"
        if key in acc:
            acc[key] = acc[key] + g
        else:
            acc[key] = g


__all__ = [
    "ATTRIBUTES",
    "ATTRIBUTE_DIMS",
    "DRIVERS",
    "FieldGrad",
    "LinearBlendField",
    "POSE_DIM",
    "RBFField",
    "ResidualFieldBank",
    "add_param_grads",
]
