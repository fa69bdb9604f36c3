"""TOML configuration covering every tunable constant of the pipeline.

``default_config()`` emits all defaults; ``loads``/``dumps`` round-trip the
effective configuration. Tables mirror the dataclasses: ``[stage1]``,
``[stage1.weights]``, ``[stage2.control]`` and so on.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict

import tomli
import tomli_w

from ..train.stage1 import Stage1Config
from ..train.stage2 import Stage2Config


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SceneSpec:
    shape: str = "blendshape-head"
    n: int = 200
    views: int = 4
    frames: int = 1
    size: int = 64
    seed: int = 0

    def __post_init__(self) -> None:
        if self.shape not in ("sphere", "blendshape-head"):
            raise ConfigError(f"scene.shape must be 'sphere' or 'blendshape-head', got {self.shape!r}")
        for k in ("n", "views", "frames", "size"):
            if getattr(self, k) < 1:
                raise ConfigError(f"scene.{k} must be >= 1")


@dataclass(frozen=True)
class PipelineConfig:
    scene: SceneSpec = field(default_factory=SceneSpec)
    stage1: Stage1Config = field(default_factory=Stage1Config)
    stage2: Stage2Config = field(default_factory=Stage2Config)


def default_config() -> PipelineConfig:
    return PipelineConfig()


def to_dict(obj) -> Dict[str, Any]:
    """Dataclass tree to TOML-ready dicts; ``None`` entries are left out (they mean "auto")."""
    out = {}
    for f in dataclasses.fields(obj):
        v = getattr(obj, f.name)
        if v is None:
            continue
        if dataclasses.is_dataclass(v):
            out[f.name] = to_dict(v)
        elif isinstance(v, tuple):
            out[f.name] = list(v)
        else:
            out[f.name] = v
    return out


def _coerce(path: str, default, value):
    if isinstance(default, bool) or isinstance(value, bool):
        if not isinstance(value, bool) or (default is not None and not isinstance(default, bool)):
            raise ConfigError(f"{path}: expected {type(default).__name__}, got {value!r}")
        return value
    if isinstance(default, float) and isinstance(value, (int, float)):
        return float(value)
    if isinstance(default, tuple):
        if not isinstance(value, list):
            raise ConfigError(f"{path}: expected an array")
        return tuple(float(x) if default and isinstance(default[0], float) else x for x in value)
    if default is not None and not isinstance(value, type(default)):
        raise ConfigError(f"{path}: expected {type(default).__name__}, got {value!r}")
    return value


def from_dict(cls, data: Dict[str, Any], path: str = ""):
    base = cls()
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown key {path + unknown[0]!r}")
    kw = {}
    for name, value in data.items():
        default = getattr(base, name)
        here = f"{path}{name}"
        if dataclasses.is_dataclass(default):
            if not isinstance(value, dict):
                raise ConfigError(f"{here}: expected a table")
            kw[name] = from_dict(type(default), value, here + ".")
        else:
            kw[name] = _coerce(here, default, value)
    try:
        return cls(**kw)
    except (ValueError, TypeError) as e:
        raise ConfigError(f"{path or 'config'}: {e}") from e


def dumps(cfg: PipelineConfig) -> str:
    return tomli_w.dumps(to_dict(cfg))


def loads(text: str) -> PipelineConfig:
    try:
        data = tomli.loads(text)
    except tomli.TOMLDecodeError as e:
        raise ConfigError(f"invalid TOML: {e}") from e
    return from_dict(PipelineConfig, data)


def load_config(path) -> PipelineConfig:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"config not found: {path}")
    return loads(p.read_text())
