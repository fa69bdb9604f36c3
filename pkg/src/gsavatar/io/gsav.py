"""GaussianSet containers: a binary ``GSAV`` file and a lossless JSON form.

Binary layout (little-endian)::

    b"GSAV"  u32 version  u32 N  u32 d_F
    f32 positions[N,3]  f32 features[N,d_F]  f32 rotations[N,4]
    f32 log_scales[N,3]  f32 opacity_logits[N]

An avatar directory holds ``gaussians.gsav``, ``gaussians.json`` (the same
set at full precision), ``bank/<attr>.<driver>.<name>.npy`` (float64 field
parameters plus RBF centers) and ``avatar.json`` (bank layout and metadata).
The bank is stored as loose NPY files because NPZ archives embed timestamps.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from ..core import GaussianSet
from ..fields import LinearBlendField, RBFField, ResidualFieldBank
from ..train.stage2 import Avatar

MAGIC = b"GSAV"
VERSION = 1
_ORDER = ("positions", "features", "rotations", "log_scales", "opacity_logits")


class GsavFormatError(ValueError):
    pass


def _widths(d_feat: int):
    return {"positions": 3, "features": d_feat, "rotations": 4, "log_scales": 3, "opacity_logits": 1}


def gsav_bytes(g: GaussianSet) -> bytes:
    n, d = len(g), g.d_feat
    parts = [MAGIC, struct.pack("<III", VERSION, n, d)]
    for name in _ORDER:
        parts.append(np.ascontiguousarray(getattr(g, name), dtype="<f4").tobytes())
    return b"".join(parts)


def save_gsav(g: GaussianSet, path) -> None:
    Path(path).write_bytes(gsav_bytes(g))


def parse_gsav(data: bytes, path="<bytes>") -> GaussianSet:
    if len(data) < 16 or data[:4] != MAGIC:
        raise GsavFormatError(f"{path}: offset 0: bad magic (expected b'GSAV')")
    version, n, d = struct.unpack_from("<III", data, 4)
    if version != VERSION:
        raise GsavFormatError(f"{path}: offset 4: unsupported version {version}")
    off = 16
    arrays = {}
    for name in _ORDER:
        w = _widths(d)[name]
        size = 4 * n * w
        if off + size > len(data):
            raise GsavFormatError(f"{path}: offset {off}: truncated while reading {name}")
        a = np.frombuffer(data, dtype="<f4", count=n * w, offset=off).astype(np.float64)
        arrays[name] = a.reshape(n, w) if name != "opacity_logits" else a
        off += size
    if off != len(data):
        raise GsavFormatError(f"{path}: offset {off}: {len(data) - off} trailing bytes")
    return GaussianSet(**arrays)


def load_gsav(path) -> GaussianSet:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"file not found: {path}")
    return parse_gsav(p.read_bytes(), path)


def gaussians_to_json(g: GaussianSet) -> str:
    """Lossless: float64 values are written with the shortest round-trip repr."""
    return json.dumps({name: getattr(g, name).tolist() for name in _ORDER})


def gaussians_from_json(text: str) -> GaussianSet:
    d = json.loads(text)
    n = len(d["positions"])
    arrays = {name: np.asarray(d[name], dtype=np.float64) for name in _ORDER}
    arrays["features"] = arrays["features"].reshape(n, -1)
    return GaussianSet(**arrays)


def save_avatar(avatar: Avatar, directory) -> None:
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    save_gsav(avatar.gaussians, out / "gaussians.gsav")
    arrays = {}
    layout = {}
    for (attr, drv), f in sorted(avatar.bank.fields.items()):
        key = f"{attr}.{drv}"
        layout[key] = {"kind": f.kind}
        for name, arr in f.params().items():
            arrays[f"{key}.{name}"] = arr
        if isinstance(f, RBFField):
            arrays[f"{key}.centers"] = f.centers
            layout[key]["bandwidth"] = f.bandwidth
    bank_dir = out / "bank"
    bank_dir.mkdir(exist_ok=True)
    for name, arr in arrays.items():
        np.save(bank_dir / f"{name}.npy", np.asarray(arr, dtype=np.float64), allow_pickle=False)
    meta = {"format": "gsavatar-avatar", "version": 1, "d_exp": avatar.bank.d_exp,
            "d_feat": avatar.bank.d_feat, "fields": layout}
    (out / "avatar.json").write_text(json.dumps(meta, indent=1, sort_keys=True))
    # keep canonical parameters at full precision too (GSAV stores 32-bit floats)
    (out / "gaussians.json").write_text(gaussians_to_json(avatar.gaussians))


def load_avatar(directory) -> Avatar:
    d = Path(directory)
    meta_path = d / "avatar.json"
    if not meta_path.exists():
        raise FileNotFoundError(f"avatar not found: {meta_path}")
    meta = json.loads(meta_path.read_text())
    exact = d / "gaussians.json"
    g = gaussians_from_json(exact.read_text()) if exact.exists() else load_gsav(d / "gaussians.gsav")
    bank_dir = d / "bank"
    if not bank_dir.is_dir():
        raise FileNotFoundError(f"avatar bank not found: {bank_dir}")
    arrays = {p.stem: np.load(p, allow_pickle=False) for p in sorted(bank_dir.glob("*.npy"))}
    for key, info in meta["fields"].items():
        for name in ("weights",) + (("centers",) if info["kind"] == "rbf" else ()):
            if f"{key}.{name}" not in arrays:
                raise FileNotFoundError(f"avatar bank entry missing: {bank_dir / (key + '.' + name + '.npy')}")
    fields = {}
    for key, info in meta["fields"].items():
        attr, drv = key.split(".")
        if info["kind"] == "linear_blend":
            fields[(attr, drv)] = LinearBlendField(arrays[f"{key}.weights"], arrays.get(f"{key}.input_proj"))
        elif info["kind"] == "rbf":
            fields[(attr, drv)] = RBFField(arrays[f"{key}.centers"], float(info["bandwidth"]), arrays[f"{key}.weights"])
        else:
            raise GsavFormatError(f"{meta_path}: unknown field kind {info['kind']!r}")
    return Avatar(g, ResidualFieldBank(fields, int(meta["d_exp"]), int(meta["d_feat"])))
