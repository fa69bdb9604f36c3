"""OBJ (text) and binary little-endian PLY triangle meshes."""
from __future__ import annotations

import os
import struct
from pathlib import Path

import numpy as np

from ..geometry import TriangleMesh


class MeshFormatError(ValueError):
    pass


def _obj_index(tok: str, n_verts: int, path, lineno: int) -> int:
    head = tok.split("/")[0]
    try:
        i = int(head)
    except ValueError:
        raise MeshFormatError(f"{path}:{lineno}: bad face index {tok!r}") from None
    if i == 0:
        raise MeshFormatError(f"{path}:{lineno}: face index 0 (OBJ indices are 1-based)")
    idx = i - 1 if i > 0 else n_verts + i
    if not 0 <= idx < n_verts:
        raise MeshFormatError(f"{path}:{lineno}: face index {i} out of range (have {n_verts} vertices)")
    return idx


def load_obj(path) -> TriangleMesh:
    verts, faces = [], []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if parts[0] == "v":
                if len(parts) < 4:
                    raise MeshFormatError(f"{path}:{lineno}: vertex needs 3 coordinates")
                try:
                    verts.append([float(x) for x in parts[1:4]])
                except ValueError:
                    raise MeshFormatError(f"{path}:{lineno}: bad vertex coordinate") from None
            elif parts[0] == "f":
                if len(parts) < 4:
                    raise MeshFormatError(f"{path}:{lineno}: face needs at least 3 indices")
                idx = [_obj_index(t, len(verts), path, lineno) for t in parts[1:]]
                for k in range(1, len(idx) - 1):  # fan-triangulate polygons
                    faces.append([idx[0], idx[k], idx[k + 1]])
    v = np.asarray(verts, dtype=np.float32).reshape(-1, 3).astype(np.float64)
    f = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    return TriangleMesh(v, f)


def save_obj(mesh: TriangleMesh, path) -> None:
    v = np.asarray(mesh.vertices, dtype=np.float32)
    with open(path, "w", encoding="utf-8") as fh:
        for p in v:
            # shortest float32 repr round-trips exactly
            fh.write("v " + " ".join(np.format_float_positional(x, unique=True) for x in p) + "\n")
        for t in np.asarray(mesh.triangles, dtype=np.int64):
            fh.write(f"f {t[0] + 1} {t[1] + 1} {t[2] + 1}\n")


_PLY_TYPES = {
    "char": "b", "int8": "b", "uchar": "B", "uint8": "B", "short": "h", "int16": "h",
    "ushort": "H", "uint16": "H", "int": "i", "int32": "i", "uint": "I", "uint32": "I",
    "float": "f", "float32": "f", "double": "d", "float64": "d",
}


def save_ply(mesh: TriangleMesh, path) -> None:
    v = np.asarray(mesh.vertices, dtype="<f4")
    t = np.asarray(mesh.triangles, dtype="<i4")
    header = (
        "ply\nformat binary_little_endian 1.0\n"
        f"element vertex {len(v)}\nproperty float x\nproperty float y\nproperty float z\n"
        f"element face {len(t)}\nproperty list uchar int vertex_indices\nend_header\n"
    )
    faces = np.zeros(len(t), dtype=[("n", "u1"), ("i", "<i4", (3,))])
    faces["n"] = 3
    faces["i"] = t
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(v.tobytes())
        fh.write(faces.tobytes())


def load_ply(path) -> TriangleMesh:
    data = Path(path).read_bytes()
    end = data.find(b"end_header\n")
    if not data.startswith(b"ply") or end < 0:
        raise MeshFormatError(f"{path}: not a PLY file (missing 'ply' magic or end_header)")
    lines = data[:end].decode("ascii", errors="replace").splitlines()
    elements = []
    fmt = None
    for lineno, line in enumerate(lines, 1):
        p = line.split()
        if not p or p[0] in ("ply", "comment", "obj_info"):
            continue
        if p[0] == "format":
            fmt = p[1]
        elif p[0] == "element":
            elements.append([p[1], int(p[2]), []])
        elif p[0] == "property":
            if not elements:
                raise MeshFormatError(f"{path}:{lineno}: property before any element")
            elements[-1][2].append(p[1:])
        else:
            raise MeshFormatError(f"{path}:{lineno}: unexpected header line {line!r}")
    if fmt != "binary_little_endian":
        raise MeshFormatError(f"{path}: only binary_little_endian PLY is supported (got {fmt})")
    off = end + len(b"end_header\n")
    verts = faces = None
    for name, count, props in elements:
        if all(pr[0] != "list" for pr in props):
            dt = np.dtype([(pr[1], "<" + _PLY_TYPES[pr[0]]) for pr in props])
            need = dt.itemsize * count
            if off + need > len(data):
                raise MeshFormatError(f"{path}: byte offset {off}: truncated element '{name}'")
            arr = np.frombuffer(data, dtype=dt, count=count, offset=off)
            off += need
            if name == "vertex":
                verts = np.stack([arr["x"], arr["y"], arr["z"]], axis=1).astype(np.float64)
        else:
            tris = []
            for k in range(count):
                row = []
                for pr in props:
                    if pr[0] == "list":
                        cfmt, ifmt = "<" + _PLY_TYPES[pr[1]], "<" + _PLY_TYPES[pr[2]]
                        if off + struct.calcsize(cfmt) > len(data):
                            raise MeshFormatError(f"{path}: byte offset {off}: truncated {name} {k}")
                        (n,) = struct.unpack_from(cfmt, data, off)
                        off += struct.calcsize(cfmt)
                        size = struct.calcsize(ifmt) * n
                        if off + size > len(data):
                            raise MeshFormatError(f"{path}: byte offset {off}: truncated {name} {k}")
                        row = list(struct.unpack_from("<" + ifmt[1] * n, data, off))
                        off += size
                    else:
                        off += struct.calcsize("<" + _PLY_TYPES[pr[0]])
                if name == "face":
                    if len(row) < 3:
                        raise MeshFormatError(f"{path}: face {k} has {len(row)} indices")
                    for j in range(1, len(row) - 1):
                        tris.append([row[0], row[j], row[j + 1]])
            if name == "face":
                faces = np.asarray(tris, dtype=np.int64).reshape(-1, 3)
    if verts is None:
        raise MeshFormatError(f"{path}: no vertex element")
    faces = np.zeros((0, 3), dtype=np.int64) if faces is None else faces
    if faces.size and (faces.min() < 0 or faces.max() >= len(verts)):
        raise MeshFormatError(f"{path}: face index out of range (have {len(verts)} vertices)")
    return TriangleMesh(verts, faces)


def load_mesh(path) -> TriangleMesh:
    if not os.path.exists(path):
        raise FileNotFoundError(f"mesh file not found: {path}")
    ext = Path(path).suffix.lower()
    if ext == ".obj":
        return load_obj(path)
    if ext == ".ply":
        return load_ply(path)
    raise MeshFormatError(f"{path}: unsupported mesh extension {ext!r} (use .obj or .ply)")


def save_mesh(mesh: TriangleMesh, path) -> None:
    ext = Path(path).suffix.lower()
    if ext == ".obj":
        save_obj(mesh, path)
    elif ext == ".ply":
        save_ply(mesh, path)
    else:
        raise MeshFormatError(f"{path}: unsupported mesh extension {ext!r} (use .obj or .ply)")
