"""On-disk scene bundles: cameras, target frames, tracks, landmarks and a prior mesh.

Layout under the bundle root::

    scene.json              spec, cameras, frame table
    track.csv               per-frame theta, beta, T
    frames/fXXXX_vYY.npy    float32 RGB targets (plus an 8-bit PNG preview)
    masks/fXXXX_vYY.npy     float32 alpha masks
    landmarks.npy           (F, K, 3) landmark targets in deformed canonical space
    prior.obj               prior head mesh
    truth/                  ground-truth avatar (synthetic bundles only)
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import List, Optional, Tuple, Union

import numpy as np

from .. import _rotation as rot
from ..control import ControlConfig
from ..core import GaussianSet, RigidTransform, deform_geometry
from ..fields import ResidualFieldBank
from ..geometry import SdfGrid, TriangleMesh, extract_surface, sphere_sdf
from ..render import Camera
from ..train.stage2 import Avatar, Observation, render_observation
from .config import ConfigError, SceneSpec
from .frames import load_frame, save_frame, save_png
from .gsav import save_avatar
from .mesh import load_mesh, save_mesh
from .scene import blendshape_head, expression_sequence, fibonacci_sphere, ring_cameras
from .tracks import Track, read_track, write_track

SPHERE_RADIUS = 0.3
HEAD_RADII = np.array([0.30, 0.36, 0.32])
N_LANDMARKS = 8


def camera_to_dict(cam: Camera) -> dict:
    t = cam.world_to_camera
    return {"fx": cam.fx, "fy": cam.fy, "cx": cam.cx, "cy": cam.cy, "width": cam.width,
            "height": cam.height, "rotation": t.rotation.tolist(), "translation": t.translation.tolist()}


def camera_from_dict(d: dict) -> Camera:
    t = RigidTransform(np.asarray(d["rotation"]), np.asarray(d["translation"]))
    return Camera(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
                  int(d["width"]), int(d["height"]), t)


@dataclass
class SceneBundle:
    root: Path
    shape: str
    cameras: List[Camera]
    frames: List[List[Path]]  # [frame][view]
    masks: Optional[List[List[Path]]]
    track: Track
    landmarks: Optional[np.ndarray]  # (F, K, 3)
    prior_mesh: Optional[Path]

    def __post_init__(self) -> None:
        n = len(self.frames)
        if len(self.track) != n:
            raise ValueError(f"bundle has {n} frames but the track has {len(self.track)} rows")
        if self.masks is not None and len(self.masks) != n:
            raise ValueError("masks are not aligned with frames")
        if self.landmarks is not None and len(self.landmarks) != n:
            raise ValueError("landmarks are not aligned with frames")
        if any(len(row) != len(self.cameras) for row in self.frames):
            raise ValueError("every frame needs one image per camera")

    def __len__(self) -> int:
        return len(self.frames)

    def observations(self, with_landmarks: bool = True) -> List[Observation]:
        out = []
        for f, row in enumerate(self.frames):
            for v, path in enumerate(row):
                mask = load_frame(self.masks[f][v]) if self.masks is not None else None
                lmk = self.landmarks[f] if with_landmarks and self.landmarks is not None else None
                out.append(Observation(self.track.theta[f], self.track.beta[f], self.track.transforms[f],
                                       self.cameras[v], load_frame(path), mask, lmk))
        return out

    def prior(self) -> Optional[TriangleMesh]:
        return load_mesh(self.prior_mesh) if self.prior_mesh is not None else None


def unit_sphere_mesh(resolution: int = 16) -> TriangleMesh:
    """Closed triangulated unit sphere: extracted surface with vertices projected radially."""
    m = extract_surface(SdfGrid.from_function(sphere_sdf(0.4), resolution, 0))
    v = m.vertices / np.linalg.norm(m.vertices, axis=1, keepdims=True)
    return TriangleMesh(v, m.triangles)


def sphere_avatar(n: int, d_feat: int = 16, d_exp: int = 32, seed: int = 0) -> Avatar:
    """Gaussians on a sphere of radius 0.3; colors read the first three features."""
    rng = np.random.default_rng(seed)
    r = rot.to_matrix(rot.normalize(rng.normal(0.0, 1.0, 4)))
    pos = SPHERE_RADIUS * (fibonacci_sphere(n) @ r.T)
    feats = rng.normal(0.0, 1.0, (n, d_feat))
    quats = rot.normalize(rng.normal(0.0, 1.0, (n, 4)))
    size = np.clip(SPHERE_RADIUS * np.sqrt(4.0 * np.pi / n) * 0.5, 0.01, 0.12)
    log_s = np.full((n, 3), np.log(size))
    g = GaussianSet(pos, feats, quats, log_s, np.full(n, 2.0))
    bank = ResidualFieldBank.linear_blend(n, d_feat, d_exp)
    p = bank.params()
    proj = np.zeros((3, d_feat))
    proj[:, :3] = np.eye(3)
    p["field.color.exp.input_proj"] = proj
    return Avatar(g, bank.with_params(p))


def _spec(spec: Union[SceneSpec, dict]) -> SceneSpec:
    if isinstance(spec, SceneSpec):
        return spec
    try:
        return SceneSpec(**{("n" if k == "N" else k): v for k, v in dict(spec).items()})
    except TypeError as e:
        raise ConfigError(f"invalid scene spec: {e}") from e


def make_synthetic_scene(spec: Union[SceneSpec, dict], root) -> Tuple[SceneBundle, Avatar]:
    """Generate, render and write a bundle; returns it with the ground-truth avatar."""
    spec = _spec(spec)
    root = Path(root)
    if spec.shape == "sphere":
        truth = sphere_avatar(spec.n, seed=spec.seed)
        thetas = np.zeros((spec.frames, truth.bank.d_exp))
        prior = TriangleMesh(SPHERE_RADIUS * unit_sphere_mesh().vertices, unit_sphere_mesh().triangles)
    else:
        truth = blendshape_head(spec.n, seed=spec.seed)
        thetas = expression_sequence(spec.frames, truth.bank.d_exp, spec.seed)
        u = unit_sphere_mesh()
        prior = TriangleMesh(u.vertices * HEAD_RADII, u.triangles)
    lmk_idx = np.linspace(0, spec.n - 1, min(N_LANDMARKS, spec.n)).round().astype(np.int64)
    cams = ring_cameras(spec.views, spec.size)
    ctl = ControlConfig(split_enabled=False)
    betas = np.zeros((spec.frames, 6))
    transforms = [RigidTransform.identity() for _ in range(spec.frames)]

    for sub in ("frames", "masks"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    frames, masks, landmarks = [], [], []
    for f in range(spec.frames):
        d = deform_geometry(truth.gaussians, thetas[f], betas[f], truth.bank)
        landmarks.append(d.positions[lmk_idx])
        frow, mrow = [], []
        for v, cam in enumerate(cams):
            o = Observation(thetas[f], betas[f], transforms[f], cam, np.zeros((cam.height, cam.width, 3)))
            img = render_observation(truth, o, ctl)[0]
            stem = f"f{f:04d}_v{v:02d}"
            save_frame(img.rgb, root / "frames" / f"{stem}.npy")
            save_png(img.rgb, root / "frames" / f"{stem}.png")
            save_frame(img.alpha, root / "masks" / f"{stem}.npy")
            frow.append(root / "frames" / f"{stem}.npy")
            mrow.append(root / "masks" / f"{stem}.npy")
        frames.append(frow)
        masks.append(mrow)
    track = Track(list(range(spec.frames)), thetas, betas, transforms)
    write_track(track, root / "track.csv")
    lmk = np.asarray(landmarks)
    np.save(root / "landmarks.npy", lmk, allow_pickle=False)
    save_mesh(prior, root / "prior.obj")
    save_avatar(truth, root / "truth")
    meta = {
        "format": "gsavatar-scene",
        "version": 1,
        "spec": asdict(spec),
        "cameras": [camera_to_dict(c) for c in cams],
        "frames": [[str(p.relative_to(root)) for p in row] for row in frames],
        "masks": [[str(p.relative_to(root)) for p in row] for row in masks],
        "track": "track.csv",
        "landmarks": "landmarks.npy",
        "landmark_gaussians": lmk_idx.tolist(),
        "prior": "prior.obj",
        "truth": "truth",
    }
    (root / "scene.json").write_text(json.dumps(meta, indent=1, sort_keys=True))
    return load_bundle(root), truth


def load_bundle(root) -> SceneBundle:
    root = Path(root)
    meta_path = root / "scene.json"
    if not meta_path.exists():
        raise FileNotFoundError(f"scene not found: {meta_path}")
    meta = json.loads(meta_path.read_text())

    def need(rel: str) -> Path:
        p = root / rel
        if not p.exists():
            raise FileNotFoundError(f"bundle file missing: {p}")
        return p

    frames = [[need(r) for r in row] for row in meta["frames"]]
    masks = [[need(r) for r in row] for row in meta["masks"]] if meta.get("masks") else None
    track = read_track(need(meta["track"]))
    lmk = np.load(need(meta["landmarks"]), allow_pickle=False) if meta.get("landmarks") else None
    prior = need(meta["prior"]) if meta.get("prior") else None
    cams = [camera_from_dict(c) for c in meta["cameras"]]
    return SceneBundle(root, meta["spec"]["shape"], cams, frames, masks, track, lmk, prior)


__all__ = [
    "SceneBundle",
    "camera_from_dict",
    "camera_to_dict",
    "load_bundle",
    "make_synthetic_scene",
    "sphere_avatar",
    "unit_sphere_mesh",
]
