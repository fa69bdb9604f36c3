"""Command-line interface.

Every subcommand writes only under its ``--out`` path. Failures print one
JSON line to stderr, ``{"error": <kind>, "message": ..., "path": ...}``, and
exit nonzero: 2 usage, 3 missing file, 4 bad input format or config,
5 fit failure, 1 anything else.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from . import _rotation as rot
from .control import ControlConfig, SplitReport, displacement_magnitudes
from .core import GaussianSet, RigidTransform
from .fields import ResidualFieldBank
from .geometry import SdfGrid, TriangleMesh, sphere_sdf, triangle_areas
from .io import bundle as bundle_io
from .io.config import ConfigError, PipelineConfig, default_config, dumps, load_config
from .io.frames import list_frames, load_frame, save_frame, save_png
from .io.gsav import GsavFormatError, load_avatar, save_avatar
from .io.mesh import MeshFormatError, load_mesh, save_mesh
from .io.reports import save_trace, split_reports_to_json
from .io.scene import ring_cameras
from .io.tracks import read_track
from .train.metrics import psnr, ssim
from .train.stage1 import fit_stage1
from .train.stage2 import Avatar, FitError, Observation, fit_stage2, render_observation

EXIT_USAGE, EXIT_MISSING, EXIT_FORMAT, EXIT_FIT, EXIT_OTHER = 2, 3, 4, 5, 1


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would print usage and exit
        raise UsageError(message)


def _fail(kind: str, message: str, path: Optional[str] = None) -> str:
    d = {"error": kind, "message": message}
    if path is not None:
        d["path"] = str(path)
    return json.dumps(d)


def _config(args) -> PipelineConfig:
    return load_config(args.config) if args.config else default_config()


def _require(path, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(2, f"{what} not found: {path}", str(path))
    return p


def _stage1_cfg(cfg: PipelineConfig, args):
    s1 = cfg.stage1
    if args.iterations is not None:
        s1 = dataclasses.replace(s1, iterations=args.iterations)
    return s1


def _stage2_cfg(cfg: PipelineConfig, args):
    s2 = cfg.stage2
    if args.iterations is not None:
        s2 = dataclasses.replace(s2, iterations=args.iterations)
    return s2


# -- subcommands -----------------------------------------------------------


def cmd_make_scene(args, cfg: PipelineConfig) -> int:
    spec = cfg.scene
    over = {k: getattr(args, k) for k in ("shape", "n", "views", "frames", "size", "seed") if getattr(args, k) is not None}
    spec = dataclasses.replace(spec, **over)
    b, _ = bundle_io.make_synthetic_scene(spec, args.out)
    print(f"scene {spec.shape}: {len(b)} frames x {len(b.cameras)} views -> {args.out}")
    return 0


def cmd_fit_geometry(args, cfg: PipelineConfig) -> int:
    b = bundle_io.load_bundle(_require(args.scene, "scene"))
    prior = b.prior()
    obs = b.observations()
    r0 = float(np.linalg.norm(prior.vertices - prior.vertices.mean(0), axis=1).mean()) if prior is not None else 0.3
    grid = SdfGrid.from_function(sphere_sdf(r0), args.resolution, 8)
    s1 = _stage1_cfg(cfg, args)
    model, mesh, trace = fit_stage1(grid, prior, obs, s1)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_mesh(mesh, out / "mesh.obj")
    np.save(out / "sdf.npy", model.grid.s, allow_pickle=False)
    save_trace(trace, out / "trace.json")
    save_trace(trace, out / "trace.csv")
    print(f"mesh: {len(mesh.vertices)} vertices, {len(mesh.triangles)} triangles; final loss {trace.losses[-1]:.6g}")
    return 0


def sample_surface(mesh: TriangleMesh, n: int, rng: np.random.Generator) -> np.ndarray:
    """Area-weighted uniform samples on a triangle mesh."""
    a = triangle_areas(mesh)
    tri = rng.choice(len(a), size=n, p=a / a.sum())
    u, v = rng.uniform(size=(2, n))
    flip = u + v > 1
    u[flip], v[flip] = 1 - u[flip], 1 - v[flip]
    p = mesh.vertices[mesh.triangles[tri]]
    return p[:, 0] + u[:, None] * (p[:, 1] - p[:, 0]) + v[:, None] * (p[:, 2] - p[:, 0])


def initial_avatar(mesh: TriangleMesh, n: int, d_feat: int, d_exp: int, seed: int) -> Avatar:
    rng = np.random.default_rng(seed)
    pos = sample_surface(mesh, n, rng)
    extent = np.ptp(mesh.vertices, axis=0).max()
    size = extent * np.sqrt(1.0 / n) * 0.5
    g = GaussianSet(pos, rng.normal(0, 1, (n, d_feat)), rot.normalize(rng.normal(0, 1, (n, 4))),
                    np.full((n, 3), np.log(size)), np.full(n, 2.0))
    return Avatar(g, ResidualFieldBank.linear_blend(n, d_feat, d_exp, rng=rng, std=1e-3))


def cmd_fit_avatar(args, cfg: PipelineConfig) -> int:
    b = bundle_io.load_bundle(_require(args.scene, "scene"))
    mesh = load_mesh(_require(args.mesh, "mesh")) if args.mesh else b.prior()
    if mesh is None:
        raise FitError("no mesh: pass --mesh or use a bundle with a prior")
    obs = b.observations(with_landmarks=False)
    avatar = initial_avatar(mesh, args.n, 16, len(b.track.theta[0]), cfg.stage2.seed)
    s2 = _stage2_cfg(cfg, args)
    avatar, trace = fit_stage2(avatar, obs, s2)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_avatar(avatar, out / "avatar")
    save_trace(trace, out / "trace.json")
    save_trace(trace, out / "trace.csv")
    reports = [SplitReport.from_dict(e) for e in trace.split_events]
    (out / "splits.json").write_text(split_reports_to_json(reports, {"tau_split": s2.control.tau_split}))
    last = trace.rows[-1]
    print(f"avatar: {len(avatar.gaussians)} Gaussians; psnr {last.psnr if last.psnr is not None else float('nan'):.3f} dB")
    return 0


def _render_track(avatar: Avatar, theta, beta, transforms, cams, out: Path, ctl: ControlConfig, background) -> int:
    out.mkdir(parents=True, exist_ok=True)
    count = 0
    for f in range(len(theta)):
        for v, cam in enumerate(cams):
            o = Observation(theta[f], beta[f], transforms[f], cam, np.zeros((cam.height, cam.width, 3)))
            frame = render_observation(avatar, o, ctl, background)[0]
            stem = f"f{f:04d}_v{v:02d}"
            save_frame(frame.rgb, out / f"{stem}.npy")
            save_png(frame.rgb, out / f"{stem}.png")
            count += 1
    return count


def _avatar_arg(path) -> Avatar:
    d = Path(path)
    if not (d / "avatar.json").exists():
        raise FileNotFoundError(2, f"avatar not found: {d / 'avatar.json'}", str(d / "avatar.json"))
    return load_avatar(d)


def cmd_render(args, cfg: PipelineConfig) -> int:
    avatar = _avatar_arg(args.avatar)
    d_exp = avatar.bank.d_exp
    if args.track:
        t = read_track(_require(args.track, "track"))
        theta, beta, transforms = t.theta, t.beta, t.transforms
        cams = ring_cameras(args.views, args.size)
    else:
        theta = np.zeros((1, d_exp))
        if args.theta:
            vals = [float(x) for x in args.theta.split(",")]
            theta[0, : len(vals)] = vals
        beta = np.zeros((1, 6))
        if args.beta:
            beta[0] = [float(x) for x in args.beta.split(",")]
        transforms = [RigidTransform.identity()]
        cams = ring_cameras(args.views, args.size)
    ctl = cfg.stage2.control
    n = _render_track(avatar, theta, beta, transforms, cams, Path(args.out), ctl, cfg.stage2.background)
    print(f"rendered {n} frames -> {args.out}")
    return 0


def cmd_reenact(args, cfg: PipelineConfig) -> int:
    avatar = _avatar_arg(args.avatar)
    b = bundle_io.load_bundle(_require(args.scene, "scene"))
    if b.track.theta.shape[1] != avatar.bank.d_exp:
        raise ValueError(f"track has {b.track.theta.shape[1]} expression coefficients, avatar expects {avatar.bank.d_exp}")
    n = _render_track(avatar, b.track.theta, b.track.beta, b.track.transforms, b.cameras, Path(args.out),
                      cfg.stage2.control, cfg.stage2.background)
    print(f"reenacted {n} frames -> {args.out}")
    return 0


def metrics_table(dir_a, dir_b) -> List[dict]:
    fa = {p.stem: p for p in list_frames(dir_a)}
    fb = {p.stem: p for p in list_frames(dir_b)}
    common = sorted(set(fa) & set(fb))
    if not common:
        raise ValueError(f"no frames in common between {dir_a} and {dir_b}")
    rows = []
    for k in common:
        a, b = load_frame(fa[k]), load_frame(fb[k])
        rows.append({"frame": k, "psnr": psnr(a, b), "ssim": ssim(a, b)})
    return rows


def cmd_metrics(args, cfg: PipelineConfig) -> int:
    rows = metrics_table(_require(args.a, "directory"), _require(args.b, "directory"))
    lines = ["frame,psnr,ssim"] + [f"{r['frame']},{r['psnr']:.4f},{r['ssim']:.6f}" for r in rows]
    lines.append(f"mean,{np.mean([r['psnr'] for r in rows]):.4f},{np.mean([r['ssim'] for r in rows]):.6f}")
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text)
    sys.stdout.write(text)
    return 0


def cmd_split_report(args, cfg: PipelineConfig) -> int:
    avatar = _avatar_arg(args.avatar)
    t = read_track(_require(args.track, "track"))
    ctl = cfg.stage2.control
    if args.tau_split is not None:
        ctl = ctl.replace(tau_split=args.tau_split)
    reports = []
    sweep = {}
    taus = sorted({ctl.tau_split, *[float(x) for x in args.sweep.split(",") if x]})
    for f, th in enumerate(t.theta):
        delta = displacement_magnitudes(avatar.gaussians.positions, th, avatar.bank)
        parents = np.flatnonzero(delta > ctl.tau_split)
        reports.append(SplitReport(parents=parents.tolist(),
                                   children=[[int(p), len(delta) + k] for k, p in enumerate(parents)],
                                   magnitudes=delta[parents].tolist(), iteration=int(t.frames[f])))
        for tau in taus:
            sweep.setdefault(repr(tau), []).append(int((delta > tau).sum()))
    text = split_reports_to_json(reports, {"tau_split": ctl.tau_split, "sweep": sweep})
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    Path(args.out).write_text(text)
    print(f"{sum(r.count for r in reports)} splits over {len(reports)} frames at tau_split={ctl.tau_split}")
    return 0


# -- parser ----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="gsavatar", description="Expression-aware Gaussian head avatars.")
    p.add_argument("--config", help="TOML configuration file")
    p.add_argument("--print-config", action="store_true", help="print the effective configuration and exit")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    s = sub.add_parser("make-scene", help="generate a synthetic scene bundle")
    s.add_argument("--out", required=True)
    s.add_argument("--shape", choices=("sphere", "blendshape-head"))
    s.add_argument("--n", type=int)
    s.add_argument("--views", type=int)
    s.add_argument("--frames", type=int)
    s.add_argument("--size", type=int)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_make_scene)

    s = sub.add_parser("fit-geometry", help="stage I: fit the lattice SDF to a scene")
    s.add_argument("--scene", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--resolution", type=int, default=20)
    s.add_argument("--iterations", type=int)
    s.set_defaults(func=cmd_fit_geometry)

    s = sub.add_parser("fit-avatar", help="stage II: fit Gaussians and residual fields")
    s.add_argument("--scene", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--mesh", help="stage-I mesh to seed Gaussians on (default: the bundle prior)")
    s.add_argument("--n", type=int, default=200)
    s.add_argument("--iterations", type=int)
    s.set_defaults(func=cmd_fit_avatar)

    s = sub.add_parser("render", help="render an avatar for a track or one theta/beta")
    s.add_argument("--avatar", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--track", help="CSV track (frame, theta..., beta..., T...)")
    s.add_argument("--theta", help="comma-separated leading expression coefficients")
    s.add_argument("--beta", help="six comma-separated pose values")
    s.add_argument("--views", type=int, default=1)
    s.add_argument("--size", type=int, default=64)
    s.set_defaults(func=cmd_render)

    s = sub.add_parser("reenact", help="drive an avatar with another bundle's track and cameras")
    s.add_argument("--avatar", required=True)
    s.add_argument("--scene", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_reenact)

    s = sub.add_parser("metrics", help="PSNR/SSIM table between two frame directories")
    s.add_argument("--a", required=True)
    s.add_argument("--b", required=True)
    s.add_argument("--out", help="also write the table as CSV")
    s.set_defaults(func=cmd_metrics)

    s = sub.add_parser("split-report", help="which Gaussians a track would split")
    s.add_argument("--avatar", required=True)
    s.add_argument("--track", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--tau-split", type=float)
    s.add_argument("--sweep", default="0.1,0.15,0.2,0.3,0.4", help="extra thresholds to count")
    s.set_defaults(func=cmd_split_report)
    return p


def run_cli(argv: Optional[Sequence[str]] = None, stderr=None) -> int:
    stderr = stderr or sys.stderr
    try:
        args = build_parser().parse_args(list(argv) if argv is not None else None)
        cfg = _config(args)
        if args.print_config:
            sys.stdout.write(dumps(cfg))
            return 0
        if not args.command:
            raise UsageError("a subcommand is required")
        return args.func(args, cfg)
    except UsageError as e:
        print(_fail("usage", str(e)), file=stderr)
        return EXIT_USAGE
    except FileNotFoundError as e:
        print(_fail("missing-file", e.strerror or str(e), e.filename), file=stderr)
        return EXIT_MISSING
    except (ConfigError, MeshFormatError, GsavFormatError) as e:
        print(_fail("format", str(e)), file=stderr)
        return EXIT_FORMAT
    except FitError as e:
        print(_fail("fit", str(e)), file=stderr)
        return EXIT_FIT
    except Exception as e:  # noqa: BLE001 - the CLI contract is one parsable line
        print(_fail(type(e).__name__, str(e).replace("\n", " ")), file=stderr)
        return EXIT_OTHER


def main() -> None:
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
