"""Compiled vs pure-Python rasterizer kernels.

    python -m gsavatar.bench [--sizes 32,64,128] [--n 200] [--repeat 3]

Prints one row per (image size, backend, pass) with the best wall time and
the largest difference from the Python reference.
"""
from __future__ import annotations

import argparse
import time

import numpy as np

from .control import ControlConfig
from .core import RigidTransform, assemble_avatar
from .io.scene import blendshape_head, ring_cameras
from .render import available_backends, rasterize, rasterize_backward


def _best(fn, repeat: int):
    best, out = np.inf, None
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t0)
    return best, out


def run(sizes=(32, 64, 128), n: int = 200, repeat: int = 3, seed: int = 0):
    avatar = blendshape_head(n, seed=seed)
    theta = np.zeros(avatar.bank.d_exp)
    world = assemble_avatar(avatar.gaussians, theta, np.zeros(6), RigidTransform(),
                            avatar.bank, ControlConfig(split_enabled=False))
    rng = np.random.default_rng(seed)
    rows = []
    for size in sizes:
        cam = ring_cameras(1, size)[0]
        g_rgb = rng.normal(size=(size, size, 3))
        g_alpha = rng.normal(size=(size, size))
        ref = {}
        for backend in ["python"] + [b for b in available_backends() if b != "python"]:
            t_f, frame = _best(lambda: rasterize(world, world.colors, cam, backend=backend), repeat)
            t_b, grads = _best(lambda: rasterize_backward(world, world.colors, cam, grad_rgb=g_rgb,
                                                                  grad_alpha=g_alpha, backend=backend), repeat)
            if backend == "python":
                ref = {"fwd": frame.rgb, "bwd": grads.colors}
            rows.append((size, backend, "forward", t_f, float(np.abs(frame.rgb - ref["fwd"]).max())))
            rows.append((size, backend, "backward", t_b, float(np.abs(grads.colors - ref["bwd"]).max())))
    return rows


def main(argv=None) -> None:
    p = argparse.ArgumentParser(prog="gsavatar.bench", description=__doc__.splitlines()[0])
    p.add_argument("--sizes", default="32,64,128")
    p.add_argument("--n", type=int, default=200)
    p.add_argument("--repeat", type=int, default=3)
    a = p.parse_args(argv)
    rows = run(tuple(int(s) for s in a.sizes.split(",")), a.n, a.repeat)
    print(f"{'size':>5} {'backend':>9} {'pass':>9} {'ms':>10} {'speedup':>8} {'max diff':>10}")
    base = {(r[0], r[2]): r[3] for r in rows if r[1] == "python"}
    for size, backend, kind, t, diff in rows:
        print(f"{size:>5} {backend:>9} {kind:>9} {1e3 * t:>10.2f} {base[(size, kind)] / t:>7.1f}x {diff:>10.2e}")


if __name__ == "__main__":
    main()
