import numpy as np
import pytest

from gsavatar import _rotation as rot
from gsavatar.core import GaussianSet
from gsavatar.fields import ResidualFieldBank


def random_set(n, d_feat=16, seed=0, spread=0.4):
    rng = np.random.default_rng(seed)
    return GaussianSet(
        rng.uniform(-spread, spread, (n, 3)),
        rng.normal(0.0, 1.0, (n, d_feat)),
        rot.normalize(rng.normal(0.0, 1.0, (n, 4))),
        rng.normal(-3.0, 0.3, (n, 3)),
        rng.normal(0.0, 1.0, n),
    )


def random_bank(n, d_feat=16, d_exp=32, seed=0, std=0.05):
    return ResidualFieldBank.linear_blend(n, d_feat, d_exp, rng=np.random.default_rng(seed + 1000), std=std)


def rel_err(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), np.max(np.abs(a)), 1e-12))


def central_fd(f, x, h=1e-6):
    """Central differences of scalar ``f`` over every entry of array ``x``."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for k in range(flat.size):
        old = flat[k]
        flat[k] = old + h
        fp = f(x)
        flat[k] = old - h
        fm = f(x)
        flat[k] = old
        gflat[k] = (fp - fm) / (2 * h)
    return g


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def lumpy_mesh(resolution=24):
    """Closed surface without rotational symmetry (ellipsoid plus two bumps)."""
    from gsavatar.geometry import SdfGrid, extract_surface

    def sdf(p):
        e = np.linalg.norm(p / np.array([0.30, 0.22, 0.18]), axis=1) - 1.0
        b1 = np.linalg.norm(p - np.array([0.22, 0.10, 0.05]), axis=1) - 0.12
        b2 = np.linalg.norm(p - np.array([-0.05, -0.15, 0.12]), axis=1) - 0.09
        return np.minimum(np.minimum(e * 0.18, b1), b2)

    return extract_surface(SdfGrid.from_function(sdf, resolution, 0))


def random_scene(n, seed=0, size=16, opacity=(0.2, 0.9)):
    """Small Gaussian cloud in front of an identity camera, plus that camera."""
    from gsavatar.core import WorldGaussians
    from gsavatar.render import Camera

    rng = np.random.default_rng(seed)
    pos = np.column_stack([rng.uniform(-0.4, 0.4, (n, 2)), rng.uniform(1.6, 2.4, n)])
    op = rng.uniform(*opacity, n)
    g = WorldGaussians(
        pos,
        rng.uniform(0, 1, (n, 3)),
        rot.normalize(rng.normal(size=(n, 4))),
        np.log(rng.uniform(0.05, 0.15, (n, 3))),
        np.log(op / (1 - op)),
    )
    cam = Camera(size * 2.0, size * 2.0, size / 2.0, size / 2.0, size, size)
    return g, cam


def replace(g, **kw):
    from dataclasses import replace as _replace

    return _replace(g, **kw)
