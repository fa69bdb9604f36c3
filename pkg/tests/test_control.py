import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gsavatar.control import (
    ControlConfig,
    ControlError,
    SpatialIndex,
    SplitCapExceeded,
    SplitReport,
    displacement_magnitudes,
    memberships,
    neighborhoods,
    propagate,
    propagate_vjp,
    propagation_weight_table,
    propagation_weights,
    select_controls,
    split_gaussians,
)
from gsavatar.core import GaussianSet
from gsavatar.fields import ResidualFieldBank

from conftest import central_fd, random_bank, random_set, rel_err


def brute_neighbors(pos, controls, r):
    cs = set(int(c) for c in controls)
    out = {}
    for i in controls:
        d = np.linalg.norm(pos - pos[i], axis=1)
        out[int(i)] = np.array([j for j in range(len(pos)) if d[j] < r and j != i and j not in cs], dtype=np.int64)
    return out


def test_magnitude_euclidean():
    bank = ResidualFieldBank.linear_blend(1)
    p = bank.params()
    w = np.zeros((1, 3, 32))
    w[0, :, 0] = [0.3, 0.4, 0.0]
    th = np.zeros(32)
    th[0] = 1.0
    assert displacement_magnitudes(np.zeros((1, 3)), th, bank.with_params(p | {"field.def.exp.weights": w}))[0] == 0.5


def test_magnitude_zero_bank():
    assert np.array_equal(displacement_magnitudes(np.zeros((4, 3)), np.ones(32), ResidualFieldBank.linear_blend(4)),
                          np.zeros(4))


def test_magnitude_elementwise_and_pose_excluded():
    n = 20
    g = random_set(n)
    bank = random_bank(n)
    th = np.random.default_rng(0).normal(size=32)
    got = displacement_magnitudes(g.positions, th, bank)
    for i in range(n):
        assert abs(got[i] - np.linalg.norm(bank["def", "exp"].weights[i] @ th)) < 1e-14


def test_magnitude_dimension_mismatch():
    with pytest.raises(ControlError):
        displacement_magnitudes(np.zeros((2, 3)), np.zeros(5), ResidualFieldBank.linear_blend(2))


def test_select_strict():
    assert list(select_controls(np.array([0.1, 0.35, 0.30]), 0.3)) == [1]
    d = np.array([0.2, 0.7, 0.4])
    assert select_controls(d, d.max()).size == 0


def test_neighbors_colinear():
    pos = np.array([[0.0, 0, 0], [0.04, 0, 0], [0.10, 0, 0]])
    assert list(neighborhoods(pos, [0], ControlConfig(radius_r=0.05))[0]) == [1]


def test_neighbors_radius_strict():
    pos = np.array([[0.0, 0, 0], [0.05, 0, 0]])
    assert neighborhoods(pos, [0], ControlConfig(radius_r=0.05))[0].size == 0


def test_neighbors_empty_below_spacing():
    pos = np.arange(10)[:, None] * np.array([[0.1, 0, 0]])
    nb = neighborhoods(pos, [0, 3, 7], ControlConfig(radius_r=0.09))
    assert all(v.size == 0 for v in nb.values())


def test_controls_never_neighbors():
    pos = np.array([[0.0, 0, 0], [0.01, 0, 0], [0.02, 0, 0]])
    nb = neighborhoods(pos, [0, 1], ControlConfig(radius_r=0.05))
    assert list(nb[0]) == [2] and list(nb[1]) == [2]


def test_neighbors_match_brute_force_200():
    pos = np.random.default_rng(7).uniform(-0.3, 0.3, (200, 3))
    controls = np.arange(0, 200, 9)
    cfg = ControlConfig(radius_r=0.12)
    got = neighborhoods(pos, controls, cfg)
    want = brute_neighbors(pos, controls, cfg.radius_r)
    assert got.keys() == want.keys()
    for k in want:
        assert np.array_equal(got[k], want[k])


def test_spatial_index_each_point_once():
    pos = np.random.default_rng(1).uniform(-1, 1, (300, 3))
    idx = SpatialIndex(pos, 0.2)
    allidx = np.sort(np.concatenate(list(idx.cells.values())))
    assert np.array_equal(allidx, np.arange(300))


def test_weights_cases():
    pos = np.array([[0.0, 0, 0], [1.0, 0, 0], [-1.0, 0, 0], [0, 2.0, 0]])
    assert np.array_equal(propagation_weights(pos, 0, [1], 1.0), [1.0])
    assert np.allclose(propagation_weights(pos, 0, [1, 2], 1.0), [0.5, 0.5], atol=1e-15)
    w = propagation_weights(pos, 0, [1, 3], 1.0)
    assert np.allclose(w, [0.9526, 0.0474], atol=1e-3)
    # direct scalar evaluation of the kernel
    e1, e2 = np.exp(-1.0), np.exp(-4.0)
    assert np.allclose(w, [e1 / (e1 + e2), e2 / (e1 + e2)], atol=1e-15)


def test_weights_empty_error():
    with pytest.raises(ControlError):
        propagation_weights(np.zeros((2, 3)), 0, [], 1.0)


def test_weights_uniform_limit():
    pos = np.random.default_rng(3).normal(size=(6, 3))
    w = propagation_weights(pos, 0, [1, 2, 3, 4], 1e6)
    assert np.abs(w - 0.25).max() < 1e-6


def test_weight_table_matches_per_gaussian():
    rng = np.random.default_rng(11)
    pos = rng.normal(scale=0.1, size=(40, 3))
    members = {int(j): rng.choice(5, size=int(rng.integers(1, 6)), replace=False) for j in range(5, 40, 3)}
    rows, cols, w = propagation_weight_table(pos, members, 0.05)
    assert np.all(np.diff(rows) >= 0)
    for j, cj in members.items():
        assert np.array_equal(cols[rows == j], cj)
        assert np.allclose(w[rows == j], propagation_weights(pos, j, cj, 0.05), rtol=1e-12, atol=1e-15)
    with pytest.raises(ControlError):
        propagation_weight_table(pos, {3: []}, 0.05)
    assert propagation_weight_table(pos, {}, 0.05)[0].size == 0


def test_propagate_single_control():
    pos = np.array([[0.0, 0, 0], [0.02, 0, 0]])
    out = propagate(pos.copy(), pos, {0: np.array([0.4, 0, 0])}, {1: np.array([0])}, ControlConfig())
    assert np.array_equal(out[1], pos[1] + [0.4, 0, 0])
    assert np.array_equal(out[0], pos[0])


def test_propagate_no_controls():
    base = np.random.default_rng(0).normal(size=(5, 3))
    assert np.array_equal(propagate(base, base * 0, {}, {}, ControlConfig()), base)


def test_propagate_two_controls_manual():
    rng = np.random.default_rng(11)
    canon = rng.uniform(-0.02, 0.02, (5, 3))
    base = canon + rng.normal(0, 0.01, (5, 3))
    cfg = ControlConfig(radius_r=0.1)
    disp = {0: np.array([0.4, 0.0, 0.1]), 1: np.array([0.0, -0.5, 0.2])}
    members = memberships(neighborhoods(canon, [0, 1], cfg))
    out = propagate(base, canon, disp, members, cfg)
    for j in (2, 3, 4):
        w = np.array([np.exp(-np.sum((canon[j] - canon[i]) ** 2) / cfg.sigma**2) for i in (0, 1)])
        w /= w.sum()
        assert np.allclose(out[j], base[j] + w[0] * disp[0] + w[1] * disp[1], atol=1e-14)


def test_propagate_bad_membership():
    with pytest.raises(ControlError):
        propagate(np.zeros((3, 3)), np.zeros((3, 3)), {0: np.zeros(3)}, {2: [1]}, ControlConfig())


def test_propagate_vjp_fd():
    rng = np.random.default_rng(2)
    canon = rng.uniform(-0.03, 0.03, (6, 3))
    cfg = ControlConfig(radius_r=0.2)
    disp = {0: rng.normal(size=3), 1: rng.normal(size=3)}
    members = memberships(neighborhoods(canon, [0, 1], cfg))
    base = rng.normal(size=(6, 3))
    go = rng.normal(size=(6, 3))
    gb, gd, gc = propagate_vjp(canon, disp, members, cfg, go)
    f = lambda c: float(np.sum(propagate(base, c, disp, members, cfg) * go))  # noqa: E731
    assert rel_err(gc, central_fd(f, canon, 1e-7)) < 1e-5
    fd0 = central_fd(lambda d: float(np.sum(propagate(base, canon, {0: d, 1: disp[1]}, members, cfg) * go)), disp[0])
    assert rel_err(gd[0], fd0) < 1e-6
    assert np.array_equal(gb, go)


def _set(n, seed=0):
    g = random_set(n, seed=seed)
    return g


def test_split_one_trigger():
    g = _set(2)
    out, rep, idx = split_gaussians(g, np.array([0.25, 0.05]), ControlConfig(tau_split=0.2))
    assert len(out.positions) == 3
    assert rep.parents == [0] and rep.children == [[0, 2]]


def test_split_noop():
    g = _set(4)
    out, rep, idx = split_gaussians(g, np.full(4, 0.1), ControlConfig())
    assert out is g and rep.count == 0


def test_split_inheritance_and_placement():
    g = _set(5, seed=3)
    delta = np.array([0.5, 0.1, 0.3, 0.0, 0.25])
    dirs = np.random.default_rng(0).normal(size=(5, 3))
    cfg = ControlConfig()
    out, rep, idx = split_gaussians(g, delta, cfg, directions=dirs)
    assert rep.parents == [0, 2, 4]
    for k, (p, (c1, c2)) in enumerate(zip(rep.parents, rep.children)):
        for c in (c1, c2):
            assert np.array_equal(out.features[c], g.features[p])
            assert np.array_equal(out.rotations[c], g.rotations[p])
            assert np.array_equal(out.opacity_logits[c], g.opacity_logits[p])
            assert np.allclose(np.exp(out.log_scales[c]), 0.8 * np.exp(g.log_scales[p]), rtol=1e-14)
        off = cfg.split_epsilon * np.exp(g.log_scales[p]).mean() * dirs[p] / np.linalg.norm(dirs[p])
        assert np.allclose(out.positions[c1], g.positions[p] + off, atol=1e-15)
        assert np.allclose(out.positions[c2], g.positions[p] - off, atol=1e-15)
    for j in (1, 3):
        assert np.array_equal(out.positions[j], g.positions[j])
        assert np.array_equal(out.log_scales[j], g.log_scales[j])


def test_split_degenerate_direction_flagged():
    g = _set(1)
    out, rep, _ = split_gaussians(g, np.array([1.0]), ControlConfig(), directions=np.zeros((1, 3)))
    assert rep.degenerate == [0]
    assert out.positions[0, 0] > g.positions[0, 0] and out.positions[0, 1] == g.positions[0, 1]


def test_split_cap():
    with pytest.raises(SplitCapExceeded):
        split_gaussians(_set(3), np.ones(3), ControlConfig(n_max=4))


def test_split_report_json_round_trip():
    _, rep, _ = split_gaussians(_set(4), np.array([0.3, 0.0, 0.9, 0.1]), ControlConfig(), iteration=500)
    back = SplitReport.from_dict(json.loads(json.dumps(rep.to_dict())))
    assert back == rep and back.iteration == 500
    assert len(sum(back.children, [])) == 2 * back.count


def test_config_validation():
    with pytest.raises(ControlError):
        ControlConfig(tau_control=0)
    with pytest.raises(ControlError):
        ControlConfig(split_scale_factor=1.5)
    assert ControlConfig(radius_r=0.08).sigma == 0.04


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000), t1=st.floats(0, 1), t2=st.floats(0, 1))
def test_controls_monotone(seed, t1, t2):
    d = np.random.default_rng(seed).uniform(0, 1, 50)
    lo, hi = min(t1, t2), max(t1, t2)
    assert set(select_controls(d, hi)) <= set(select_controls(d, lo))


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000), n=st.integers(2, 40), sigma=st.floats(1e-3, 10.0))
def test_weights_normalized(seed, n, sigma):
    # controls lie within r = 2 sigma of the Gaussian they affect
    rng = np.random.default_rng(seed)
    u = rng.normal(size=(n, 3))
    pos = u / np.linalg.norm(u, axis=1, keepdims=True) * (2 * sigma) * rng.uniform(0, 1, (n, 1)) ** (1 / 3)
    pos[0] = 0.0
    k = rng.integers(1, n)
    w = propagation_weights(pos, 0, rng.choice(np.arange(1, n), size=k, replace=False), sigma)
    assert abs(w.sum() - 1) < 1e-9
    assert np.all(w > 0) and np.all(w <= 1)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_propagation_local(seed):
    rng = np.random.default_rng(seed)
    canon = rng.uniform(-0.2, 0.2, (80, 3))
    base = canon + rng.normal(0, 0.01, canon.shape)
    cfg = ControlConfig(radius_r=0.06)
    controls = rng.choice(80, size=6, replace=False)
    nb = neighborhoods(canon, controls, cfg)
    out = propagate(base, canon, {int(i): rng.normal(size=3) for i in controls}, memberships(nb), cfg)
    touched = set(np.concatenate(list(nb.values())).tolist()) if nb else set()
    for j in range(80):
        if j not in touched:
            assert np.array_equal(out[j], base[j])


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), tau=st.floats(0.01, 1.0))
def test_split_count(seed, tau):
    rng = np.random.default_rng(seed)
    g = random_set(30, seed=seed)
    delta = rng.uniform(0, 1, 30)
    out, rep, _ = split_gaussians(g, delta, ControlConfig(tau_split=tau), directions=rng.normal(size=(30, 3)))
    assert len(out.positions) - 30 == int(np.sum(delta > tau)) == rep.count


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000), r=st.floats(0.02, 0.3), cell_ratio=st.floats(0.3, 2.5))
def test_grid_pairs_match_brute_force(seed, r, cell_ratio):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 300))
    pos = rng.uniform(-0.4, 0.4, (n, 3))
    centers = rng.choice(n, size=int(rng.integers(1, n + 1)), replace=False)
    rows, pts = SpatialIndex(pos, r * cell_ratio).pairs_within(centers, r)
    want = [(k, j) for k, c in enumerate(centers) for j in range(n) if np.sum((pos[j] - pos[c]) ** 2) < r * r]
    assert list(zip(rows.tolist(), pts.tolist())) == want
