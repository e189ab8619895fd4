import numpy as np
import pytest

from spherical_frustum.errors import ShapeMismatch
from spherical_frustum.frustum import build_frustum_grid
from spherical_frustum.hashindex import build_hash_index
from spherical_frustum.sfconv import (ConvKernel, gather_at, gather_neighbors, gather_upsample, read_tensors,
                                      sfc_backward, sfc_forward, upsample_sfc_forward, write_tensors)

import oracles
from conftest import make_grid, random_uvr

H, W = 8, 16


def plan_set(plan):
    return set(zip(plan.center.tolist(), plan.offset.tolist(), plan.source.tolist()))


def scene(rng, n=200, cells=50, tie_ranges=False):
    u, v, r = random_uvr(rng, n, H, W, cells=cells, tie_ranges=tie_ranges)
    grid, index = make_grid(u, v, r, H, W)
    return u, v, r, grid, index


@pytest.mark.parametrize("wrap", [True, False])
@pytest.mark.parametrize("ties", [False, True])
def test_plan_matches_brute_force(rng, wrap, ties):
    for K in (1, 3, 5):
        u, v, r, grid, index = scene(rng, tie_ranges=ties)
        plan = gather_neighbors(np.arange(grid.N), grid, index, K, wrap)
        expect = oracles.gather_plan(u, v, r, u, v, r, grid.m, K, H, W, wrap)
        assert plan_set(plan) == expect
        assert np.all(plan.valid_counts <= K * K)


def test_k1_gathers_own_nearest(rng):
    u, v, r, grid, index = scene(rng)
    plan = gather_neighbors(np.arange(grid.N), grid, index, 1)
    assert np.all(plan.offset == 0)
    for c, j in zip(plan.center, plan.source):
        assert (u[j], v[j]) == (u[c], v[c])
        if grid.cell_count[(u[c], v[c])] == 1:
            assert j == c
        assert abs(r[j] - r[c]) == 0.0


def test_isolated_center():
    grid, index = make_grid(np.array([4, 10]), np.array([3, 6]), np.array([2.0, 3.0]), H, W)
    plan = gather_neighbors([0], grid, index, 3)
    assert plan_set(plan) == {(0, 4, 0)}
    assert plan.valid_counts.tolist() == [1]


def test_offsets_distinct_per_center(rng):
    _, _, _, grid, index = scene(rng)
    plan = gather_neighbors(np.arange(grid.N), grid, index, 3)
    pairs = list(zip(plan.center.tolist(), plan.offset.tolist()))
    assert len(pairs) == len(set(pairs))


def test_gather_at_matches_oracle(rng):
    u, v, r, grid, index = scene(rng)
    cu, cv = rng.integers(0, W, 30), rng.integers(0, H, 30)
    cr = rng.uniform(1, 50, 30)
    plan = gather_at(cu, cv, cr, grid, index, 3)
    assert plan_set(plan) == oracles.gather_plan(cu, cv, cr, u, v, r, grid.m, 3, H, W, True)


def test_plan_deterministic(rng):
    _, _, _, grid, index = scene(rng)
    a = gather_neighbors(np.arange(grid.N), grid, index, 3)
    b = gather_neighbors(np.arange(grid.N), grid, index, 3)
    assert np.array_equal(a.center, b.center) and np.array_equal(a.source, b.source)
    assert np.array_equal(a.offset, b.offset)


@pytest.mark.parametrize("wrap", [True, False])
def test_forward_matches_dense_oracle(rng, wrap):
    for K in (1, 3, 5, 9):
        u, v, r, grid, index = scene(rng, n=120, cells=40)
        feats = rng.normal(size=(grid.N, 3))
        kernel = ConvKernel.random(K, 3, 4, rng)
        plan = gather_neighbors(np.arange(grid.N), grid, index, K, wrap)
        out = sfc_forward(feats, plan, kernel)
        expect = oracles.dense_conv_at_centers(feats, u, v, r, grid.m, kernel.weights, kernel.bias, H, W, wrap)
        assert np.max(np.abs(out - expect)) < 1e-9


def test_forward_float32_close_to_float64(rng):
    _, _, _, grid, index = scene(rng)
    feats = rng.normal(size=(grid.N, 4))
    kernel = ConvKernel.random(3, 4, 5, rng)
    plan = gather_neighbors(np.arange(grid.N), grid, index, 3)
    out32 = sfc_forward(feats.astype(np.float32), plan, kernel)
    assert out32.dtype == np.float32
    assert np.allclose(out32, sfc_forward(feats, plan, kernel), atol=1e-5)


def test_identity_kernel():
    u = np.arange(10)
    grid, index = make_grid(u, np.zeros(10, int), np.linspace(1, 2, 10), 1, 10)
    feats = np.random.default_rng(0).normal(size=(10, 3))
    kernel = ConvKernel(np.eye(3)[None])
    plan = gather_neighbors(np.arange(10), grid, index, 1)
    assert np.array_equal(sfc_forward(feats, plan, kernel), feats)
    g = np.random.default_rng(1).normal(size=(10, 3))
    gf, _, gb = sfc_backward(g, plan, kernel, feats)
    assert np.array_equal(gf, g)
    assert gb is None


def test_zero_weights_and_zero_grad(rng):
    _, _, _, grid, index = scene(rng)
    feats = rng.normal(size=(grid.N, 3))
    plan = gather_neighbors(np.arange(grid.N), grid, index, 3)
    kernel = ConvKernel(np.zeros((9, 2, 3)))
    assert not np.any(sfc_forward(feats, plan, kernel))
    kernel = ConvKernel.random(3, 3, 2, rng)
    gf, gw, gb = sfc_backward(np.zeros((grid.N, 2)), plan, kernel, feats)
    assert not np.any(gf) and not np.any(gw) and not np.any(gb)


def test_linearity_and_adjoint(rng):
    for _ in range(10):
        _, _, _, grid, index = scene(rng)
        plan = gather_neighbors(np.arange(grid.N), grid, index, 3)
        kernel = ConvKernel.random(3, 3, 2, rng, bias=False)
        f, g = rng.normal(size=(2, grid.N, 3))
        a, b = rng.normal(size=2)
        lhs = sfc_forward(a * f + b * g, plan, kernel)
        rhs = a * sfc_forward(f, plan, kernel) + b * sfc_forward(g, plan, kernel)
        assert np.max(np.abs(lhs - rhs)) < 1e-6
        y = rng.normal(size=(grid.N, 2))
        gf, _, _ = sfc_backward(y, plan, kernel, f)
        assert abs(np.sum(sfc_forward(f, plan, kernel) * y) - np.sum(f * gf)) < 1e-6


def finite_difference_check(rng, n=40, c_in=2, c_out=2, K=3, step=1e-4):
    """Max |analytic - numeric| / max |numeric| over features, weights and bias."""
    u, v, r = random_uvr(rng, n, H, W, cells=15)
    grid, index = make_grid(u, v, r, H, W)
    plan = gather_neighbors(np.arange(n), grid, index, K)
    kernel = ConvKernel.random(K, c_in, c_out, rng)
    feats = rng.normal(size=(n, c_in))
    y = rng.normal(size=(n, c_out))

    def loss(f, w, b):
        return float(np.sum(sfc_forward(f, plan, ConvKernel(w, b)) * y))

    gf, gw, gb = sfc_backward(y, plan, kernel, feats)
    worst = 0.0
    for analytic, base, slot in ((gf, feats, 0), (gw, kernel.weights, 1), (gb, kernel.bias, 2)):
        numeric = np.zeros_like(base)
        for idx in np.ndindex(base.shape):
            args = [feats.copy(), kernel.weights.copy(), kernel.bias.copy()]
            args[slot][idx] += step
            up = loss(*args)
            args[slot][idx] -= 2 * step
            numeric[idx] = (up - loss(*args)) / (2 * step)
        scale = max(np.max(np.abs(numeric)), 1e-12)
        worst = max(worst, float(np.max(np.abs(analytic - numeric)) / scale))
    return worst


def test_gradient_finite_differences(rng):
    for _ in range(3):
        assert finite_difference_check(rng) < 1e-4


def test_locality(rng):
    # two clusters more than a kernel radius apart never interact
    u = np.r_[rng.integers(0, 4, 30), rng.integers(9, 13, 30)]
    v = rng.integers(0, H, 60)
    r = rng.uniform(1, 20, 60)
    grid, index = make_grid(u, v, r, H, W)
    plan = gather_neighbors(np.arange(60), grid, index, 3, wrap_azimuth=False)
    kernel = ConvKernel.random(3, 2, 2, rng)
    f = rng.normal(size=(60, 2))
    g = f.copy()
    g[30:] += 5.0
    assert np.array_equal(sfc_forward(f, plan, kernel)[:30], sfc_forward(g, plan, kernel)[:30])


def test_shape_mismatch(rng):
    _, _, _, grid, index = scene(rng)
    plan = gather_neighbors(np.arange(grid.N), grid, index, 3)
    with pytest.raises(ShapeMismatch):
        sfc_forward(np.zeros((grid.N, 4)), plan, ConvKernel.random(3, 3, 2, rng))
    with pytest.raises(ShapeMismatch):
        sfc_forward(np.zeros((grid.N, 3)), plan, ConvKernel.random(1, 3, 2, rng))
    with pytest.raises(ShapeMismatch):
        sfc_backward(np.zeros((grid.N, 3)), plan, ConvKernel.random(3, 3, 2, rng), np.zeros((grid.N, 3)))


def test_kernel_validation():
    with pytest.raises(ShapeMismatch):
        ConvKernel(np.zeros((4, 2, 2)))
    with pytest.raises(ShapeMismatch):
        ConvKernel(np.zeros((9, 2, 2)), np.zeros(3))


def coarse_scene(rng, rate, n=60):
    Hc, Wc = H // rate[0], W // rate[1]
    cu, cv = rng.integers(0, Wc, n), rng.integers(0, Hc, n)
    cr = rng.uniform(1, 30, n)
    grid = build_frustum_grid(cu, cv, cr, Hc, Wc)
    return cu, cv, cr, grid, build_hash_index(grid)


@pytest.mark.parametrize("rate,K", [((2, 2), 3), ((2, 4), 7), ((4, 4), 7), ((8, 8), 15)])
@pytest.mark.parametrize("wrap", [True, False])
def test_upsample_matches_scaled_window(rng, rate, K, wrap):
    cu, cv, cr, grid, index = coarse_scene(rng, rate)
    fu, fv = rng.integers(0, W, 50), rng.integers(0, H, 50)
    fr = rng.uniform(1, 30, 50)
    plan = gather_upsample(grid, index, fu, fv, fr, rate, K, (H, W), wrap)
    expect = oracles.upsample_plan(fu, fv, fr, cu, cv, cr, grid.m, rate, K, (H, W), wrap)
    assert plan_set(plan) == expect


def test_upsample_unit_rate_equals_forward(rng):
    u, v, r, grid, index = scene(rng)
    feats = rng.normal(size=(grid.N, 3))
    kernel = ConvKernel.random(3, 3, 2, rng)
    out = upsample_sfc_forward(feats, grid, index, u, v, r, (1, 1), kernel, (H, W))
    plan = gather_neighbors(np.arange(grid.N), grid, index, 3)
    assert np.array_equal(out, sfc_forward(feats, plan, kernel))


def test_upsample_empty_window_gives_bias(rng):
    grid, index = make_grid(np.array([0]), np.array([0]), np.array([1.0]), 4, 8)
    kernel = ConvKernel.random(3, 2, 3, rng)
    out = upsample_sfc_forward(np.ones((1, 2)), grid, index, [9], [5], [1.0], (2, 2), kernel, (8, 16), False)
    assert np.array_equal(out[0], kernel.bias)


def test_weight_file_roundtrip(tmp_path, rng):
    kernel = ConvKernel.random(3, 4, 5, rng)
    path = tmp_path / "k.bin"
    kernel.save(path)
    back = ConvKernel.load(path)
    assert np.array_equal(back.weights, kernel.weights.astype(np.float32))
    assert np.array_equal(back.bias, kernel.bias.astype(np.float32))
    raw = path.read_bytes()
    header, blob = raw.split(b"\nend\n", 1)
    assert header.decode().splitlines()[0] == "sfc-weights 1"
    # offset-major, then output channel, then input channel, little-endian
    assert np.array_equal(np.frombuffer(blob[:9 * 5 * 4 * 4], "<f4"),
                          kernel.weights.astype("<f4").reshape(-1))


def test_tensor_file_errors(tmp_path):
    path = tmp_path / "t.bin"
    write_tensors(path, {"a": np.ones((2, 3)), "b": np.zeros(4)})
    assert read_tensors(path)["a"].shape == (2, 3)
    path.write_bytes(path.read_bytes() + b"\0")
    with pytest.raises(ValueError):
        read_tensors(path)
    path.write_bytes(b"garbage")
    with pytest.raises(ValueError):
        read_tensors(path)
    with pytest.raises(ValueError):
        write_tensors(path, {"bad name": np.ones(1)})


def test_window_wider_than_grid_reads_wrapped_cells_per_offset(rng):
    u, v, r = random_uvr(rng, 30, 4, 3)
    grid, index = make_grid(u, v, r, 4, 3)
    feats = rng.normal(size=(30, 2))
    kernel = ConvKernel.random(5, 2, 3, rng)
    plan = gather_neighbors(np.arange(30), grid, index, 5)
    expect = oracles.dense_conv_at_centers(feats, u, v, r, grid.m, kernel.weights, kernel.bias, 4, 3, True)
    assert np.max(np.abs(sfc_forward(feats, plan, kernel) - expect)) < 1e-9
