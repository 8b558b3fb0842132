import numpy as np
import pytest

from frontgrid import cnn
from frontgrid.mesh import ConfigError

TOY = cnn.CnnArch(out_shape=(8, 8), latent_size=6, channels=(3, 3, 2, 2, 1),
                  upsample_after=(True, True, False, False, False))


def fd_ok(a, f, atol=1e-6, rtol=1e-4):
    return np.all(np.abs(a - f) <= atol + rtol * np.abs(f))


def central(fun, x, idx, h=1e-6):
    x = x.copy()
    x0 = x[idx]
    x[idx] = x0 + h
    fp = fun(x)
    x[idx] = x0 - h
    fm = fun(x)
    return (fp - fm) / (2 * h)


# ---------------------------------------------------------------- init

def test_glorot_std_conv():
    assert cnn.glorot_std((8, 16, 5, 5)) == pytest.approx(0.057735, abs=1e-6)


def test_init_deterministic():
    a = cnn.init_params(cnn.CnnArch(), 7)
    b = cnn.init_params(cnn.CnnArch(), 7)
    for k in a:
        assert a[k].tobytes() == b[k].tobytes()


def test_init_blocks():
    p = cnn.init_params(TOY, 0)
    assert set(p) == set(TOY.param_shapes())
    assert np.all(p["conv0.b"] == 0) and np.all(p["norm1.gamma"] == 1) and np.all(p["norm1.beta"] == 0)


def test_init_statistics():
    arch = cnn.CnnArch(out_shape=(200, 200), latent_size=128, channels=(32, 32, 16, 8, 1))
    p = cnn.init_params(arch, 3)
    w = p["dense.w"]
    assert w.size >= 100_000
    assert np.std(w) == pytest.approx(cnn.glorot_std(w.shape), rel=0.02)
    assert np.std(p["conv1.w"]) == pytest.approx(cnn.glorot_std(p["conv1.w"].shape), rel=0.02)


# ---------------------------------------------------------------- arch

def test_arch_requires_five_convs():
    with pytest.raises(ConfigError):
        cnn.CnnArch(channels=(8, 8, 1), upsample_after=(True, True, False))


def test_arch_divisibility():
    with pytest.raises(ConfigError):
        cnn.CnnArch(out_shape=(100, 100))
    assert cnn.CnnArch().coarse_shape == (25, 25)


def test_shape_mismatch_rejected():
    p = cnn.init_params(TOY, 0)
    p["conv2.w"] = p["conv2.w"][:, :1]
    with pytest.raises(ConfigError):
        cnn.forward(TOY, p)


# ---------------------------------------------------------------- conv

def test_delta_kernel():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((1, 6, 7))
    w = np.zeros((1, 1, 5, 5))
    w[0, 0, 2, 2] = 1
    np.testing.assert_array_equal(cnn.conv2d_forward(x, w, np.array([0.3])), x + 0.3)


def test_ones_kernel_interior():
    y = cnn.conv2d_forward(np.ones((1, 9, 9)), np.ones((1, 1, 5, 5)), np.array([0.5]))
    assert y[0, 4, 4] == 25.5
    assert y[0, 0, 0] == 9.5


def test_conv_matches_direct_loops():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((2, 5, 4))
    w = rng.standard_normal((3, 2, 3, 3))
    b = rng.standard_normal(3)
    ref = np.zeros((3, 5, 4))
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1)))
    for o in range(3):
        for i in range(5):
            for j in range(4):
                ref[o, i, j] = np.sum(w[o] * xp[:, i:i + 3, j:j + 3]) + b[o]
    np.testing.assert_allclose(cnn.conv2d_forward(x, w, b), ref, rtol=1e-13, atol=1e-13)


def test_conv_backward_fd():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((2, 6, 6))
    w = rng.standard_normal((3, 2, 5, 5))
    b = rng.standard_normal(3)
    G = rng.standard_normal((3, 6, 6))
    gx, gw, gb = cnn.conv2d_backward(x, w, G)
    for _ in range(15):
        i = tuple(rng.integers(0, s) for s in x.shape)
        assert fd_ok(gx[i], central(lambda v: np.sum(cnn.conv2d_forward(v, w, b) * G), x, i))
        k = tuple(rng.integers(0, s) for s in w.shape)
        assert fd_ok(gw[k], central(lambda v: np.sum(cnn.conv2d_forward(x, v, b) * G), w, k))
    for o in range(3):
        assert fd_ok(gb[o], central(lambda v: np.sum(cnn.conv2d_forward(x, w, v) * G), b, o))


# ---------------------------------------------------------------- norm

def test_norm_constant_channel():
    y, _ = cnn.channelnorm_forward(np.full((2, 3, 3), 4.2), np.array([1.0, 2.0]), np.array([0.1, -0.3]))
    np.testing.assert_allclose(y[0], 0.1)
    np.testing.assert_allclose(y[1], -0.3)


def test_norm_standardised_input():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((1, 30, 30))
    x = (x - x.mean()) / x.std()
    y, _ = cnn.channelnorm_forward(x, np.ones(1), np.zeros(1))
    np.testing.assert_allclose(y, x / np.sqrt(1 + 1e-5), rtol=1e-12)
    np.testing.assert_allclose(y, x, rtol=1e-5)


def test_norm_backward_fd():
    rng = np.random.default_rng(4)
    x = rng.standard_normal((3, 4, 4))
    gam = rng.standard_normal(3)
    bet = rng.standard_normal(3)
    G = rng.standard_normal((3, 4, 4))
    y, cache = cnn.channelnorm_forward(x, gam, bet)
    gx, gg, gb = cnn.channelnorm_backward(cache, gam, G)
    f = lambda xx, g_, b_: np.sum(cnn.channelnorm_forward(xx, g_, b_)[0] * G)
    for i in np.ndindex(x.shape):
        assert fd_ok(gx[i], central(lambda v: f(v, gam, bet), x, i))
    for c in range(3):
        assert fd_ok(gg[c], central(lambda v: f(x, v, bet), gam, c))
        assert fd_ok(gb[c], central(lambda v: f(x, gam, v), bet, c))


# ---------------------------------------------------------------- upsampling

def test_upsample_constant():
    np.testing.assert_allclose(cnn.upsample2x_forward(np.full((2, 3, 5), 0.7)), 0.7, rtol=1e-15)


def test_upsample_ramp():
    y = cnn.upsample2x_forward(np.array([[[0.0, 1.0], [0.0, 1.0]]]))
    assert y.shape == (1, 4, 4)
    for row in y[0]:
        np.testing.assert_allclose(row, [0.0, 0.25, 0.75, 1.0], atol=1e-15)


def test_upsample_adjoint():
    rng = np.random.default_rng(5)
    for _ in range(20):
        x = rng.standard_normal((2, 5, 3))
        y = rng.standard_normal((2, 10, 6))
        a = np.sum(cnn.upsample2x_forward(x) * y)
        b = np.sum(x * cnn.upsample2x_backward(y))
        assert abs(a - b) <= 1e-13 * max(1.0, abs(a))


# ---------------------------------------------------------------- network

def test_output_shape_and_range():
    img, _ = cnn.forward(cnn.CnnArch(), cnn.init_params(cnn.CnnArch(), 0))
    assert img.shape == (200, 200)
    assert img.min() > 0 and img.max() < 1


def test_zero_weights_give_half():
    p = {k: np.zeros_like(v) for k, v in cnn.init_params(TOY, 0).items()}
    img, _ = cnn.forward(TOY, p)
    np.testing.assert_array_equal(img, 0.5)


def _reference_forward(arch, p):
    """Plain loop implementation used only as a cross-check."""
    cy, cx = arch.coarse_shape
    h = np.zeros(arch.c0 * cy * cx)
    for a in range(h.size):
        h[a] = sum(p["latent"][l] * p["dense.w"][l, a] for l in range(arch.latent_size)) + p["dense.b"][a]
    h = h.reshape(arch.c0, cy, cx)
    k = arch.kernel
    r = k // 2
    for i, cout in enumerate(arch.channels):
        C, H, W = h.shape
        out = np.zeros((cout, H, W))
        w = p[f"conv{i}.w"]
        for o in range(cout):
            for y in range(H):
                for x in range(W):
                    s = p[f"conv{i}.b"][o]
                    for c in range(C):
                        for dy in range(k):
                            for dx in range(k):
                                yy, xx = y + dy - r, x + dx - r
                                if 0 <= yy < H and 0 <= xx < W:
                                    s += w[o, c, dy, dx] * h[c, yy, xx]
                    out[o, y, x] = s
        h = out
        if i == 4:
            break
        for c in range(cout):
            mu = h[c].mean()
            var = ((h[c] - mu) ** 2).mean()
            h[c] = p[f"norm{i}.gamma"][c] * (h[c] - mu) / np.sqrt(var + arch.norm_eps) + p[f"norm{i}.beta"][c]
        h = np.where(h > 0, h, arch.leaky_slope * h)
        if arch.upsample_after[i]:
            C, H, W = h.shape
            up = np.zeros((C, 2 * H, 2 * W))
            for y in range(2 * H):
                sy = max((y + 0.5) / 2 - 0.5, 0.0)
                y0 = int(sy); y1 = min(y0 + 1, H - 1); fy = sy - y0
                for x in range(2 * W):
                    sx = max((x + 0.5) / 2 - 0.5, 0.0)
                    x0 = int(sx); x1 = min(x0 + 1, W - 1); fx = sx - x0
                    up[:, y, x] = ((1 - fy) * ((1 - fx) * h[:, y0, x0] + fx * h[:, y0, x1])
                                   + fy * ((1 - fx) * h[:, y1, x0] + fx * h[:, y1, x1]))
            h = up
    return 1.0 / (1.0 + np.exp(-h[0]))


def test_forward_matches_reference():
    rng = np.random.default_rng(6)
    p = cnn.init_params(TOY, 1)
    p = {k: v + 0.1 * rng.standard_normal(v.shape) for k, v in p.items()}
    img, _ = cnn.forward(TOY, p)
    np.testing.assert_allclose(img, _reference_forward(TOY, p), rtol=1e-12, atol=1e-12)


def test_zero_upstream_gives_zero_gradients():
    p = cnn.init_params(TOY, 0)
    img, tape = cnn.forward(TOY, p)
    g = cnn.backward(TOY, p, tape, np.zeros_like(img))
    assert all(np.all(v == 0) for v in g.values())


def test_backward_deterministic():
    p = cnn.init_params(TOY, 0)
    img, tape = cnn.forward(TOY, p)
    a = cnn.backward(TOY, p, tape, img)
    b = cnn.backward(TOY, p, cnn.forward(TOY, p)[1], img)
    for k in a:
        assert a[k].tobytes() == b[k].tobytes()


def network_fd_check(arch, n_checks, seed=0):
    """Largest |a - f| / (1e-5 + 1e-3 |f|) over random parameter entries."""
    rng = np.random.default_rng(seed)
    p = cnn.init_params(arch, seed)
    G = rng.standard_normal(arch.out_shape)
    img, tape = cnn.forward(arch, p)
    grads = cnn.backward(arch, p, tape, G)
    names = list(p)
    worst = 0.0
    for t in range(n_checks):
        k = names[t % len(names)]
        idx = tuple(rng.integers(0, s) for s in p[k].shape)

        def f(v, k=k):
            q = dict(p)
            q[k] = v
            return np.sum(cnn.forward(arch, q)[0] * G)
        fd = central(f, p[k], idx)
        worst = max(worst, abs(grads[k][idx] - fd) / (1e-5 + 1e-3 * abs(fd)))
    return worst


def test_network_gradient_fd():
    assert network_fd_check(TOY, 60) <= 1.0
