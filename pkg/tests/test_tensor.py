"""Unit tests for the autodiff core: ops, conv, batchnorm and resampling."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from xfeat.tensor import (
    Tensor, FlopCounter, no_grad, concat, conv2d, batchnorm2d,
    bilinear_resize, bicubic_sample, space_to_depth, depth_to_space,
    pad_to_multiple,
)


def fd_grad(f, x, h=1e-6):
    """Central finite differences of a scalar function over an array."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    while not it.finished:
        idx = it.multi_index
        orig = x[idx]
        x[idx] = orig + h
        fp = f()
        x[idx] = orig - h
        fm = f()
        x[idx] = orig
        g[idx] = (fp - fm) / (2 * h)
        it.iternext()
    return g


def conv_oracle(x, w, b, stride, padding):
    """Brute-force 2-D convolution, quintuple loop, no vectorization."""
    n, c_in, h, wd = x.shape
    c_out, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho = (h + 2 * padding - k) // stride + 1
    wo = (wd + 2 * padding - k) // stride + 1
    out = np.zeros((n, c_out, ho, wo))
    for ni in range(n):
        for co in range(c_out):
            for i in range(ho):
                for j in range(wo):
                    patch = xp[ni, :, i * stride:i * stride + k,
                               j * stride:j * stride + k]
                    out[ni, co, i, j] = (patch * w[co]).sum() + (b[co] if b is not None else 0.0)
    return out


class TestElementwise:
    def test_add_mul_backward(self):
        a = Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True)
        b = Tensor(np.array([4.0, 5.0, 6.0]), requires_grad=True)
        ((a * b + a) ** 2).sum().backward()
        # d/da (ab+a)^2 = 2(ab+a)(b+1)
        expect = 2 * (a.data * b.data + a.data) * (b.data + 1)
        assert np.allclose(a.grad, expect)

    def test_broadcast_backward(self):
        a = Tensor(np.ones((3, 4)), requires_grad=True)
        b = Tensor(np.arange(4.0), requires_grad=True)
        (a * b).sum().backward()
        assert np.allclose(a.grad, np.tile(np.arange(4.0), (3, 1)))
        assert np.allclose(b.grad, np.full(4, 3.0))

    def test_relu_grad(self):
        x = Tensor(np.array([-2.0, -0.5, 0.5, 3.0]), requires_grad=True)
        x.relu().sum().backward()
        assert np.allclose(x.grad, [0, 0, 1, 1])

    def test_sigmoid_matches_scipy(self):
        from scipy.special import expit
        x = Tensor(np.linspace(-5, 5, 11))
        assert np.allclose(x.sigmoid().data, expit(x.data))

    def test_division_and_sqrt(self):
        x = Tensor(np.array([4.0, 9.0]), requires_grad=True)
        (Tensor(np.ones(2)) / x.sqrt()).sum().backward()
        # d/dx x^{-1/2} = -1/2 x^{-3/2}
        assert np.allclose(x.grad, -0.5 * x.data ** -1.5)

    def test_nan_rejected(self):
        x = Tensor(np.array([1.0, 0.0]))
        with pytest.raises(FloatingPointError):
            (Tensor(np.ones(2)) / x).sum()

    def test_detach_blocks_gradient(self):
        x = Tensor(np.array([2.0]), requires_grad=True)
        (x.detach() * x).sum().backward()
        assert np.allclose(x.grad, [2.0])  # only the live branch contributes


class TestReductionsAndShapes:
    def test_sum_axis_keepdims(self):
        x = Tensor(np.arange(12.0).reshape(3, 4), requires_grad=True)
        x.sum(axis=0).sum().backward()
        assert np.allclose(x.grad, np.ones((3, 4)))

    def test_mean_grad(self):
        x = Tensor(np.arange(6.0), requires_grad=True)
        x.mean().backward()
        assert np.allclose(x.grad, np.full(6, 1 / 6))

    def test_max_routes_gradient(self):
        x = Tensor(np.array([[1.0, 5.0, 2.0]]), requires_grad=True)
        x.max(axis=1).sum().backward()
        assert np.allclose(x.grad, [[0, 1, 0]])

    def test_transpose_and_reshape_roundtrip(self):
        x = Tensor(np.arange(24.0).reshape(2, 3, 4), requires_grad=True)
        y = x.transpose((2, 0, 1)).reshape(4, 6)
        (y * 2).sum().backward()
        assert np.allclose(x.grad, np.full((2, 3, 4), 2.0))

    def test_concat_backward(self):
        a = Tensor(np.ones((2, 2)), requires_grad=True)
        b = Tensor(np.ones((3, 2)), requires_grad=True)
        c = concat([a, b], axis=0)
        assert c.shape == (5, 2)
        (c * Tensor(np.arange(10.0).reshape(5, 2))).sum().backward()
        assert np.allclose(a.grad, [[0, 1], [2, 3]])
        assert np.allclose(b.grad, [[4, 5], [6, 7], [8, 9]])

    def test_gather_rows_cols(self):
        x = Tensor(np.arange(12.0).reshape(3, 4), requires_grad=True)
        x.gather_rows(np.array([2, 0])).gather_cols(np.array([1, 3])).sum().backward()
        expect = np.zeros((3, 4))
        expect[2, 1] = 1
        expect[0, 3] = 1
        assert np.allclose(x.grad, expect)


class TestProperties:
    @given(st.integers(0, 2 ** 31 - 1), st.integers(2, 8), st.integers(2, 8))
    @settings(max_examples=50, deadline=None)
    def test_softmax_is_a_distribution(self, seed, n, m):
        x = np.random.default_rng(seed).normal(scale=5.0, size=(n, m))
        p = Tensor(x).softmax(axis=1).data
        assert np.allclose(p.sum(axis=1), 1.0, atol=1e-8)
        assert (p >= 0).all()

    @given(st.integers(0, 2 ** 31 - 1), st.integers(1, 3))
    @settings(max_examples=30, deadline=None)
    def test_space_to_depth_preserves_values(self, seed, n):
        x = np.random.default_rng(seed).normal(size=(n, 1, 16, 16))
        y = space_to_depth(Tensor(x), 8)
        assert np.allclose(np.sort(y.data.ravel()), np.sort(x.ravel()))


class TestSoftmax:
    def test_softmax_rows_sum_to_one(self):
        rng = np.random.default_rng(0)
        x = Tensor(rng.normal(size=(5, 7)))
        p = x.softmax(axis=1).data
        assert np.allclose(p.sum(axis=1), 1.0)
        assert (p > 0).all()

    def test_log_softmax_shift_invariant(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(4, 9))
        a = Tensor(x).log_softmax(axis=1).data
        b = Tensor(x + 123.0).log_softmax(axis=1).data
        assert np.allclose(a, b, atol=1e-10)

    def test_log_softmax_grad_fd(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=(3, 5))
        t = Tensor(x, requires_grad=True)
        w = rng.normal(size=(3, 5))
        (t.log_softmax(axis=1) * Tensor(w)).sum().backward()
        fd = fd_grad(lambda: (Tensor(x).log_softmax(axis=1).data * w).sum(), x)
        assert np.allclose(t.grad, fd, atol=1e-7)


class TestConv:
    @pytest.mark.parametrize("k,stride", [(1, 1), (3, 1), (3, 2), (1, 2)])
    def test_matches_bruteforce(self, k, stride):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(2, 3, 5, 5))
        w = rng.normal(size=(4, 3, k, k))
        b = rng.normal(size=4)
        pad = (k - 1) // 2
        out = conv2d(Tensor(x), Tensor(w), Tensor(b), stride=stride, padding=pad)
        assert np.allclose(out.data, conv_oracle(x, w, b, stride, pad), atol=1e-10)

    def test_backward_fd(self):
        rng = np.random.default_rng(4)
        x = rng.normal(size=(1, 2, 4, 4))
        w = rng.normal(size=(3, 2, 3, 3))
        b = rng.normal(size=3)
        tx, tw, tb = Tensor(x, True), Tensor(w, True), Tensor(b, True)
        proj = rng.normal(size=(1, 3, 4, 4))
        (conv2d(tx, tw, tb, stride=1, padding=1) * Tensor(proj)).sum().backward()
        for t, arr in ((tx, x), (tw, w), (tb, b)):
            fd = fd_grad(lambda: (conv2d(Tensor(x), Tensor(w), Tensor(b),
                                         stride=1, padding=1).data * proj).sum(), arr)
            assert np.allclose(t.grad, fd, atol=1e-6)

    def test_flop_counter_entry(self):
        counter = FlopCounter()
        x = Tensor(np.zeros((1, 1, 600, 800)))
        w = Tensor(np.zeros((4, 1, 3, 3)))
        conv2d(x, w, None, stride=2, padding=1, counter=counter, name="first")
        # output is 300 x 400; cost = 300*400*1*4*9
        assert counter.total == 300 * 400 * 1 * 4 * 9 == 4_320_000
        name, h, w_, cin, cout, k, fops = counter.rows()[0]
        assert (name, h, w_, cin, cout, k) == ("first", 300, 400, 1, 4, 3)
        assert isinstance(counter.total, int)

    def test_invalid_kernel_rejected(self):
        with pytest.raises(ValueError):
            conv2d(Tensor(np.zeros((1, 1, 4, 4))), Tensor(np.zeros((1, 1, 5, 5))),
                   None, stride=1, padding=2)


class TestBatchNorm:
    def _run(self, x, training, state=None):
        c = x.shape[1]
        gamma = Tensor(np.ones(c), requires_grad=True)
        beta = Tensor(np.zeros(c), requires_grad=True)
        if state is None:
            state = (np.zeros(c), np.ones(c))
        return batchnorm2d(Tensor(x), gamma, beta, state[0], state[1], training)

    def test_training_output_is_standardized(self):
        rng = np.random.default_rng(5)
        x = rng.normal(3.0, 2.0, size=(4, 3, 6, 6))
        y = self._run(x, training=True).data
        assert np.allclose(y.mean(axis=(0, 2, 3)), 0.0, atol=1e-6)
        assert np.allclose(y.var(axis=(0, 2, 3)), 1.0, atol=1e-3)

    def test_eval_uses_running_stats(self):
        x = np.full((1, 2, 2, 2), 7.0)
        rm, rv = np.array([5.0, 5.0]), np.array([4.0, 4.0])
        y = batchnorm2d(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)),
                        rm, rv, training=False).data
        assert np.allclose(y, (7 - 5) / np.sqrt(4 + 1e-5), atol=1e-6)

    def test_running_stats_update(self):
        rng = np.random.default_rng(6)
        x = rng.normal(1.0, 3.0, size=(8, 2, 4, 4))
        rm, rv = np.zeros(2), np.ones(2)
        batchnorm2d(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)),
                    rm, rv, training=True)
        mu = x.mean(axis=(0, 2, 3))
        n = x.shape[0] * x.shape[2] * x.shape[3]
        var_u = x.var(axis=(0, 2, 3)) * n / (n - 1)
        assert np.allclose(rm, 0.1 * mu, atol=1e-6)
        assert np.allclose(rv, 0.9 + 0.1 * var_u, atol=1e-6)

    def test_backward_fd(self):
        rng = np.random.default_rng(7)
        x = rng.normal(size=(2, 2, 3, 3))
        proj = rng.normal(size=(2, 2, 3, 3))
        g0, b0 = rng.normal(size=2), rng.normal(size=2)

        def val():
            return (batchnorm2d(Tensor(x), Tensor(g0), Tensor(b0),
                                np.zeros(2), np.ones(2), True).data * proj).sum()

        tx = Tensor(x, True)
        tg, tb = Tensor(g0, True), Tensor(b0, True)
        (batchnorm2d(tx, tg, tb, np.zeros(2), np.ones(2), True) * Tensor(proj)).sum().backward()
        for t, arr in ((tx, x), (tg, g0), (tb, b0)):
            assert np.allclose(t.grad, fd_grad(val, arr), atol=1e-5)


class TestResampling:
    def test_bilinear_matches_scalar_loop(self):
        rng = np.random.default_rng(8)
        x = rng.normal(size=(1, 1, 5, 7))
        out = bilinear_resize(Tensor(x), 9, 13).data[0, 0]
        # scalar half-pixel-center reference
        ref = np.zeros((9, 13))
        for i in range(9):
            for j in range(13):
                sy = (i + 0.5) * 5 / 9 - 0.5
                sx = (j + 0.5) * 7 / 13 - 0.5
                y0 = int(np.floor(sy))
                x0 = int(np.floor(sx))
                fy, fx = sy - y0, sx - x0
                y0c, y1c = np.clip([y0, y0 + 1], 0, 4)
                x0c, x1c = np.clip([x0, x0 + 1], 0, 6)
                ref[i, j] = (x[0, 0, y0c, x0c] * (1 - fy) * (1 - fx)
                             + x[0, 0, y0c, x1c] * (1 - fy) * fx
                             + x[0, 0, y1c, x0c] * fy * (1 - fx)
                             + x[0, 0, y1c, x1c] * fy * fx)
        assert np.allclose(out, ref, atol=1e-10)

    def test_bilinear_identity(self):
        x = np.random.default_rng(9).normal(size=(1, 2, 6, 6))
        assert np.allclose(bilinear_resize(Tensor(x), 6, 6).data, x)

    def test_bilinear_backward_fd(self):
        rng = np.random.default_rng(10)
        x = rng.normal(size=(1, 1, 3, 4))
        proj = rng.normal(size=(1, 1, 6, 8))
        t = Tensor(x, True)
        (bilinear_resize(t, 6, 8) * Tensor(proj)).sum().backward()
        fd = fd_grad(lambda: (bilinear_resize(Tensor(x), 6, 8).data * proj).sum(), x)
        assert np.allclose(t.grad, fd, atol=1e-6)

    def test_bicubic_constant_map(self):
        fmap = np.full((3, 8, 8), 2.5)
        pts = np.array([[1.2, 3.7], [0.0, 0.0], [7.0, 7.0], [-0.4, 8.3]])
        out = bicubic_sample(fmap, pts)
        assert np.allclose(out, 2.5, atol=1e-10)

    def test_bicubic_exact_at_knots(self):
        # stored value of cell (i, j) lives at coordinate (j + 0.5, i + 0.5)
        rng = np.random.default_rng(11)
        fmap = rng.normal(size=(2, 6, 6))
        ys, xs = np.meshgrid(np.arange(6), np.arange(6), indexing="ij")
        pts = np.stack([xs.ravel() + 0.5, ys.ravel() + 0.5], axis=1)
        out = bicubic_sample(fmap, pts)
        for c in range(2):
            assert np.allclose(out[:, c], fmap[c].ravel(), atol=1e-10)

    def test_bicubic_matches_kernel_oracle(self):
        # interior point, away from borders: compare against the 4x4
        # Catmull-Rom weighting computed by hand
        rng = np.random.default_rng(12)
        fmap = rng.normal(size=(1, 10, 10))
        x, y = 4.3, 5.8

        def kern(d, a=-0.5):
            d = abs(d)
            if d <= 1:
                return (a + 2) * d ** 3 - (a + 3) * d ** 2 + 1
            if d < 2:
                return a * d ** 3 - 5 * a * d ** 2 + 8 * a * d - 4 * a
            return 0.0

        # knot i sits at coordinate i + 0.5
        u, v = x - 0.5, y - 0.5
        x0, y0 = int(np.floor(u)), int(np.floor(v))
        ref = 0.0
        for dy in range(-1, 3):
            for dx in range(-1, 3):
                wgt = kern(u - (x0 + dx)) * kern(v - (y0 + dy))
                ref += wgt * fmap[0, y0 + dy, x0 + dx]
        out = bicubic_sample(fmap, np.array([[x, y]]))
        assert np.allclose(out[0, 0], ref, atol=1e-10)


class TestSpaceToDepth:
    def test_roundtrip_bijection(self):
        rng = np.random.default_rng(13)
        x = rng.normal(size=(2, 1, 16, 24))
        y = space_to_depth(Tensor(x), 8)
        assert y.shape == (2, 64, 2, 3)
        z = depth_to_space(y, 8)
        assert np.allclose(z.data, x)

    def test_channel_order(self):
        # channel c of the output holds pixel (dy, dx) = (c // 8, c % 8)
        x = np.arange(64.0).reshape(1, 1, 8, 8)
        y = space_to_depth(Tensor(x), 8).data[0, :, 0, 0]
        assert np.allclose(y, np.arange(64.0))

    def test_differentiable(self):
        x = Tensor(np.random.default_rng(14).normal(size=(1, 1, 8, 8)), True)
        depth_to_space(space_to_depth(x, 8), 8).sum().backward()
        assert np.allclose(x.grad, np.ones((1, 1, 8, 8)))


class TestPadding:
    def test_pad_to_multiple(self):
        x = np.arange(6.0).reshape(1, 1, 2, 3)
        out = pad_to_multiple(x, 4)
        assert out.shape == (1, 1, 4, 4)
        assert np.allclose(out[0, 0, :2, :3], x[0, 0])
        # edge replication
        assert np.allclose(out[0, 0, 3, :3], x[0, 0, 1])
        assert np.allclose(out[0, 0, :2, 3], x[0, 0, :, 2])

    def test_no_pad_when_aligned(self):
        x = np.zeros((1, 1, 8, 8))
        assert pad_to_multiple(x, 8).shape == (1, 1, 8, 8)


class TestNoGrad:
    def test_no_graph_recorded(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with no_grad():
            y = (x * 2).sum()
        assert y._backward is None or not y._prev
