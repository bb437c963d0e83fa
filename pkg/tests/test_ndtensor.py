import numpy as np
import pytest

from rnflnet import ndtensor as nd


def brute_force_conv2d(x, w, b, stride, pad):
    """Six nested loops, straight from the definition of convolution."""
    n, c, h, wd = x.shape
    o, i, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wd + 2 * pad - k) // stride + 1
    out = np.zeros((n, o, ho, wo))
    for ni in range(n):
        for oi in range(o):
            for yi in range(ho):
                for xi in range(wo):
                    acc = 0.0
                    for ci in range(c):
                        for ki in range(k):
                            for kj in range(k):
                                acc += (xp[ni, ci, yi * stride + ki, xi * stride + kj]
                                        * w[oi, ci, ki, kj])
                    out[ni, oi, yi, xi] = acc + (b[oi] if b is not None else 0.0)
    return out


class TestConv2d:
    def test_identity_kernel(self):
        x = nd.Tensor(np.arange(16.0).reshape(1, 1, 4, 4))
        w = nd.Tensor(np.ones((1, 1, 1, 1)))
        b = nd.Tensor(np.zeros(1))
        out = nd.conv2d(x, w, b, stride=1, pad=0)
        np.testing.assert_array_equal(out.data, x.data)

    def test_output_extent_formula(self):
        x = nd.Tensor(np.zeros((1, 1, 256, 256)))
        w = nd.Tensor(np.zeros((4, 1, 7, 7)))
        out = nd.conv2d(x, w, stride=2, pad=3)
        assert out.shape == (1, 4, 128, 128)

    def test_matches_brute_force_oracle(self):
        rng = np.random.default_rng(7)
        x = rng.standard_normal((1, 2, 5, 5))
        w = rng.standard_normal((3, 2, 3, 3))
        b = rng.standard_normal(3)
        out = nd.conv2d(nd.Tensor(x), nd.Tensor(w), nd.Tensor(b), stride=1, pad=0)
        expected = brute_force_conv2d(x, w, b, 1, 0)
        np.testing.assert_allclose(out.data, expected, atol=1e-12, rtol=0)

    @pytest.mark.parametrize("seed", range(12))
    def test_oracle_random_small_shapes(self, seed):
        rng = np.random.default_rng(seed)
        n, c, o = rng.integers(1, 4, size=3)
        k = int(rng.integers(1, 4))
        stride = int(rng.integers(1, 3))
        pad = int(rng.integers(0, 3))
        h = int(rng.integers(k, 8))
        w = int(rng.integers(k, 8))
        x = rng.standard_normal((n, c, h, w))
        wt = rng.standard_normal((o, c, k, k))
        b = rng.standard_normal(o)
        out = nd.conv2d(nd.Tensor(x), nd.Tensor(wt), nd.Tensor(b), stride=stride, pad=pad)
        expected = brute_force_conv2d(x, wt, b, stride, pad)
        np.testing.assert_allclose(out.data, expected, atol=1e-12, rtol=0)

    def test_channel_mismatch_raises(self):
        x = nd.Tensor(np.zeros((1, 3, 4, 4)))
        w = nd.Tensor(np.zeros((2, 2, 3, 3)))
        with pytest.raises(nd.ShapeError, match="channels"):
            nd.conv2d(x, w)


class TestBatchNorm:
    def _buffers(self, c):
        return (nd.Tensor(np.ones(c), requires_grad=True),
                nd.Tensor(np.zeros(c), requires_grad=True),
                nd.Tensor(np.zeros(c)),
                nd.Tensor(np.ones(c)))

    def test_constant_input_train_is_zero(self):
        gamma, beta, rm, rv = self._buffers(2)
        x = nd.Tensor(np.full((2, 2, 3, 3), 5.0))
        out = nd.batchnorm2d(x, gamma, beta, rm, rv, train=True)
        np.testing.assert_allclose(out.data, 0.0, atol=1e-12)

    def test_affine_on_standardized_channel(self):
        rng = np.random.default_rng(0)
        raw = rng.standard_normal((4, 1, 5, 5))
        raw = (raw - raw.mean()) / raw.std()
        gamma = nd.Tensor(np.array([2.0]))
        beta = nd.Tensor(np.array([3.0]))
        rm, rv = nd.Tensor(np.zeros(1)), nd.Tensor(np.ones(1))
        out = nd.batchnorm2d(nd.Tensor(raw), gamma, beta, rm, rv, train=True, eps=0.0)
        np.testing.assert_allclose(out.data, 2.0 * raw + 3.0, atol=1e-9)

    def test_normalization_statistics_oracle(self):
        rng = np.random.default_rng(3)
        x = rng.standard_normal((4, 3, 6, 6)) * 3.0 + 1.5
        gamma, beta, rm, rv = self._buffers(3)
        out = nd.batchnorm2d(nd.Tensor(x), gamma, beta, rm, rv, train=True, eps=1e-12)
        # gamma=1, beta=0, so the output is xhat itself; recompute stats directly
        for c in range(3):
            channel = out.data[:, c, :, :]
            assert abs(channel.mean()) < 1e-10
            assert abs(channel.var() - 1.0) < 1e-10

    def test_running_stats_update(self):
        rng = np.random.default_rng(4)
        x = rng.standard_normal((2, 1, 4, 4)) + 2.0
        gamma, beta, rm, rv = self._buffers(1)
        nd.batchnorm2d(nd.Tensor(x), gamma, beta, rm, rv, train=True, momentum=0.1)
        np.testing.assert_allclose(rm.data, 0.1 * x.mean(), atol=1e-12)
        np.testing.assert_allclose(rv.data, 0.9 * 1.0 + 0.1 * x.var(), atol=1e-12)

    def test_eval_uses_running_stats(self):
        gamma, beta, _, _ = self._buffers(1)
        rm, rv = nd.Tensor(np.array([2.0])), nd.Tensor(np.array([4.0]))
        x = nd.Tensor(np.full((1, 1, 2, 2), 6.0))
        out = nd.batchnorm2d(x, gamma, beta, rm, rv, train=False, eps=0.0)
        np.testing.assert_allclose(out.data, 2.0, atol=1e-12)

    def test_single_element_train_raises(self):
        gamma, beta, rm, rv = self._buffers(1)
        x = nd.Tensor(np.ones((1, 1, 1, 1)))
        with pytest.raises(ValueError, match="degenerate"):
            nd.batchnorm2d(x, gamma, beta, rm, rv, train=True)


class TestBackward:
    def test_sum_gives_ones(self):
        x = nd.Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
        nd.backward(nd.tensor_sum(x))
        np.testing.assert_array_equal(x.grad, np.ones((2, 3)))

    def test_fanout_accumulates(self):
        x = nd.Tensor(np.ones((2, 2)), requires_grad=True)
        y = nd.add(x, x)
        nd.backward(nd.tensor_sum(y))
        np.testing.assert_array_equal(x.grad, np.full((2, 2), 2.0))

    def test_non_scalar_loss_raises(self):
        x = nd.Tensor(np.ones(3), requires_grad=True)
        y = nd.relu(x)
        with pytest.raises(ValueError, match="scalar"):
            nd.backward(y)

    def test_composite_graph_matches_finite_differences(self):
        target = np.array([[0.3], [0.8]])

        def builder(x, w1, b1, w2):
            h = nd.relu(nd.linear(x, w1, b1))
            out = nd.sigmoid(nd.linear(h, w2))
            return nd.mse_loss(out, nd.Tensor(target))

        err = nd.grad_check(builder, [(2, 3), (3, 4), (4,), (4, 1)], seed=11)
        assert err < 1e-4


class TestGradCheckPerOp:
    def test_linear_is_very_tight(self):
        def builder(x, w, b):
            return nd.mse_loss(nd.linear(x, w, b), nd.Tensor(np.zeros((3, 2))))
        assert nd.grad_check(builder, [(3, 5), (5, 2), (2,)], seed=0) < 1e-7

    def test_conv_block(self):
        def builder(x, w, b):
            return nd.tensor_sum(nd.relu(nd.conv2d(x, w, b, stride=1, pad=1)))
        assert nd.grad_check(builder, [(2, 2, 5, 5), (3, 2, 3, 3), (3,)], seed=1) < 1e-4

    def test_maxpool_and_pooling(self):
        def builder(x):
            return nd.tensor_sum(nd.global_avg_pool(nd.maxpool2x2(x)))
        assert nd.grad_check(builder, [(2, 2, 4, 4)], seed=2) < 1e-6

    def test_batchnorm_train_mode(self):
        # random target keeps gradient elements away from zero, where the
        # relative-error metric is dominated by finite-difference roundoff
        target = np.random.default_rng(99).standard_normal((2, 2, 3, 3))

        def builder(x, g, b):
            rm, rv = nd.Tensor(np.zeros(2)), nd.Tensor(np.ones(2))
            out = nd.batchnorm2d(x, g, b, rm, rv, train=True)
            return nd.mse_loss(out, nd.Tensor(target))
        assert nd.grad_check(builder, [(2, 2, 3, 3), (2,), (2,)], seed=3) < 1e-4

    def test_bce_on_logits(self):
        y = np.array([0.0, 1.0, 1.0, 0.0])

        def builder(z):
            return nd.bce_loss(z, nd.Tensor(y))
        assert nd.grad_check(builder, [(4,)], seed=4) < 1e-7

    def test_relu_boundary_nudge_documented(self):
        # inputs are pushed at least 1e-3 away from the kink, so the
        # central difference at eps=1e-5 never straddles it
        def builder(x):
            return nd.tensor_sum(nd.relu(x))
        assert nd.grad_check(builder, [(4, 4)], eps=1e-5, seed=5, nudge=1e-3) < 1e-8


class TestOpProperties:
    def test_mse_single_pair(self):
        out = nd.mse_loss(nd.Tensor(np.array([3.0])), nd.Tensor(np.array([1.5])))
        assert float(out.data) == (3.0 - 1.5) ** 2

    def test_bce_stable_for_large_logits(self):
        z = nd.Tensor(np.array([-40.0, 40.0, -40.0, 40.0]), requires_grad=True)
        y = nd.Tensor(np.array([0.0, 1.0, 1.0, 0.0]))
        loss = nd.bce_loss(z, y)
        assert np.isfinite(loss.data)
        nd.backward(loss)
        assert np.isfinite(z.grad).all()

    def test_add_commutative_and_shape_preserving(self):
        rng = np.random.default_rng(9)
        a = rng.standard_normal((3, 4, 2, 2))
        b = rng.standard_normal((3, 4, 2, 2))
        ab = nd.add(nd.Tensor(a), nd.Tensor(b))
        ba = nd.add(nd.Tensor(b), nd.Tensor(a))
        assert ab.shape == a.shape
        np.testing.assert_array_equal(ab.data, ba.data)

    def test_sigmoid_range_and_midpoint(self):
        z = nd.Tensor(np.array([0.0, 40.0, -40.0]))
        s = nd.sigmoid(z).data
        assert s[0] == 0.5
        assert abs(s[1] - 1.0) < 1e-12
        assert 0.0 <= s.min() and s.max() <= 1.0

    def test_maxpool_tie_grad_goes_to_first(self):
        x = nd.Tensor(np.array([[[[2.0, 2.0], [2.0, 2.0]]]]), requires_grad=True)
        nd.backward(nd.tensor_sum(nd.maxpool2x2(x)))
        np.testing.assert_array_equal(x.grad, np.array([[[[1.0, 0.0], [0.0, 0.0]]]]))

    def test_no_grad_blocks_recording(self):
        x = nd.Tensor(np.ones((2, 2)), requires_grad=True)
        with nd.no_grad():
            y = nd.relu(x)
        assert not y.requires_grad and y.parents == ()
