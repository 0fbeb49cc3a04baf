"""Autodiff engine: op semantics, graph mechanics, finite-difference checks."""
import numpy as np
import pytest

from fdcheck import OP_CASES, fd_max_rel_error, weighted_sum
from segforge import _kernels
from segforge import autodiff as ad
from segforge._kernels import _numpy as npk

SEEDS = range(20)


def tensor(arr, requires_grad=False):
    return ad.Tensor(np.asarray(arr, dtype=np.float32), requires_grad=requires_grad)


class TestTensor:
    def test_casts_to_float32_by_default(self):
        t = ad.Tensor(np.arange(6).reshape(2, 3))
        assert t.data.dtype == np.float32
        assert t.shape == (2, 3)
        assert t.grad is None

    def test_float64_kept_when_requested(self):
        t = ad.Tensor(np.zeros(3), dtype=np.float64)
        assert t.data.dtype == np.float64

    def test_integer_dtype_rejected(self):
        with pytest.raises(ad.AutodiffError, match="dtype"):
            ad.Tensor(np.zeros(3), dtype=np.int32)

    def test_empty_tensor_rejected(self):
        with pytest.raises(ad.AutodiffError, match="positive"):
            ad.Tensor(np.zeros((0, 3)))


class TestConv2d:
    def test_1x1_identity_kernel(self):
        g = ad.Graph()
        x = tensor(np.random.default_rng(0).normal(size=(2, 1, 4, 4)))
        w = tensor(np.ones((1, 1, 1, 1)))
        b = tensor(np.zeros(1))
        y = ad.conv2d(g, x, w, b)
        np.testing.assert_array_equal(y.data, x.data)

    def test_3x3_ones_on_3x3_ones(self):
        g = ad.Graph()
        x = tensor(np.ones((1, 1, 3, 3)))
        w = tensor(np.ones((1, 1, 3, 3)))
        b = tensor(np.zeros(1))
        y = ad.conv2d(g, x, w, b, padding="same")
        expected = np.array([[4, 6, 4], [6, 9, 6], [4, 6, 4]], dtype=np.float32)
        np.testing.assert_array_equal(y.data[0, 0], expected)

    def test_valid_padding_shape_and_value(self):
        g = ad.Graph()
        x = tensor(np.ones((1, 1, 5, 5)))
        w = tensor(np.ones((1, 1, 3, 3)))
        b = tensor(np.zeros(1))
        y = ad.conv2d(g, x, w, b, padding="valid")
        assert y.shape == (1, 1, 3, 3)
        np.testing.assert_array_equal(y.data, np.full((1, 1, 3, 3), 9.0, dtype=np.float32))

    def test_bias_added_per_channel(self):
        g = ad.Graph()
        x = tensor(np.zeros((1, 1, 2, 2)))
        w = tensor(np.zeros((3, 1, 1, 1)))
        b = tensor([1.0, 2.0, 3.0])
        y = ad.conv2d(g, x, w, b)
        for c in range(3):
            np.testing.assert_array_equal(y.data[0, c], np.full((2, 2), b.data[c]))

    def test_channel_mismatch_names_dimensions(self):
        g = ad.Graph()
        with pytest.raises(ad.AutodiffError, match="input has 2, kernel expects 3"):
            ad.conv2d(g, tensor(np.zeros((1, 2, 4, 4))), tensor(np.zeros((1, 3, 3, 3))),
                      tensor(np.zeros(1)))

    def test_even_kernel_same_padding_rejected(self):
        g = ad.Graph()
        with pytest.raises(ad.AutodiffError, match="odd kernel"):
            ad.conv2d(g, tensor(np.zeros((1, 1, 4, 4))), tensor(np.zeros((1, 1, 2, 2))),
                      tensor(np.zeros(1)), padding="same")

    def test_bad_padding_string_rejected(self):
        g = ad.Graph()
        with pytest.raises(ad.AutodiffError, match="padding"):
            ad.conv2d(g, tensor(np.zeros((1, 1, 4, 4))), tensor(np.zeros((1, 1, 3, 3))),
                      tensor(np.zeros(1)), padding="full")

    def test_im2col_lanes_agree(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(2, 3, 6, 6)).astype(np.float32)
        fast = _kernels.im2col(x, 3, 1, 1)
        ref = npk.im2col(x, 3, 1, 1)
        np.testing.assert_array_equal(fast, ref)

    def test_col2im_lanes_agree(self):
        rng = np.random.default_rng(4)
        dcol = rng.normal(size=(2, 27, 36)).astype(np.float32)
        fast = _kernels.col2im(dcol, (2, 3, 6, 6), 3, 1, 1)
        ref = npk.col2im(dcol, (2, 3, 6, 6), 3, 1, 1)
        np.testing.assert_allclose(fast, ref, rtol=0, atol=1e-6)


class TestMaxpool2d:
    def test_single_window_forward_backward(self):
        g = ad.Graph()
        x = tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]), requires_grad=True)
        y = ad.maxpool2d(g, x)
        assert y.data.reshape(()) == 4.0
        ad.backward(g, weighted_sum(g, y, np.ones((1, 1, 1, 1))))
        np.testing.assert_array_equal(x.grad[0, 0], [[0, 0], [0, 1]])

    def test_tie_routes_to_first_index(self):
        g = ad.Graph()
        x = tensor(np.ones((1, 1, 2, 2)), requires_grad=True)
        y = ad.maxpool2d(g, x)
        ad.backward(g, weighted_sum(g, y, np.ones((1, 1, 1, 1))))
        np.testing.assert_array_equal(x.grad[0, 0], [[1, 0], [0, 0]])

    def test_odd_dims_rejected(self):
        g = ad.Graph()
        with pytest.raises(ad.AutodiffError, match="divisible by 2"):
            ad.maxpool2d(g, tensor(np.zeros((1, 1, 3, 4))))

    def test_nondefault_window_rejected(self):
        g = ad.Graph()
        with pytest.raises(ad.AutodiffError, match="window"):
            ad.maxpool2d(g, tensor(np.zeros((1, 1, 4, 4))), window=4, stride=4)


class TestUpsample2dNearest:
    def test_factor_1_identity(self):
        g = ad.Graph()
        x = tensor(np.random.default_rng(0).normal(size=(1, 2, 3, 3)))
        y = ad.upsample2d_nearest(g, x, factor=1)
        np.testing.assert_array_equal(y.data, x.data)

    def test_1x1_replicates_to_2x2(self):
        g = ad.Graph()
        x = tensor(np.full((1, 1, 1, 1), 7.0))
        y = ad.upsample2d_nearest(g, x)
        np.testing.assert_array_equal(y.data, np.full((1, 1, 2, 2), 7.0))

    def test_backward_is_block_sum(self):
        g = ad.Graph()
        x = tensor(np.zeros((1, 1, 2, 2)), requires_grad=True)
        y = ad.upsample2d_nearest(g, x)
        wts = np.arange(16, dtype=np.float64).reshape(1, 1, 4, 4)
        ad.backward(g, weighted_sum(g, y, wts))
        expected = wts.reshape(1, 1, 2, 2, 2, 2).sum(axis=(3, 5)).reshape(1, 1, 2, 2)
        np.testing.assert_array_equal(x.grad, expected.astype(np.float32))

    def test_bad_factor_rejected(self):
        g = ad.Graph()
        with pytest.raises(ad.AutodiffError, match="factor"):
            ad.upsample2d_nearest(g, tensor(np.zeros((1, 1, 2, 2))), factor=0)


class TestBatchnorm2d:
    def _gb(self, c, gamma=1.0, beta=0.0):
        return (tensor(np.full(c, gamma)), tensor(np.full(c, beta)))

    def test_train_normalizes_per_channel(self):
        g = ad.Graph()
        rng = np.random.default_rng(1)
        x = tensor(rng.normal(3.0, 2.0, size=(4, 3, 5, 5)))
        gamma, beta = self._gb(3)
        y = ad.batchnorm2d(g, x, gamma, beta, ad.BatchNormState(3), "train")
        means = y.data.mean(axis=(0, 2, 3))
        variances = y.data.var(axis=(0, 2, 3))
        np.testing.assert_allclose(means, 0.0, atol=1e-4)
        np.testing.assert_allclose(variances, 1.0, atol=1e-4)

    def test_affine_shift_and_scale(self):
        g = ad.Graph()
        x = tensor(np.random.default_rng(2).normal(size=(4, 2, 5, 5)))
        gamma, beta = self._gb(2, gamma=2.0, beta=3.0)
        y = ad.batchnorm2d(g, x, gamma, beta, ad.BatchNormState(2), "train")
        np.testing.assert_allclose(y.data.mean(axis=(0, 2, 3)), 3.0, atol=1e-4)
        np.testing.assert_allclose(y.data.std(axis=(0, 2, 3)), 2.0, atol=1e-4)

    def test_running_stats_momentum_update(self):
        g = ad.Graph()
        x = tensor(np.random.default_rng(3).normal(5.0, 3.0, size=(2, 2, 4, 4)))
        state = ad.BatchNormState(2)
        ad.batchnorm2d(g, x, *self._gb(2), state, "train")
        mu = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        np.testing.assert_allclose(state.running_mean, 0.1 * mu, rtol=1e-6)
        np.testing.assert_allclose(state.running_var, 0.9 * 1.0 + 0.1 * var, rtol=1e-6)
        assert state.batches_seen == 1

    def test_infer_before_train_rejected(self):
        g = ad.Graph()
        x = tensor(np.zeros((1, 2, 4, 4)))
        with pytest.raises(ad.AutodiffError, match="before any train step"):
            ad.batchnorm2d(g, x, *self._gb(2), ad.BatchNormState(2), "infer")

    def test_infer_uses_running_stats(self):
        g = ad.Graph()
        x = tensor(np.random.default_rng(4).normal(size=(1, 2, 3, 3)))
        state = ad.BatchNormState(2)
        state.running_mean = np.array([0.5, -0.5], dtype=np.float32)
        state.running_var = np.array([4.0, 0.25], dtype=np.float32)
        state.batches_seen = 1
        y = ad.batchnorm2d(g, x, *self._gb(2), state, "infer")
        expected = (x.data - state.running_mean[None, :, None, None]) / np.sqrt(
            state.running_var[None, :, None, None] + 1e-5)
        np.testing.assert_allclose(y.data, expected, atol=1e-6)

    def test_single_element_batch_rejected(self):
        g = ad.Graph()
        with pytest.raises(ad.AutodiffError, match=">= 2"):
            ad.batchnorm2d(g, tensor(np.zeros((1, 2, 1, 1))), *self._gb(2),
                           ad.BatchNormState(2), "train")

    def test_channel_mismatch_rejected(self):
        g = ad.Graph()
        with pytest.raises(ad.AutodiffError, match="channels"):
            ad.batchnorm2d(g, tensor(np.zeros((2, 3, 4, 4))), *self._gb(2),
                           ad.BatchNormState(2), "train")


class TestPointwiseOps:
    def test_relu_forward_backward(self):
        g = ad.Graph()
        x = tensor([[[[-1.0, 2.0], [0.0, 3.0]]]], requires_grad=True)
        y = ad.relu(g, x)
        np.testing.assert_array_equal(y.data[0, 0], [[0, 2], [0, 3]])
        ad.backward(g, weighted_sum(g, y, np.ones((1, 1, 2, 2))))
        np.testing.assert_array_equal(x.grad[0, 0], [[0, 1], [0, 1]])

    def test_softmax_equal_logits(self):
        g = ad.Graph()
        y = ad.softmax_channel(g, tensor(np.zeros((2, 8, 3, 3))))
        np.testing.assert_allclose(y.data, 0.125, atol=1e-7)

    @pytest.mark.parametrize("seed", range(5))
    def test_softmax_rows_sum_to_one(self, seed):
        g = ad.Graph()
        x = tensor(np.random.default_rng(seed).normal(scale=5.0, size=(2, 8, 4, 4)))
        y = ad.softmax_channel(g, x)
        np.testing.assert_allclose(y.data.sum(axis=1), 1.0, atol=1e-6)
        assert np.all(np.isfinite(y.data))

    def test_concat_forward_and_split_backward(self):
        g = ad.Graph()
        a = tensor(np.full((1, 2, 2, 2), 1.0), requires_grad=True)
        b = tensor(np.full((1, 3, 2, 2), 2.0), requires_grad=True)
        y = ad.concat_channel(g, a, b)
        assert y.shape == (1, 5, 2, 2)
        np.testing.assert_array_equal(y.data[:, :2], a.data)
        np.testing.assert_array_equal(y.data[:, 2:], b.data)
        wts = np.concatenate([np.full((1, 2, 2, 2), 3.0), np.full((1, 3, 2, 2), 5.0)], axis=1)
        ad.backward(g, weighted_sum(g, y, wts))
        np.testing.assert_array_equal(a.grad, np.full((1, 2, 2, 2), 3.0, dtype=np.float32))
        np.testing.assert_array_equal(b.grad, np.full((1, 3, 2, 2), 5.0, dtype=np.float32))

    def test_concat_spatial_mismatch_rejected(self):
        g = ad.Graph()
        with pytest.raises(ad.AutodiffError, match="concat"):
            ad.concat_channel(g, tensor(np.zeros((1, 2, 4, 4))), tensor(np.zeros((1, 2, 3, 4))))

    def test_dropout_rate_zero_identity_both_modes(self):
        x = tensor(np.random.default_rng(0).normal(size=(2, 3, 4, 4)))
        for mode in ("train", "infer"):
            y = ad.dropout(ad.Graph(), x, 0.0, mode, seed=7)
            np.testing.assert_array_equal(y.data, x.data)

    def test_dropout_infer_identity_any_rate(self):
        x = tensor(np.random.default_rng(1).normal(size=(2, 3, 4, 4)))
        y = ad.dropout(ad.Graph(), x, 0.7, "infer", seed=7)
        np.testing.assert_array_equal(y.data, x.data)

    def test_dropout_bad_rate_rejected(self):
        x = tensor(np.zeros((1, 1, 2, 2)))
        for rate in (1.0, -0.1, 1.5):
            with pytest.raises(ad.AutodiffError, match="rate"):
                ad.dropout(ad.Graph(), x, rate, "train", seed=0)

    def test_dropout_scales_survivors(self):
        x = tensor(np.ones((4, 4, 16, 16)))
        y = ad.dropout(ad.Graph(), x, 0.5, "train", seed=3)
        values = set(np.unique(y.data).tolist())
        assert values == {0.0, 2.0}
        kept = float((y.data != 0).mean())
        assert 0.4 < kept < 0.6

    def test_dropout_deterministic_per_seed(self):
        x = tensor(np.random.default_rng(2).normal(size=(2, 3, 8, 8)))
        y1 = ad.dropout(ad.Graph(), x, 0.4, "train", seed=11)
        y2 = ad.dropout(ad.Graph(), x, 0.4, "train", seed=11)
        y3 = ad.dropout(ad.Graph(), x, 0.4, "train", seed=12)
        np.testing.assert_array_equal(y1.data, y2.data)
        assert not np.array_equal(y1.data, y3.data)


class TestBackward:
    def test_sum_gives_ones(self):
        g = ad.Graph()
        x = tensor(np.random.default_rng(0).normal(size=(2, 1, 3, 3)), requires_grad=True)
        ad.backward(g, weighted_sum(g, x, np.ones(x.shape)))
        np.testing.assert_array_equal(x.grad, np.ones(x.shape, dtype=np.float32))

    def test_sum_of_squares_gives_2x(self):
        g = ad.Graph()
        x = tensor(np.random.default_rng(1).normal(size=(1, 1, 4, 4)), requires_grad=True)
        sq = ad.Tensor(x.data * x.data, dtype=x.data.dtype)
        g.record(sq, (x,), lambda dout: (2.0 * x.data * dout,))
        ad.backward(g, weighted_sum(g, sq, np.ones(x.shape)))
        np.testing.assert_allclose(x.grad, 2.0 * x.data, rtol=1e-6)

    def test_fanout_accumulates(self):
        g = ad.Graph()
        x = tensor(np.random.default_rng(2).normal(size=(1, 2, 2, 2)), requires_grad=True)
        y = ad.relu(g, x)
        z = ad.concat_channel(g, y, y)
        ad.backward(g, weighted_sum(g, z, np.ones(z.shape)))
        np.testing.assert_array_equal(x.grad, 2.0 * (x.data > 0))

    def test_non_scalar_loss_rejected(self):
        g = ad.Graph()
        x = tensor(np.zeros((1, 1, 2, 2)), requires_grad=True)
        y = ad.relu(g, x)
        with pytest.raises(ad.AutodiffError, match="scalar"):
            ad.backward(g, y)

    def test_second_backward_rejected_then_reset_allows(self):
        g = ad.Graph()
        x = tensor(np.random.default_rng(3).normal(size=(1, 1, 2, 2)), requires_grad=True)
        loss = weighted_sum(g, ad.relu(g, x), np.ones(x.shape))
        ad.backward(g, loss)
        first = x.grad.copy()
        with pytest.raises(ad.AutodiffError, match="reset"):
            ad.backward(g, loss)
        g.reset()
        assert x.grad is None
        ad.backward(g, loss)
        np.testing.assert_array_equal(x.grad, first)

    def test_loss_without_grad_dependency_rejected(self):
        g = ad.Graph()
        x = tensor(np.zeros((1, 1, 2, 2)))
        loss = weighted_sum(g, ad.relu(g, x), np.ones(x.shape))
        with pytest.raises(ad.AutodiffError, match="requires_grad"):
            ad.backward(g, loss)

    def test_grads_add_across_graphs(self):
        x = tensor(np.random.default_rng(4).normal(size=(1, 1, 3, 3)), requires_grad=True)
        for _ in range(2):
            g = ad.Graph()
            ad.backward(g, weighted_sum(g, ad.relu(g, x), np.ones(x.shape)))
        np.testing.assert_array_equal(x.grad, 2.0 * (x.data > 0))

    def test_deterministic_chain(self):
        def run():
            g = ad.Graph()
            rng = np.random.default_rng(5)
            x = tensor(rng.normal(size=(2, 3, 8, 8)), requires_grad=True)
            w = tensor(0.1 * rng.normal(size=(4, 3, 3, 3)), requires_grad=True)
            b = tensor(np.zeros(4), requires_grad=True)
            h = ad.conv2d(g, x, w, b)
            h = ad.relu(g, h)
            h = ad.dropout(g, h, 0.3, "train", seed=9)
            loss = weighted_sum(g, h, np.ones(h.shape))
            ad.backward(g, loss)
            return loss.data.copy(), x.grad.copy(), w.grad.copy()
        a = run()
        b = run()
        for left, right in zip(a, b):
            np.testing.assert_array_equal(left, right)


class TestFiniteDifferences:
    @pytest.mark.parametrize("op", sorted(OP_CASES))
    @pytest.mark.parametrize("seed", SEEDS)
    def test_op_matches_central_differences(self, op, seed):
        build, arrays = OP_CASES[op](seed)
        err = fd_max_rel_error(build, arrays, rng=np.random.default_rng(seed + 1000))
        assert err < 1e-4, f"{op} seed {seed}: max relative error {err:.3e}"
