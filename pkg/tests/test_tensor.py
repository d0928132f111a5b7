import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kanjinet import tensor as T
from kanjinet.errors import ConfigError, DimensionError


def naive_conv(x, k, b, stride, pad):
    """Direct sliding-window summation, float64."""
    x = np.pad(np.asarray(x, np.float64), ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    n, c, h, w = x.shape
    o, _, kh, kw = k.shape
    oh, ow = (h - kh) // stride + 1, (w - kw) // stride + 1
    out = np.zeros((n, o, oh, ow))
    for ni in range(n):
        for oi in range(o):
            for i in range(oh):
                for j in range(ow):
                    patch = x[ni, :, i * stride:i * stride + kh, j * stride:j * stride + kw]
                    out[ni, oi, i, j] = np.sum(patch * k[oi]) + b[oi]
    return out


class TestConv2d:
    def test_identity_kernel(self):
        x = np.random.default_rng(0).random((2, 1, 5, 4)).astype(np.float32)
        out = T.conv2d(x, np.ones((1, 1, 1, 1), np.float32), np.zeros(1, np.float32))
        np.testing.assert_array_equal(out, x)

    def test_zero_kernel_gives_bias(self):
        x = np.random.default_rng(1).random((1, 2, 4, 4))
        out = T.conv2d(x, np.zeros((3, 2, 3, 3)), np.array([0.5, -1.0, 2.0]), padding=1)
        for o, b in enumerate([0.5, -1.0, 2.0]):
            assert np.all(out[:, o] == b)

    def test_hand_example(self):
        x = np.arange(1, 10, dtype=np.float32).reshape(1, 1, 3, 3)
        out = T.conv2d(x, np.ones((1, 1, 2, 2), np.float32), np.zeros(1, np.float32))
        expected = naive_conv(x, np.ones((1, 1, 2, 2)), np.zeros(1), 1, 0)
        np.testing.assert_array_equal(expected[0, 0], [[12, 16], [24, 28]])
        np.testing.assert_array_equal(out[0, 0], [[12, 16], [24, 28]])

    @pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 0), (2, 1), (3, 2)])
    def test_matches_naive_oracle(self, stride, pad):
        rng = np.random.default_rng(stride * 10 + pad)
        x = rng.standard_normal((2, 3, 7, 6))
        k = rng.standard_normal((4, 3, 3, 3))
        b = rng.standard_normal(4)
        np.testing.assert_allclose(T.conv2d(x, k, b, stride, pad), naive_conv(x, k, b, stride, pad), rtol=1e-10)

    @pytest.mark.parametrize("h,k,s,p", [(28, 3, 1, 1), (28, 3, 1, 0), (9, 2, 2, 0), (10, 3, 3, 1)])
    def test_output_extent(self, h, k, s, p):
        out = T.conv2d(np.zeros((1, 1, h, h)), np.zeros((2, 1, k, k)), np.zeros(2), s, p)
        assert out.shape[2:] == ((h + 2 * p - k) // s + 1,) * 2

    def test_channel_mismatch_names_axes(self):
        with pytest.raises(DimensionError, match="axis"):
            T.conv2d(np.zeros((1, 2, 5, 5)), np.zeros((1, 3, 3, 3)), np.zeros(1))

    def test_kernel_larger_than_input(self):
        with pytest.raises(DimensionError):
            T.conv2d(np.zeros((1, 1, 2, 2)), np.zeros((1, 1, 3, 3)), np.zeros(1))

    def test_float32_preserved(self):
        out = T.conv2d(np.zeros((1, 1, 4, 4), np.float32), np.zeros((1, 1, 3, 3), np.float32),
                       np.zeros(1, np.float32), padding=1)
        assert out.dtype == np.float32


class TestAvgPool:
    def test_constant(self):
        out = T.avgpool2d(np.full((1, 2, 6, 6), 3.5), 2)
        assert np.all(out == 3.5) and out.shape == (1, 2, 3, 3)

    def test_mean(self):
        assert T.avgpool2d(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]), 2)[0, 0, 0, 0] == 2.5

    def test_backward_uniform(self):
        g = T.avgpool2d_backward(np.ones((1, 1, 1, 1)), np.zeros((1, 1, 2, 2)), 2)
        np.testing.assert_array_equal(g.d_input, np.full((1, 1, 2, 2), 0.25))

    def test_odd_extent_drops_trailing_cells(self):
        x = np.zeros((1, 1, 7, 7))
        assert T.avgpool2d(x, 2).shape == (1, 1, 3, 3)
        g = T.avgpool2d_backward(np.ones((1, 1, 3, 3)), x, 2).d_input
        assert np.all(g[0, 0, 6, :] == 0) and np.all(g[0, 0, :, 6] == 0)

    def test_window_too_large(self):
        with pytest.raises(DimensionError):
            T.avgpool2d(np.zeros((1, 1, 1, 1)), 2)


class TestDense:
    def test_identity(self):
        x = np.random.default_rng(0).random((3, 4))
        np.testing.assert_array_equal(T.dense(x, np.eye(4), np.zeros(4)), x)

    def test_zero_weights(self):
        out = T.dense(np.ones((2, 3)), np.zeros((3, 2)), np.array([1.5, -2.0]))
        np.testing.assert_array_equal(out, [[1.5, -2.0], [1.5, -2.0]])

    def test_hand_example(self):
        # [1,2] @ 3I + [1,1] = [4,7]
        out = T.dense(np.array([[1.0, 2.0]]), 3 * np.eye(2), np.ones(2))
        np.testing.assert_array_equal(out, [[4.0, 7.0]])

    def test_mismatch(self):
        with pytest.raises(DimensionError):
            T.dense(np.ones((2, 3)), np.ones((4, 2)), np.zeros(2))


class TestRelu:
    def test_forward(self):
        np.testing.assert_array_equal(T.relu(np.array([-1.0, 0.0, 2.0])), [0, 0, 2])

    def test_nonnegative_identity(self):
        x = np.abs(np.random.default_rng(0).standard_normal(10))
        np.testing.assert_array_equal(T.relu(x), x)

    def test_subgradient(self):
        g = T.relu_backward(np.array([5.0, 5.0, 5.0]), np.array([-1.0, 0.0, 2.0])).d_input
        np.testing.assert_array_equal(g, [0, 0, 5])


class TestDropout:
    def test_zero_p_identity(self):
        x = np.arange(6.0)
        rng = np.random.default_rng(0)
        assert T.dropout(x, 0.0, True, rng)[0] is x
        assert T.dropout(x, 0.0, False)[0] is x

    def test_eval_identity(self):
        x = np.arange(6.0)
        out, mask = T.dropout(x, 0.7, False)
        assert out is x and mask is None

    def test_expectation(self):
        # Monte-Carlo oracle: E[out] = E[in] under inverted dropout
        x = np.random.default_rng(3).random(10).astype(np.float64) + 0.5
        rng = np.random.default_rng(42)
        draws = np.stack([T.dropout(x, 0.5, True, rng)[0] for _ in range(100_000)])
        assert abs(draws.mean() - x.mean()) / x.mean() < 0.01

    def test_survivor_scaling(self):
        out, mask = T.dropout(np.ones(1000), 0.25, True, np.random.default_rng(0))
        assert set(np.unique(out)) <= {0.0, 1 / 0.75}

    def test_p_one_rejected(self):
        with pytest.raises(ConfigError):
            T.dropout(np.ones(3), 1.0, True, np.random.default_rng(0))

    def test_same_rng_state_same_mask(self):
        a = T.dropout(np.ones(50), 0.5, True, np.random.default_rng(9))[1]
        b = T.dropout(np.ones(50), 0.5, True, np.random.default_rng(9))[1]
        np.testing.assert_array_equal(a, b)


class TestFlatten:
    def test_reshape_order(self):
        x = np.arange(8.0).reshape(2, 1, 2, 2)
        np.testing.assert_array_equal(T.flatten(x), [[0, 1, 2, 3], [4, 5, 6, 7]])

    def test_roundtrip(self):
        x = np.random.default_rng(0).random((3, 2, 4, 5)).astype(np.float32)
        back = T.flatten_backward(T.flatten(x), x.shape).d_input
        assert back.shape == x.shape and back.tobytes() == x.tobytes()

    def test_channels_only(self):
        assert T.flatten(np.zeros((1, 3, 1, 1))).shape == (1, 3)


class TestSoftmaxCrossEntropy:
    def test_uniform(self):
        loss, _, probs = T.softmax_cross_entropy(np.zeros((4, 10)), np.arange(4))
        assert loss == pytest.approx(np.log(10), abs=1e-12)
        np.testing.assert_allclose(probs, 0.1)

    def test_saturated(self):
        logits = np.zeros((1, 5))
        logits[0, 2] = 50
        assert T.softmax_cross_entropy(logits, [2])[0] < 1e-6

    def test_gradient_matches_central_differences(self):
        rng = np.random.default_rng(5)
        logits = rng.standard_normal((2, 5))
        labels = np.array([1, 4])
        _, d, _ = T.softmax_cross_entropy(logits, labels)
        eps = 1e-5
        numeric = np.zeros_like(logits)
        for idx in np.ndindex(logits.shape):
            up, down = logits.copy(), logits.copy()
            up[idx] += eps
            down[idx] -= eps
            numeric[idx] = (T.softmax_cross_entropy(up, labels)[0] - T.softmax_cross_entropy(down, labels)[0]) / (2 * eps)
        np.testing.assert_allclose(d, numeric, rtol=1e-3)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**31), st.floats(1.0, 1e4))
    def test_rows_sum_to_one_for_large_logits(self, seed, scale):
        logits = np.random.default_rng(seed).uniform(-1, 1, (3, 7)).astype(np.float32) * np.float32(scale)
        _, _, probs = T.softmax_cross_entropy(logits, [0, 1, 2])
        assert np.all(np.isfinite(probs))
        np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-5)

    def test_label_out_of_range(self):
        with pytest.raises(IndexError):
            T.softmax_cross_entropy(np.zeros((1, 3)), [3])


class TestFiniteDifferenceCheck:
    def test_dense(self):
        rng = np.random.default_rng(0)
        err = T.finite_difference_check(
            lambda x, w, b: T.dense(x, w, b),
            lambda g, x, w, b: {"x": (lg := T.dense_backward(g, x, w)).d_input,
                                "w": lg.d_params["weights"], "b": lg.d_params["bias"]},
            {"x": rng.standard_normal((2, 3)), "w": rng.standard_normal((3, 4)), "b": rng.standard_normal(4)},
            epsilon=1e-3,
        )
        assert err < 1e-3

    def test_conv(self):
        rng = np.random.default_rng(1)
        err = T.finite_difference_check(
            lambda x, k, b: T.conv2d(x, k, b, 1, 1),
            lambda g, x, k, b: {"x": (lg := T.conv2d_backward(g, x, k, 1, 1)).d_input,
                                "k": lg.d_params["kernel"], "b": lg.d_params["bias"]},
            {"x": rng.standard_normal((2, 2, 5, 5)), "k": rng.standard_normal((3, 2, 3, 3)),
             "b": rng.standard_normal(3)},
        )
        assert err < 1e-3

    def test_relu_away_from_zero(self):
        rng = np.random.default_rng(2)
        x = rng.uniform(0.1, 1, (4, 5)) * rng.choice([-1, 1], (4, 5))
        err = T.finite_difference_check(T.relu, lambda g, x: {"x": T.relu_backward(g, x).d_input}, {"x": x})
        assert err < 1e-4

    def test_detects_wrong_gradient(self):
        rng = np.random.default_rng(3)
        err = T.finite_difference_check(
            lambda x: x ** 2, lambda g, x: {"x": g * x}, {"x": rng.uniform(1, 2, 5)})
        assert err > 0.4
