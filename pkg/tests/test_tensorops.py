"""Convolution, pooling and resampling primitives against brute-force oracles."""

from fractions import Fraction

import numpy as np
import pytest

from diunet.tensorops import (
    DilatedConvSpec,
    concat_channels,
    conv2d,
    dilate_kernel,
    dilated_conv2d,
    dilated_conv2d_input_grad,
    dilated_conv2d_weight_grad,
    effective_kernel_size,
    maxpool2,
    maxpool2_backward,
    receptive_field_gain,
    relu,
    sigmoid,
    upsample2,
    upsample2_backward,
)


def conv_oracle(x, w, bias=None, dilation=1):
    """Direct-summation dilated convolution, one scalar tap at a time."""
    h, wd, cin = x.shape
    k, _, _, cout = w.shape
    c = (k - 1) // 2
    out = np.zeros((h, wd, cout), dtype=np.float64)
    for i in range(h):
        for j in range(wd):
            for u in range(k):
                for v in range(k):
                    ii = i + dilation * (u - c)
                    jj = j + dilation * (v - c)
                    if 0 <= ii < h and 0 <= jj < wd:
                        for a in range(cin):
                            for o in range(cout):
                                out[i, j, o] += x[ii, jj, a] * w[u, v, a, o]
    if bias is not None:
        out += bias
    return out


def int_valued(rng, shape, lo=-9, hi=9):
    """Random float64 array whose values are exactly representable integers."""
    return rng.integers(lo, hi + 1, size=shape).astype(np.float64)


class TestConv2d:
    def test_all_ones_center(self):
        x = np.ones((3, 3, 1))
        w = np.ones((3, 3, 1, 1))
        out = conv2d(x, w, np.zeros(1))
        assert out[1, 1, 0] == 9.0

    def test_delta_kernel_identity(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(7, 6, 3))
        w = np.zeros((3, 3, 3, 3))
        for c in range(3):
            w[1, 1, c, c] = 1.0
        out = conv2d(x, w)
        np.testing.assert_array_equal(out, x)

    def test_matches_quintuple_loop_oracle(self):
        rng = np.random.default_rng(1)
        x = int_valued(rng, (5, 5, 2))
        w = int_valued(rng, (3, 3, 2, 3))
        b = int_valued(rng, (3,))
        expected = conv_oracle(x, w, b)
        got = conv2d(x, w, b)
        assert np.max(np.abs(got - expected)) == 0.0

    def test_matches_oracle_float_inputs(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=(6, 4, 3))
        w = rng.normal(size=(3, 3, 3, 2))
        np.testing.assert_allclose(conv2d(x, w), conv_oracle(x, w), rtol=1e-13, atol=1e-13)

    def test_batched_matches_per_image(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(4, 6, 6, 2)).astype(np.float32)
        w = rng.normal(size=(3, 3, 2, 5)).astype(np.float32)
        b = rng.normal(size=5).astype(np.float32)
        batched = conv2d(x, w, b)
        for i in range(4):
            np.testing.assert_array_equal(batched[i], conv2d(x[i], w, b))

    def test_even_kernel_rejected(self):
        with pytest.raises(ValueError, match="odd"):
            conv2d(np.ones((4, 4, 1)), np.ones((2, 2, 1, 1)))

    def test_channel_mismatch_rejected(self):
        with pytest.raises(ValueError, match="channels"):
            conv2d(np.ones((4, 4, 2)), np.ones((3, 3, 3, 1)))

    def test_bad_bias_rejected(self):
        with pytest.raises(ValueError, match="bias"):
            conv2d(np.ones((4, 4, 1)), np.ones((3, 3, 1, 2)), np.zeros(3))


class TestDilatedConv2d:
    def test_l1_identical_to_conv2d(self):
        rng = np.random.default_rng(4)
        x = rng.normal(size=(8, 8, 3))
        w = rng.normal(size=(3, 3, 3, 4))
        np.testing.assert_array_equal(dilated_conv2d(x, w, dilation=1), conv2d(x, w))

    def test_all_ones_l2_center(self):
        x = np.ones((5, 5, 1))
        w = np.ones((3, 3, 1, 1))
        out = dilated_conv2d(x, w, np.zeros(1), dilation=2)
        assert out[2, 2, 0] == 9.0

    def test_zero_insertion_equivalence_exact(self):
        rng = np.random.default_rng(5)
        for l in (1, 2, 3):
            x = rng.normal(size=(9, 7, 2))
            w = rng.normal(size=(3, 3, 2, 3))
            direct = dilated_conv2d(x, w, dilation=l)
            expanded = conv2d(x, dilate_kernel(w, l))
            assert np.max(np.abs(direct - expanded)) == 0.0

    def test_matches_direct_summation_oracle(self):
        rng = np.random.default_rng(6)
        for l in (2, 3):
            x = int_valued(rng, (7, 7, 2))
            w = int_valued(rng, (3, 3, 2, 2))
            expected = conv_oracle(x, w, dilation=l)
            assert np.max(np.abs(dilated_conv2d(x, w, dilation=l) - expected)) == 0.0

    def test_linearity(self):
        rng = np.random.default_rng(7)
        x = rng.normal(size=(8, 8, 2)).astype(np.float32)
        y = rng.normal(size=(8, 8, 2)).astype(np.float32)
        w = rng.normal(size=(3, 3, 2, 3)).astype(np.float32)
        a, b = np.float32(0.7), np.float32(-1.3)
        lhs = dilated_conv2d(a * x + b * y, w, dilation=2)
        rhs = a * dilated_conv2d(x, w, dilation=2) + b * dilated_conv2d(y, w, dilation=2)
        np.testing.assert_allclose(lhs, rhs, rtol=1e-5, atol=1e-5)

    def test_bad_dilation_rejected(self):
        with pytest.raises(ValueError, match="dilation"):
            dilated_conv2d(np.ones((4, 4, 1)), np.ones((3, 3, 1, 1)), dilation=0)


class TestConvGradients:
    """The backward helpers are linear-algebra identities, checked as adjoints.

    <grad_out, conv(x)> == <input_grad(grad_out), x> and likewise for weights.
    """

    @pytest.mark.parametrize("l", [1, 2, 3])
    def test_input_grad_adjoint(self, l):
        rng = np.random.default_rng(8)
        x = rng.normal(size=(2, 8, 8, 3))
        w = rng.normal(size=(3, 3, 3, 4))
        gy = rng.normal(size=(2, 8, 8, 4))
        lhs = np.sum(gy * dilated_conv2d(x, w, dilation=l))
        gx = dilated_conv2d_input_grad(gy, w, dilation=l)
        rhs = np.sum(gx * x)
        np.testing.assert_allclose(lhs, rhs, rtol=1e-12)

    @pytest.mark.parametrize("l", [1, 2])
    def test_weight_grad_adjoint(self, l):
        rng = np.random.default_rng(9)
        x = rng.normal(size=(2, 6, 6, 2))
        w = rng.normal(size=(3, 3, 2, 3))
        gy = rng.normal(size=(2, 6, 6, 3))
        lhs = np.sum(gy * dilated_conv2d(x, w, dilation=l))
        gw = dilated_conv2d_weight_grad(x, gy, k=3, dilation=l)
        rhs = np.sum(gw * w)
        np.testing.assert_allclose(lhs, rhs, rtol=1e-12)


class TestReceptiveField:
    def test_effective_kernel_size_values(self):
        assert effective_kernel_size(3, 1) == 3
        assert effective_kernel_size(3, 2) == 5
        assert effective_kernel_size(3, 3) == 7

    def test_identity_and_monotone(self):
        for k in (1, 3, 5, 7):
            assert effective_kernel_size(k, 1) == k
            sizes = [effective_kernel_size(k, l) for l in range(1, 6)]
            if k > 1:
                assert all(a < b for a, b in zip(sizes, sizes[1:]))

    def test_gain_values(self):
        assert receptive_field_gain(3, 1) == 1
        assert receptive_field_gain(3, 2) == Fraction(25, 9)
        assert receptive_field_gain(3, 3) == Fraction(49, 9)

    def test_gain_is_size_ratio_squared(self):
        for k in (1, 3, 5, 7):
            for l in (1, 2, 3, 4):
                ks = effective_kernel_size(k, l)
                assert receptive_field_gain(k, l) == Fraction(ks, k) ** 2

    def test_nonpositive_rejected(self):
        with pytest.raises(ValueError):
            effective_kernel_size(0, 1)
        with pytest.raises(ValueError):
            receptive_field_gain(3, 0)


class TestDilatedConvSpec:
    def test_valid_spec(self):
        spec = DilatedConvSpec(kernel_size=3, dilation=2, in_channels=4, out_channels=8)
        assert spec.effective_kernel_size == 5

    def test_even_kernel_rejected(self):
        with pytest.raises(ValueError):
            DilatedConvSpec(kernel_size=4, dilation=1, in_channels=1, out_channels=1)

    def test_bad_channels_rejected(self):
        with pytest.raises(ValueError):
            DilatedConvSpec(kernel_size=3, dilation=1, in_channels=0, out_channels=1)


class TestMaxpool2:
    def test_tiny(self):
        out, _ = maxpool2(np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(2, 2, 1))
        np.testing.assert_array_equal(out, np.array([[[4.0]]]))

    def test_constant(self):
        x = np.full((4, 6, 2), 3.5)
        out, _ = maxpool2(x)
        np.testing.assert_array_equal(out, np.full((2, 3, 2), 3.5))

    def test_matches_window_scan_oracle(self):
        rng = np.random.default_rng(10)
        x = rng.normal(size=(8, 8, 3))
        out, _ = maxpool2(x)
        for i in range(4):
            for j in range(4):
                for c in range(3):
                    assert out[i, j, c] == x[2 * i : 2 * i + 2, 2 * j : 2 * j + 2, c].max()

    def test_odd_dims_rejected(self):
        with pytest.raises(ValueError, match="even"):
            maxpool2(np.ones((3, 4, 1)))

    def test_tie_breaks_to_first_row_major(self):
        x = np.full((2, 2, 1), 7.0)
        out, idx = maxpool2(x)
        assert idx[0, 0, 0] == 0

    def test_backward_scatters_to_argmax(self):
        x = np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(2, 2, 1)
        _, idx = maxpool2(x)
        gx = maxpool2_backward(np.array([[[5.0]]]), idx, x.shape)
        np.testing.assert_array_equal(gx[:, :, 0], [[0.0, 0.0], [0.0, 5.0]])


class TestUpsample2:
    def test_tiny(self):
        out = upsample2(np.array([[[5.0]]]))
        np.testing.assert_array_equal(out[:, :, 0], [[5.0, 5.0], [5.0, 5.0]])

    def test_maxpool_inverts_upsample(self):
        rng = np.random.default_rng(11)
        x = rng.normal(size=(5, 7, 2))
        out, _ = maxpool2(upsample2(x))
        np.testing.assert_array_equal(out, x)

    def test_index_mapping_oracle(self):
        rng = np.random.default_rng(12)
        x = rng.normal(size=(4, 4, 2))
        out = upsample2(x)
        for i in range(8):
            for j in range(8):
                np.testing.assert_array_equal(out[i, j], x[i // 2, j // 2])

    def test_backward_is_block_sum(self):
        rng = np.random.default_rng(13)
        gy = rng.normal(size=(6, 4, 3))
        gx = upsample2_backward(gy)
        for i in range(3):
            for j in range(2):
                np.testing.assert_allclose(
                    gx[i, j], gy[2 * i : 2 * i + 2, 2 * j : 2 * j + 2].sum(axis=(0, 1))
                )


class TestConcatChannels:
    def test_depth_doubles(self):
        a = np.ones((4, 4, 3))
        b = np.zeros((4, 4, 3))
        assert concat_channels(a, b).shape == (4, 4, 6)

    def test_empty_second(self):
        a = np.ones((4, 4, 3))
        out = concat_channels(a, np.empty((4, 4, 0)))
        np.testing.assert_array_equal(out, a)

    def test_first_channels_slice_back(self):
        rng = np.random.default_rng(14)
        a = rng.normal(size=(3, 5, 2))
        b = rng.normal(size=(3, 5, 4))
        out = concat_channels(a, b)
        np.testing.assert_array_equal(out[:, :, :2], a)
        np.testing.assert_array_equal(out[:, :, 2:], b)

    def test_spatial_mismatch_rejected(self):
        with pytest.raises(ValueError, match="spatial"):
            concat_channels(np.ones((4, 4, 1)), np.ones((4, 5, 1)))


class TestActivations:
    def test_relu_values(self):
        np.testing.assert_array_equal(relu(np.array([-1.0, 0.0, 2.0])), [0.0, 0.0, 2.0])

    def test_sigmoid_half_at_zero(self):
        assert sigmoid(np.array([0.0]))[0] == 0.5

    def test_sigmoid_monotone(self):
        rng = np.random.default_rng(15)
        x = np.sort(rng.normal(scale=3, size=100))
        s = sigmoid(x)
        assert np.all(np.diff(s) > 0)

    def test_sigmoid_stable_at_extremes(self):
        s = sigmoid(np.array([-1000.0, 1000.0]))
        assert s[0] == 0.0 and s[1] == 1.0
