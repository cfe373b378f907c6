"""He initialization and layer behavior."""

import numpy as np
import pytest

from diunet import autodiff as ad
from diunet.layers import BatchNormLayer, ConvLayer, he_init
from diunet.tensorops import DilatedConvSpec


class TestHeInit:
    def test_fan_in_two_gives_unit_std(self):
        rng = np.random.default_rng(0)
        w = he_init(rng, (100000,), fan_in=2, dtype=np.float64)
        assert abs(w.std() - 1.0) < 0.02

    def test_variance_matches_two_over_fan_in(self):
        rng = np.random.default_rng(1)
        n = 100000
        w = he_init(rng, (n,), fan_in=36, dtype=np.float64)
        target = 2.0 / 36.0
        assert abs(w.var() / target - 1.0) < 0.05

    def test_mean_within_three_sigma(self):
        rng = np.random.default_rng(2)
        n = 100000
        fan_in = 9 * 4
        w = he_init(rng, (n,), fan_in=fan_in, dtype=np.float64)
        sigma = np.sqrt(2.0 / fan_in)
        assert abs(w.mean()) < 3.0 * sigma / np.sqrt(n)

    def test_same_seed_identical(self):
        a = he_init(np.random.default_rng(7), (4, 4), fan_in=16)
        b = he_init(np.random.default_rng(7), (4, 4), fan_in=16)
        np.testing.assert_array_equal(a, b)

    def test_bad_fan_in(self):
        with pytest.raises(ValueError):
            he_init(np.random.default_rng(0), (2,), fan_in=0)


class TestConvLayer:
    def test_bias_starts_zero(self):
        layer = ConvLayer("c", DilatedConvSpec(3, 1, 2, 4), np.random.default_rng(0))
        np.testing.assert_array_equal(layer.bias.data, np.zeros(4, dtype=np.float32))

    def test_dilation_does_not_change_param_count(self):
        rng = np.random.default_rng(0)
        n_params = []
        for l in (1, 2, 3):
            layer = ConvLayer("c", DilatedConvSpec(3, l, 4, 8), rng)
            n_params.append(sum(p.data.size for p in layer.parameters()))
        assert n_params[0] == n_params[1] == n_params[2] == 3 * 3 * 4 * 8 + 8


class TestBatchNorm:
    def test_train_mode_standardizes(self):
        rng = np.random.default_rng(3)
        bn = BatchNormLayer("bn", 3, dtype=np.float64)
        x = ad.Value(rng.normal(loc=2.0, scale=3.0, size=(4, 8, 8, 3)))
        out = bn(x, train=True).data
        np.testing.assert_allclose(out.mean(axis=(0, 1, 2)), 0.0, atol=1e-5)
        np.testing.assert_allclose(out.var(axis=(0, 1, 2)), 1.0, atol=1e-3)

    def test_identity_on_standardized_input(self):
        rng = np.random.default_rng(4)
        x = rng.normal(size=(2, 16, 16, 2))
        x = (x - x.mean(axis=(0, 1, 2))) / x.std(axis=(0, 1, 2))
        bn = BatchNormLayer("bn", 2, dtype=np.float64)
        out = bn(ad.Value(x), train=True).data
        np.testing.assert_allclose(out, x, atol=1e-4)

    def test_matches_two_pass_oracle(self):
        rng = np.random.default_rng(5)
        x = rng.normal(loc=1.5, scale=0.7, size=(3, 4, 4, 2))
        bn = BatchNormLayer("bn", 2, eps=1e-5, dtype=np.float64)
        bn.gamma.data[:] = [1.3, 0.8]
        bn.beta.data[:] = [-0.2, 0.5]
        out = bn(ad.Value(x), train=True).data
        mean = x.reshape(-1, 2).mean(axis=0)
        var = ((x.reshape(-1, 2) - mean) ** 2).mean(axis=0)
        expected = bn.gamma.data * (x - mean) / np.sqrt(var + 1e-5) + bn.beta.data
        np.testing.assert_allclose(out, expected, rtol=1e-10)

    def test_running_stats_update_with_momentum(self):
        rng = np.random.default_rng(6)
        x = rng.normal(loc=4.0, size=(2, 4, 4, 1))
        bn = BatchNormLayer("bn", 1, momentum=0.9, dtype=np.float64)
        bn(ad.Value(x), train=True)
        expected_mean = 0.9 * 0.0 + 0.1 * x.mean()
        np.testing.assert_allclose(bn.running_mean, [expected_mean], rtol=1e-10)

    def test_infer_uses_frozen_stats_deterministically(self):
        rng = np.random.default_rng(7)
        bn = BatchNormLayer("bn", 2, dtype=np.float64)
        bn.running_mean = np.array([1.0, -1.0])
        bn.running_var = np.array([4.0, 0.25])
        x = rng.normal(size=(1, 4, 4, 2))
        a = bn(ad.Value(x), train=False).data
        b = bn(ad.Value(x), train=False).data
        np.testing.assert_array_equal(a, b)
        expected = (x - bn.running_mean) / np.sqrt(bn.running_var + bn.eps)
        np.testing.assert_allclose(a, expected, rtol=1e-9)

    def test_infer_is_not_homogeneous(self):
        # frozen stats make inference affine, not linear
        bn = BatchNormLayer("bn", 1, dtype=np.float64)
        bn.running_mean = np.array([2.0])
        x = np.ones((1, 2, 2, 1))
        out1 = bn(ad.Value(x), train=False).data
        out3 = bn(ad.Value(3.0 * x), train=False).data
        assert not np.allclose(out3, 3.0 * out1)

    def test_singleton_rejected_in_train_mode(self):
        bn = BatchNormLayer("bn", 1)
        with pytest.raises(ValueError):
            bn(ad.Value(np.ones((1, 1, 1, 1))), train=True)
