"""Trainable layers: dilated convolution and batch normalization."""

import numpy as np

from . import autodiff as ad
from .tensorops import DilatedConvSpec


def he_init(rng, shape, fan_in, dtype=np.float32):
    """Draw weights from normal(0, sqrt(2 / fan_in))."""
    if fan_in < 1:
        raise ValueError(f"fan_in must be >= 1, got {fan_in}")
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape).astype(dtype)


class ConvLayer:
    """Stride-1, same-padded (possibly dilated) convolution with bias.

    Weights are He-initialized with fan_in = k*k*Cin; biases start at zero.
    Dilation changes the receptive field but not the parameter count.
    """

    def __init__(self, name, spec: DilatedConvSpec, rng, dtype=np.float32):
        self.name = name
        self.spec = spec
        k = spec.kernel_size
        w = he_init(rng, (k, k, spec.in_channels, spec.out_channels), k * k * spec.in_channels, dtype)
        self.weights = ad.Param(name + ".w", w)
        self.bias = ad.Param(name + ".b", np.zeros(spec.out_channels, dtype=dtype))

    def __call__(self, x):
        return ad.dconv(x, self.weights, self.bias, dilation=self.spec.dilation)

    def parameters(self):
        return [self.weights, self.bias]


class BatchNormLayer:
    """Per-channel batch normalization with running statistics.

    Train mode normalizes with batch statistics and updates the running
    mean/variance by exponential smoothing; inference mode applies the
    frozen affine map. momentum and epsilon follow common practice as the
    architecture itself does not pin them.
    """

    def __init__(self, name, channels, momentum=0.9, eps=1e-5, dtype=np.float32):
        if eps <= 0:
            raise ValueError("epsilon must be positive")
        self.name = name
        self.momentum = momentum
        self.eps = eps
        self.gamma = ad.Param(name + ".gamma", np.ones(channels, dtype=dtype))
        self.beta = ad.Param(name + ".beta", np.zeros(channels, dtype=dtype))
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)

    def __call__(self, x, train=True, update_running=True):
        if train:
            out, mean, var = ad.batchnorm_train(x, self.gamma, self.beta, eps=self.eps)
            if update_running:
                m = self.momentum
                self.running_mean = (m * self.running_mean + (1 - m) * mean).astype(self.running_mean.dtype)
                self.running_var = (m * self.running_var + (1 - m) * var).astype(self.running_var.dtype)
            return out
        return ad.batchnorm_infer(
            x, self.gamma, self.beta, self.running_mean, self.running_var, eps=self.eps
        )

    def parameters(self):
        return [self.gamma, self.beta]

    def state_tensors(self):
        return [
            (self.name + ".running_mean", self.running_mean),
            (self.name + ".running_var", self.running_var),
        ]
