"""Dense tensor primitives: dilated convolution, pooling, resampling.

All image tensors are numpy arrays in row-major, channel-last layout:
(H, W, C) for a single image or (B, H, W, C) for a batch. Convolution
weights are (kH, kW, Cin, Cout). Convolutions use stride 1 and "same"
zero padding, so spatial dimensions are always preserved.

float32 is the working dtype for models; float64 is used by gradient
checks and oracle tests. Functions here are pure and never modify their
inputs.
"""

from dataclasses import dataclass
from fractions import Fraction

import numpy as np


@dataclass(frozen=True)
class DilatedConvSpec:
    """Shape contract for a stride-1, same-padded (possibly dilated) conv."""

    kernel_size: int
    dilation: int
    in_channels: int
    out_channels: int

    def __post_init__(self):
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ValueError(
                f"kernel_size must be odd and positive, got {self.kernel_size}"
            )
        if self.dilation < 1:
            raise ValueError(f"dilation must be >= 1, got {self.dilation}")
        if self.in_channels < 1 or self.out_channels < 1:
            raise ValueError("channel counts must be positive")

    @property
    def effective_kernel_size(self):
        return effective_kernel_size(self.kernel_size, self.dilation)


def effective_kernel_size(k, l):
    """Spatial extent of a k x k kernel once l-1 zeros separate its taps."""
    if k < 1 or l < 1:
        raise ValueError(f"kernel size and dilation must be positive, got k={k}, l={l}")
    return l * (k - 1) + 1


def receptive_field_gain(k, l):
    """Receptive-field area ratio (k_s / k)^2 of a dilated vs. plain kernel.

    Returned as an exact Fraction; equals 1 for l=1.
    """
    ks = effective_kernel_size(k, l)
    return Fraction(ks, k) ** 2


def dilate_kernel(w, l):
    """Expand a (k,k,Cin,Cout) kernel by inserting l-1 zeros between taps.

    The result is the equivalent sparse (k_s, k_s, Cin, Cout) kernel: a
    plain convolution with it matches an l-dilated convolution with w.
    """
    if l < 1:
        raise ValueError(f"dilation must be >= 1, got {l}")
    if l == 1:
        return w.copy()
    k = w.shape[0]
    ks = effective_kernel_size(k, l)
    out = np.zeros((ks, ks) + w.shape[2:], dtype=w.dtype)
    out[::l, ::l] = w
    return out


def _check_image(x, name="input"):
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise ValueError(f"{name} must be (H,W,C) or (B,H,W,C), got shape {x.shape}")


def _pad_same(x, k, l):
    pad = (effective_kernel_size(k, l) - 1) // 2
    return np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))


def _tap_conv(xp, weights, dilation, h, w):
    """Tap-ordered convolution over an already padded batch."""
    out = np.zeros((xp.shape[0], h, w, weights.shape[3]), dtype=xp.dtype)
    k = weights.shape[0]
    for u in range(k):
        for v in range(k):
            sub = xp[:, u * dilation : u * dilation + h, v * dilation : v * dilation + w, :]
            out += sub @ weights[u, v]
    return out


def _tap_weight_grad(xp, grad_out, k, dilation):
    """Weight gradient from an already padded input batch."""
    b, h, w, cout = grad_out.shape
    cin = xp.shape[3]
    gflat = grad_out.reshape(-1, cout)
    grad_w = np.empty((k, k, cin, cout), dtype=grad_out.dtype)
    for u in range(k):
        for v in range(k):
            sub = xp[:, u * dilation : u * dilation + h, v * dilation : v * dilation + w, :]
            grad_w[u, v] = sub.reshape(-1, cin).T @ gflat
    return grad_w


def dilated_conv2d(x, weights, bias=None, dilation=1):
    """l-dilated convolution: out[p] = sum_s x[p + l*s] * w[s] (+ bias).

    Taps are centered on p; positions outside the image contribute zero
    ("same" padding). x is (H,W,Cin) or (B,H,W,Cin); weights (k,k,Cin,Cout);
    bias (Cout,) or None. Spatial dims are preserved.

    Internally this accumulates one channel-mixing product per kernel tap,
    in row-major tap order. Zero taps contribute exact zeros, so a plain
    convolution with a zero-expanded kernel reproduces the dilated result
    bit for bit.
    """
    x, squeeze = _check_image(x)
    if weights.ndim != 4 or weights.shape[0] != weights.shape[1]:
        raise ValueError(f"weights must be (k,k,Cin,Cout), got shape {weights.shape}")
    k = weights.shape[0]
    if k % 2 == 0:
        raise ValueError(f"kernel size must be odd, got {k}")
    if dilation < 1:
        raise ValueError(f"dilation must be >= 1, got {dilation}")
    if x.shape[3] != weights.shape[2]:
        raise ValueError(
            f"input has {x.shape[3]} channels but weights expect {weights.shape[2]}"
        )
    if bias is not None and bias.shape != (weights.shape[3],):
        raise ValueError(
            f"bias shape {bias.shape} does not match {weights.shape[3]} output channels"
        )

    if k == 1:
        # 1x1 conv is a plain channel mixing, no padding needed
        out = (x.reshape(-1, x.shape[3]) @ weights[0, 0]).reshape(x.shape[:3] + (-1,))
    else:
        out = _tap_conv(_pad_same(x, k, dilation), weights, dilation, x.shape[1], x.shape[2])
    if bias is not None:
        out = out + bias
    return out[0] if squeeze else out


def conv2d(x, weights, bias=None):
    """Standard (dilation 1) stride-1 same-padded convolution."""
    return dilated_conv2d(x, weights, bias=bias, dilation=1)


def dilated_conv2d_weight_grad(x, grad_out, k, dilation=1):
    """Gradient of dilated_conv2d w.r.t. its weights: (k,k,Cin,Cout)."""
    x, _ = _check_image(x)
    grad_out, _ = _check_image(grad_out, "grad_out")
    if k == 1:
        return (x.reshape(-1, x.shape[3]).T @ grad_out.reshape(-1, grad_out.shape[3]))[None, None]
    return _tap_weight_grad(_pad_same(x, k, dilation), grad_out, k, dilation)


def dilated_conv2d_input_grad(grad_out, weights, dilation=1):
    """Gradient of dilated_conv2d w.r.t. its input.

    For stride 1 with symmetric "same" padding this is the dilated
    convolution of grad_out with the spatially flipped, channel-transposed
    kernel.
    """
    w_t = weights[::-1, ::-1].transpose(0, 1, 3, 2)
    return dilated_conv2d(grad_out, np.ascontiguousarray(w_t), dilation=dilation)


def maxpool2(x):
    """2x2 non-overlapping max pooling.

    Returns (pooled, argmax) where argmax holds the within-window index in
    {0,1,2,3} (row-major; ties resolve to the first maximum). The indices
    feed maxpool2_backward.
    """
    x, squeeze = _check_image(x)
    b, h, w, c = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"spatial dims must be even for 2x2 pooling, got {h}x{w}")
    win = (
        x.reshape(b, h // 2, 2, w // 2, 2, c)
        .transpose(0, 1, 3, 2, 4, 5)
        .reshape(b, h // 2, w // 2, 4, c)
    )
    idx = win.argmax(axis=3)
    out = np.take_along_axis(win, idx[:, :, :, None, :], axis=3)[:, :, :, 0, :]
    if squeeze:
        return out[0], idx[0]
    return out, idx


def maxpool2_backward(grad_out, idx, input_shape):
    """Scatter pooled gradients back to the argmax positions."""
    squeeze = grad_out.ndim == 3
    if squeeze:
        grad_out, idx = grad_out[None], idx[None]
    b, h, w, c = (1,) * (4 - len(input_shape)) + tuple(input_shape)
    win = np.zeros((b, h // 2, w // 2, 4, c), dtype=grad_out.dtype)
    np.put_along_axis(win, idx[:, :, :, None, :], grad_out[:, :, :, None, :], axis=3)
    grad_x = (
        win.reshape(b, h // 2, w // 2, 2, 2, c)
        .transpose(0, 1, 3, 2, 4, 5)
        .reshape(b, h, w, c)
    )
    return grad_x[0] if squeeze else grad_x


def upsample2(x):
    """Nearest-neighbor 2x upsampling: each pixel becomes a 2x2 block."""
    x, squeeze = _check_image(x)
    out = np.repeat(np.repeat(x, 2, axis=1), 2, axis=2)
    return out[0] if squeeze else out


def upsample2_backward(grad_out):
    """Adjoint of upsample2: sum each 2x2 block."""
    squeeze = grad_out.ndim == 3
    if squeeze:
        grad_out = grad_out[None]
    b, h, w, c = grad_out.shape
    g = grad_out.reshape(b, h // 2, 2, w // 2, 2, c).sum(axis=(2, 4))
    return g[0] if squeeze else g


def concat_channels(a, b):
    """Channel-wise concatenation; a's channels come first."""
    if a.shape[:-1] != b.shape[:-1]:
        raise ValueError(
            f"spatial dims differ: {a.shape[:-1]} vs {b.shape[:-1]}"
        )
    return np.concatenate([a, b], axis=-1)


def relu(x):
    """Elementwise max(0, x)."""
    return np.maximum(x, 0)


def sigmoid(x):
    """Numerically stable elementwise logistic function."""
    out = np.empty_like(x, dtype=x.dtype)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out
