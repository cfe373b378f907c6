"""Inception-style modules and the contracting/expanding segmentation network.

Two variants share one topology:

* "dilated"  - each module runs three branches of 1x1 reduction followed by
  a 3x3 convolution at dilation 1, 2 and 3.
* "baseline" - the classic undilated counterpart: 1x1 reductions followed
  by 1x1, 3x3 and 5x5 convolutions.

Branch outputs are channel-concatenated (giving 3x the branch filters),
then batch-normalized and passed through ReLU. The encoder doubles the
branch filter count at every level and halves the spatial size with 2x2
max pooling; the decoder mirrors this with nearest-neighbor upsampling,
skip concatenation (which doubles the channel depth relative to the
encoder module at that level) and halved filter counts. A final 1x1
convolution maps to the class channels and a pixel-wise sigmoid produces
independent binary mask scores.
"""

import struct
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .layers import BatchNormLayer, ConvLayer
from .tensorops import DilatedConvSpec

VARIANTS = {
    "dilated": ((3, 1), (3, 2), (3, 3)),   # (kernel, dilation) per branch
    "baseline": ((1, 1), (3, 1), (5, 1)),
}

MODEL_MAGIC = b"DIUN"
MODEL_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    """Declarative description of one network instance."""

    depth: int = 4
    base_filters: int = 8
    height: int = 128
    width: int = 128
    in_channels: int = 4
    classes: int = 3
    variant: str = "dilated"

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError(f"depth must be >= 1, got {self.depth}")
        if self.base_filters < 2 or self.base_filters % 2:
            raise ValueError(
                f"base_filters must be even and >= 2 (the decoder halves it), got {self.base_filters}"
            )
        div = 1 << self.depth
        if self.height % div or self.width % div:
            raise ValueError(
                f"spatial dims {self.height}x{self.width} must be divisible by 2^depth = {div}"
            )
        if self.in_channels < 1 or self.classes < 1:
            raise ValueError("in_channels and classes must be positive")
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {sorted(VARIANTS)}, got {self.variant!r}")


class InceptionModule:
    """Three parallel reduce+convolve branches, concatenated, BN, ReLU."""

    def __init__(self, name, in_channels, branch_filters, branch_kernels, rng, dtype=np.float32):
        self.name = name
        self.branch_filters = branch_filters
        self.branches = []
        for i, (k, l) in enumerate(branch_kernels):
            reduce = ConvLayer(
                f"{name}.b{i}.reduce",
                DilatedConvSpec(1, 1, in_channels, branch_filters),
                rng,
                dtype,
            )
            conv = ConvLayer(
                f"{name}.b{i}.conv",
                DilatedConvSpec(k, l, branch_filters, branch_filters),
                rng,
                dtype,
            )
            self.branches.append((reduce, conv))
        self.bn = BatchNormLayer(name + ".bn", 3 * branch_filters, dtype=dtype)

    @property
    def out_channels(self):
        return 3 * self.branch_filters

    def __call__(self, x, train=True, update_running=True):
        # the three 1x1 reductions share the input; run them as one GEMM
        reduced = ad.conv1x1_multi(
            x,
            [reduce.weights for reduce, _ in self.branches],
            [reduce.bias for reduce, _ in self.branches],
        )
        outs = [conv(r) for r, (_, conv) in zip(reduced, self.branches)]
        cat = ad.concat_n(outs)
        return ad.relu(self.bn(cat, train=train, update_running=update_running))

    def parameters(self):
        params = []
        for reduce, conv in self.branches:
            params += reduce.parameters() + conv.parameters()
        return params + self.bn.parameters()

    def state_tensors(self):
        return self.bn.state_tensors()


class DiuNet:
    """The assembled contracting/expanding segmentation network."""

    def __init__(self, config: ModelConfig, seed=0, dtype=np.float32):
        self.config = config
        self.dtype = dtype
        rng = np.random.default_rng(seed)
        kernels = VARIANTS[config.variant]
        c, depth = config.base_filters, config.depth

        self.encoders = []
        in_ch = config.in_channels
        for i in range(depth):
            f = c * (1 << i)
            mod = InceptionModule(f"enc{i}", in_ch, f, kernels, rng, dtype)
            self.encoders.append(mod)
            in_ch = mod.out_channels

        f_bot = c * (1 << (depth - 1))
        self.bottleneck = InceptionModule("bottleneck", in_ch, f_bot, kernels, rng, dtype)

        self.decoders = []
        for i in reversed(range(depth)):
            in_dec = 6 * c * (1 << i)  # upsampled stream + skip, 2x the encoder output
            f_dec = (c * (1 << i)) // 2
            self.decoders.append(InceptionModule(f"dec{i}", in_dec, f_dec, kernels, rng, dtype))

        self.final = ConvLayer(
            "final",
            DilatedConvSpec(1, 1, self.decoders[-1].out_channels, config.classes),
            rng,
            dtype,
        )
        # per-channel input standardization learned from the training split;
        # stored with the model so saved containers are self-contained
        self.norm_mean = np.zeros(config.in_channels, dtype=np.float32)
        self.norm_std = np.ones(config.in_channels, dtype=np.float32)

    def forward(self, x, train=True, update_running=True):
        """Run a (B,H,W,D) batch through the network; returns a sigmoid Value."""
        x = np.asarray(x)
        if x.ndim != 4:
            raise ValueError(f"input must be (B,H,W,D), got shape {x.shape}")
        cfg = self.config
        if x.shape[1:] != (cfg.height, cfg.width, cfg.in_channels):
            raise ValueError(
                f"input {x.shape[1:]} does not match model input "
                f"({cfg.height}, {cfg.width}, {cfg.in_channels})"
            )
        v = ad.Value(np.ascontiguousarray(x, dtype=self.dtype))
        skips = []
        for mod in self.encoders:
            v = mod(v, train=train, update_running=update_running)
            skips.append(v)
            v = ad.maxpool(v)
        v = self.bottleneck(v, train=train, update_running=update_running)
        for mod, skip in zip(self.decoders, reversed(skips)):
            v = ad.concat(ad.upsample(v), skip)
            v = mod(v, train=train, update_running=update_running)
        return ad.sigmoid(self.final(v))

    def predict(self, x):
        """Inference-mode forward pass returning a plain array of scores."""
        return self.forward(x, train=False).data

    def modules(self):
        return self.encoders + [self.bottleneck] + self.decoders

    def parameters(self):
        params = []
        for mod in self.modules():
            params += mod.parameters()
        return params + self.final.parameters()

    def state_tensors(self):
        """All named tensors in build order: parameters, running stats, norms."""
        out = [(p.name, p.data) for p in self.parameters()]
        for mod in self.modules():
            out += mod.state_tensors()
        out.append(("input.norm_mean", self.norm_mean))
        out.append(("input.norm_std", self.norm_std))
        return out


def build_diunet(config: ModelConfig, seed=0, dtype=np.float32):
    if config.variant != "dilated":
        raise ValueError("config.variant must be 'dilated'")
    return DiuNet(config, seed=seed, dtype=dtype)


def build_baseline_inception_unet(config: ModelConfig, seed=0, dtype=np.float32):
    if config.variant != "baseline":
        raise ValueError("config.variant must be 'baseline'")
    return DiuNet(config, seed=seed, dtype=dtype)


def build_model(config: ModelConfig, seed=0, dtype=np.float32):
    return DiuNet(config, seed=seed, dtype=dtype)


def count_params(model):
    """Number of trainable scalars (running statistics excluded)."""
    return sum(p.data.size for p in model.parameters())


# ---------------------------------------------------------------------------
# model container


def save_model(model, path):
    """Write the model to the binary container (little-endian, f32 data)."""
    cfg = model.config
    tensors = model.state_tensors()
    with open(str(path) + ".tmp", "wb") as f:
        f.write(MODEL_MAGIC)
        f.write(struct.pack("<H", MODEL_VERSION))
        variant_id = sorted(VARIANTS).index(cfg.variant)
        f.write(
            struct.pack(
                "<6IB",
                cfg.depth,
                cfg.base_filters,
                cfg.height,
                cfg.width,
                cfg.in_channels,
                cfg.classes,
                variant_id,
            )
        )
        f.write(struct.pack("<I", len(tensors)))
        for name, data in tensors:
            raw = name.encode("utf-8")
            f.write(struct.pack("<H", len(raw)))
            f.write(raw)
            f.write(struct.pack("<B", data.ndim))
            f.write(struct.pack(f"<{data.ndim}I", *data.shape))
            f.write(np.ascontiguousarray(data, dtype="<f4").tobytes())
    import os

    os.replace(str(path) + ".tmp", path)


def load_model(path):
    """Read a model container back into a DiuNet (float32)."""
    with open(path, "rb") as f:
        if f.read(4) != MODEL_MAGIC:
            raise ValueError(f"{path}: not a model container")
        (version,) = struct.unpack("<H", f.read(2))
        if version != MODEL_VERSION:
            raise ValueError(f"{path}: unsupported container version {version}")
        depth, base, h, w, d, k, variant_id = struct.unpack("<6IB", f.read(25))
        cfg = ModelConfig(
            depth=depth,
            base_filters=base,
            height=h,
            width=w,
            in_channels=d,
            classes=k,
            variant=sorted(VARIANTS)[variant_id],
        )
        model = DiuNet(cfg, seed=0, dtype=np.float32)
        expected = model.state_tensors()
        (n_tensors,) = struct.unpack("<I", f.read(4))
        if n_tensors != len(expected):
            raise ValueError(f"{path}: expected {len(expected)} tensors, found {n_tensors}")
        by_name = {}
        for _ in range(n_tensors):
            (name_len,) = struct.unpack("<H", f.read(2))
            name = f.read(name_len).decode("utf-8")
            (ndim,) = struct.unpack("<B", f.read(1))
            dims = struct.unpack(f"<{ndim}I", f.read(4 * ndim))
            count = int(np.prod(dims)) if ndim else 1
            data = np.frombuffer(f.read(4 * count), dtype="<f4").reshape(dims)
            by_name[name] = data
    for name, dest in expected:
        if name not in by_name:
            raise ValueError(f"{path}: missing tensor {name!r}")
        src = by_name[name]
        if src.shape != dest.shape:
            raise ValueError(f"{path}: tensor {name!r} has shape {src.shape}, expected {dest.shape}")
        dest[...] = src
    return model
