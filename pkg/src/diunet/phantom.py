"""Synthetic multi-modal tumor phantoms, dataset container IO, fold splits.

Each phantom is a brain-shaped ellipse of tissue on a zero background with
three nested, co-centered tumor ellipses inside: edema (label 2) around
core (label 1) around enhancing tumor (label 4), so the sub-region nesting
holds by construction. The four channels respond to each structure with
distinct intensities (loosely imitating T2/T1/T1C/FLAIR contrast), plus
Gaussian noise inside the brain. Background stays exactly zero so the
bounding-box crop finds the brain.

Every sample draws from its own RNG stream derived from (seed, index),
so generation order and parallelism cannot change the output.
"""

import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .preprocess import SegmentationSample

DATASET_MAGIC = b"DIUD"
DATASET_VERSION = 1

GRADES = ("HGG", "LGG")

# rows: brain tissue, edema, core, enhancing; columns: the four channels
DEFAULT_RESPONSES = (
    (0.45, 0.55, 0.50, 0.40),
    (0.78, 0.60, 0.58, 0.80),
    (0.62, 0.42, 0.52, 0.55),
    (0.55, 0.68, 0.92, 0.50),
)


@dataclass(frozen=True)
class PhantomSpec:
    size: int = 64
    count: int = 200
    seed: int = 0
    noise: float = 0.05                      # sigma of the added Gaussian noise
    channels: int = 4
    edema_frac: tuple = (0.14, 0.20)         # edema semi-axes as fraction of size
    core_ratio: tuple = (0.55, 0.75)         # core axes relative to edema
    enhancing_ratio: tuple = (0.45, 0.65)    # enhancing axes relative to core
    hgg_fraction: float = 210 / 285
    responses: tuple = DEFAULT_RESPONSES

    def __post_init__(self):
        if self.size < 16 or self.count < 1:
            raise ValueError("phantom size must be >= 16 and count >= 1")
        if self.channels != len(self.responses[0]):
            raise ValueError("responses must provide one intensity per channel")


def _ellipse_mask(size, center, axes, theta):
    yy, xx = np.mgrid[0:size, 0:size]
    dy = yy - center[0]
    dx = xx - center[1]
    ct, st = np.cos(theta), np.sin(theta)
    u = dy * ct + dx * st
    v = -dy * st + dx * ct
    return (u / axes[0]) ** 2 + (v / axes[1]) ** 2 <= 1.0


def ellipse_area(axes):
    """Continuous area of an ellipse with the given semi-axes."""
    return np.pi * axes[0] * axes[1]


def _generate_one(spec: PhantomSpec, index):
    rng = np.random.default_rng([spec.seed, index])
    s = spec.size
    center_img = np.array([s / 2, s / 2]) + rng.uniform(-0.03 * s, 0.03 * s, size=2)
    brain_axes = rng.uniform(0.38 * s, 0.45 * s, size=2)
    theta = rng.uniform(0.0, np.pi)

    edema_axes = rng.uniform(*spec.edema_frac, size=2) * s
    core_axes = edema_axes * rng.uniform(*spec.core_ratio)
    enh_axes = core_axes * rng.uniform(*spec.enhancing_ratio)

    # place the tumor center so the edema ellipse stays inside the brain
    slack = brain_axes.min() - edema_axes.max() - 1.0
    offset_r = rng.uniform(0.0, max(slack, 0.0))
    offset_phi = rng.uniform(0.0, 2 * np.pi)
    tumor_center = center_img + offset_r * np.array([np.sin(offset_phi), np.cos(offset_phi)])

    brain = _ellipse_mask(s, center_img, brain_axes, theta)
    edema = _ellipse_mask(s, tumor_center, edema_axes, theta) & brain
    core = _ellipse_mask(s, tumor_center, core_axes, theta) & brain
    enh = _ellipse_mask(s, tumor_center, enh_axes, theta) & brain

    labels = np.zeros((s, s), dtype=np.uint8)
    labels[edema] = 2
    labels[core] = 1
    labels[enh] = 4

    responses = np.asarray(spec.responses) + rng.uniform(-0.03, 0.03, size=(4, spec.channels))
    image = np.zeros((s, s, spec.channels), dtype=np.float32)
    for mask, row in zip((brain, edema, core, enh), responses):
        image[mask] = row.astype(np.float32)
    noise = rng.normal(0.0, spec.noise, size=image.shape).astype(np.float32)
    image[brain] += noise[brain]

    geometry = {
        "edema": ellipse_area(edema_axes) - ellipse_area(core_axes),
        "core": ellipse_area(core_axes) - ellipse_area(enh_axes),
        "enhancing": ellipse_area(enh_axes),
    }
    sample = SegmentationSample(
        image=image,
        labels=labels,
        patient_id=index,
        slice_index=int(rng.integers(40, 120)),
        grade="HGG" if rng.uniform() < spec.hgg_fraction else "LGG",
    )
    return sample, geometry


def generate_phantoms(spec: PhantomSpec, with_geometry=False):
    """Generate spec.count phantom samples; every sample contains tumor."""
    samples, geoms = [], []
    for i in range(spec.count):
        sample, geom = _generate_one(spec, i)
        if not (sample.labels != 0).any():  # cannot happen with sane geometry ranges
            raise RuntimeError(f"phantom {i} came out empty; geometry ranges too small")
        samples.append(sample)
        geoms.append(geom)
    if with_geometry:
        return samples, geoms
    return samples


# ---------------------------------------------------------------------------
# dataset container


def write_dataset(samples, path):
    """Write samples to the binary dataset container (atomic replace)."""
    if not samples:
        raise ValueError("refusing to write an empty dataset")
    n, m, d = samples[0].image.shape
    tmp = str(path) + ".tmp"
    with open(tmp, "wb") as f:
        f.write(DATASET_MAGIC)
        f.write(struct.pack("<HI3I", DATASET_VERSION, len(samples), n, m, d))
        for s in samples:
            if s.image.shape != (n, m, d):
                raise ValueError("all samples in a container must share one shape")
            f.write(np.ascontiguousarray(s.image, dtype="<f4").tobytes())
            f.write(np.ascontiguousarray(s.labels, dtype=np.uint8).tobytes())
            f.write(struct.pack("<IIB", s.patient_id, s.slice_index, GRADES.index(s.grade)))
    os.replace(tmp, path)


def read_dataset(path):
    """Read a dataset container back into a list of samples."""
    with open(path, "rb") as f:
        if f.read(4) != DATASET_MAGIC:
            raise ValueError(f"{path}: not a dataset container")
        version, count, n, m, d = struct.unpack("<HI3I", f.read(18))
        if version != DATASET_VERSION:
            raise ValueError(f"{path}: unsupported dataset version {version}")
        samples = []
        img_bytes = 4 * n * m * d
        for _ in range(count):
            image = np.frombuffer(f.read(img_bytes), dtype="<f4").reshape(n, m, d).copy()
            labels = np.frombuffer(f.read(n * m), dtype=np.uint8).reshape(n, m).copy()
            pid, sidx, grade = struct.unpack("<IIB", f.read(9))
            samples.append(
                SegmentationSample(
                    image=image,
                    labels=labels,
                    patient_id=pid,
                    slice_index=sidx,
                    grade=GRADES[grade],
                )
            )
    return samples


# ---------------------------------------------------------------------------
# fold splitting


def kfold_split(n, k, seed):
    """Randomly split range(n) into k folds of near-equal size.

    Returns a list of (train_ids, val_ids) pairs; fold i validates on
    subset i. Folds are disjoint, cover everything, and differ in size by
    at most one.
    """
    if k < 2:
        raise ValueError(f"need at least 2 folds, got {k}")
    if n < k:
        raise ValueError(f"cannot split {n} samples into {k} folds")
    perm = np.random.default_rng(seed).permutation(n)
    parts = np.array_split(perm, k)
    folds = []
    for i, part in enumerate(parts):
        train = np.concatenate([p for j, p in enumerate(parts) if j != i])
        folds.append((np.sort(train), np.sort(part)))
    return folds
