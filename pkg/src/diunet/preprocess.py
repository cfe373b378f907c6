"""Slice preprocessing: crop to the brain, resize, filter, window, standardize.

The pipeline runs in a fixed order: (1) crop each slice to the bounding
box of nonzero tissue, (2) resize to the working resolution (bilinear for
image channels, nearest-neighbor for label maps), (3) drop slices without
any tumor pixels, (4) window each channel so its 1st/99th percentiles map
to 0/255, and (5) z-score each channel with statistics taken from the
training split only.
"""

from dataclasses import dataclass, replace

import numpy as np

from .metrics import validate_labels


@dataclass
class SegmentationSample:
    """One 2-D slice: D-channel image, label map and provenance."""

    image: np.ndarray           # (N, M, D) float32
    labels: np.ndarray          # (N, M) uint8, values in {0, 1, 2, 4}
    patient_id: int = 0
    slice_index: int = 0
    grade: str = "HGG"          # HGG or LGG

    def __post_init__(self):
        if self.image.ndim != 3:
            raise ValueError(f"image must be (N,M,D), got shape {self.image.shape}")
        if self.labels.shape != self.image.shape[:2]:
            raise ValueError(
                f"labels {self.labels.shape} do not match image plane {self.image.shape[:2]}"
            )
        if self.grade not in ("HGG", "LGG"):
            raise ValueError(f"grade must be HGG or LGG, got {self.grade!r}")


def bounding_box(image):
    """Tightest (row0, row1, col0, col1) box (inclusive) of nonzero pixels.

    A pixel counts as nonzero when any channel is nonzero, so all
    co-registered modalities are cropped identically.
    """
    image = np.asarray(image)
    mask = image != 0
    if mask.ndim == 3:
        mask = mask.any(axis=2)
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    if rows.size == 0:
        raise ValueError("image is entirely zero, no content to crop")
    return int(rows[0]), int(rows[-1]), int(cols[0]), int(cols[-1])


def _bilinear_coords(n_src, n_dst):
    # half-pixel-center mapping; size 1 target degenerates to source center
    src = (np.arange(n_dst) + 0.5) * (n_src / n_dst) - 0.5
    src = np.clip(src, 0.0, n_src - 1.0)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_src - 1)
    frac = src - lo
    return lo, hi, frac


def resize_image(image, height, width):
    """Bilinear resize of an (N,M) or (N,M,D) float image."""
    image = np.asarray(image)
    if image.shape[0] < 2 or image.shape[1] < 2:
        raise ValueError(f"cannot resize degenerate input of shape {image.shape}")
    if height < 1 or width < 1:
        raise ValueError("target size must be positive")
    r0, r1, rf = _bilinear_coords(image.shape[0], height)
    c0, c1, cf = _bilinear_coords(image.shape[1], width)
    if image.ndim == 3:
        rf = rf[:, None, None]
        cf = cf[None, :, None]
    else:
        rf = rf[:, None]
        cf = cf[None, :]
    top = image[r0][:, c0] * (1 - cf) + image[r0][:, c1] * cf
    bot = image[r1][:, c0] * (1 - cf) + image[r1][:, c1] * cf
    return (top * (1 - rf) + bot * rf).astype(image.dtype, copy=False)


def resize_labels(labels, height, width):
    """Nearest-neighbor resize; label values pass through unchanged."""
    labels = np.asarray(labels)
    if labels.shape[0] < 2 or labels.shape[1] < 2:
        raise ValueError(f"cannot resize degenerate input of shape {labels.shape}")
    r = np.clip(np.round((np.arange(height) + 0.5) * (labels.shape[0] / height) - 0.5), 0, labels.shape[0] - 1).astype(int)
    c = np.clip(np.round((np.arange(width) + 0.5) * (labels.shape[1] / width) - 0.5), 0, labels.shape[1] - 1).astype(int)
    return labels[np.ix_(r, c)]


def has_tumor(labels):
    """True when any pixel carries a tumor structure label."""
    return bool(np.isin(np.asarray(labels), (1, 2, 4)).any())


def nearest_rank_percentile(values, q):
    """Nearest-rank percentile: smallest value with at least q of the mass below."""
    if not 0.0 < q <= 1.0:
        raise ValueError(f"q must be in (0, 1], got {q}")
    v = np.sort(np.asarray(values).reshape(-1))
    rank = max(int(np.ceil(q * v.size)), 1)
    return float(v[rank - 1])


def window_intensity(channel, low=0.01, high=0.99):
    """Clip a channel to its [low, high] percentiles and map onto [0, 255].

    A channel whose two anchor percentiles coincide (constant or nearly
    constant data) maps to all zeros.
    """
    channel = np.asarray(channel, dtype=np.float64)
    p_lo = nearest_rank_percentile(channel, low)
    p_hi = nearest_rank_percentile(channel, high)
    if p_hi <= p_lo:
        return np.zeros_like(channel, dtype=np.float32)
    clipped = np.clip(channel, p_lo, p_hi)
    return (255.0 * (clipped - p_lo) / (p_hi - p_lo)).astype(np.float32)


def window_image(image):
    """Apply intensity windowing independently to every channel."""
    image = np.asarray(image)
    return np.stack([window_intensity(image[:, :, c]) for c in range(image.shape[2])], axis=-1)


def channel_stats(images):
    """Per-channel mean and std pooled over a collection of (N,M,D) images."""
    stacked = np.stack([np.asarray(im, dtype=np.float64) for im in images])
    mean = stacked.mean(axis=(0, 1, 2))
    std = stacked.std(axis=(0, 1, 2))
    return mean, std


def zscore(image, mean, std):
    """Standardize each channel with the given (training-split) statistics."""
    image = np.asarray(image, dtype=np.float64)
    return ((image - mean) / (np.asarray(std) + 1e-8)).astype(np.float32)


def crop_and_resize(sample: SegmentationSample, size):
    """Pipeline steps 1-2 for one sample."""
    r0, r1, c0, c1 = bounding_box(sample.image)
    image = sample.image[r0 : r1 + 1, c0 : c1 + 1]
    labels = sample.labels[r0 : r1 + 1, c0 : c1 + 1]
    return replace(
        sample,
        image=resize_image(image, size, size),
        labels=resize_labels(labels, size, size),
    )


def preprocess_dataset(samples, size, window=True):
    """Pipeline steps 1-4: crop, resize, discard tumor-free slices, window.

    Step 5 (z-scoring) needs training-split statistics and is applied by
    the caller once splits are known.
    """
    out = []
    for sample in samples:
        validate_labels(sample.labels)
        prepped = crop_and_resize(sample, size)
        if not has_tumor(prepped.labels):
            continue
        if window:
            prepped = replace(prepped, image=window_image(prepped.image))
        out.append(prepped)
    return out
