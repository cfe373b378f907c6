"""Dice overlap, Dice loss, binarization and glioma sub-region composition.

Ground-truth label maps use the values 0 (background), 1 (necrotic and
non-enhancing core), 2 (peritumoral edema) and 4 (enhancing tumor). The
derived sub-regions are unions of those structures:

    whole tumor     WT = 1 u 2 u 4
    tumor core      TC = 1 u 4
    enhancing tumor ET = 4

so ET is contained in TC is contained in WT by construction.
"""

from dataclasses import dataclass

import numpy as np

LEGAL_LABELS = (0, 1, 2, 4)
STRUCTURE_LABELS = (1, 2, 4)   # prediction channel order

# smoothing inside the loss; large enough to keep empty-mask gradients tame
LOSS_SMOOTHING = 1.0
# smoothing for reported scores; dice(empty, empty) evaluates to 1
SCORE_SMOOTHING = 1e-7


@dataclass(frozen=True)
class SubRegionMasks:
    wt: np.ndarray
    tc: np.ndarray
    et: np.ndarray


def validate_labels(labels):
    """Raise if the label map contains anything outside {0, 1, 2, 4}."""
    labels = np.asarray(labels)
    bad = ~np.isin(labels, LEGAL_LABELS)
    if bad.any():
        pos = np.argwhere(bad)[0]
        raise ValueError(
            f"illegal label value {labels[tuple(pos)]} at pixel {tuple(int(i) for i in pos)}"
        )
    return labels


def dice_score(p, g, eps=SCORE_SMOOTHING):
    """Smoothed Dice overlap (2|P.G| + eps) / (|P| + |G| + eps) in [0, 1]."""
    p = np.asarray(p, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    if p.shape != g.shape:
        raise ValueError(f"mask shapes differ: {p.shape} vs {g.shape}")
    inter = float((p * g).sum())
    return (2.0 * inter + eps) / (float(p.sum()) + float(g.sum()) + eps)


def dice_loss(pred, target, eps=LOSS_SMOOTHING):
    """Negative log of the class-averaged smoothed Dice on soft predictions.

    pred is (N,M,K) in [0,1] (or batched (B,N,M,K), in which case the
    per-sample losses are averaged); target is binary of the same shape.
    """
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"prediction {pred.shape} and target {target.shape} differ")
    if pred.ndim == 3:
        pred, target = pred[None], target[None]
    s_pg = (pred * target).sum(axis=(1, 2))
    s_p = pred.sum(axis=(1, 2))
    s_g = target.sum(axis=(1, 2))
    dice = (2.0 * s_pg + eps) / (s_p + s_g + eps)
    return float(-np.log(dice.mean(axis=1)).mean())


def binarize(p, threshold=0.5):
    """Elementwise p >= threshold as a uint8 mask."""
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must be in (0, 1), got {threshold}")
    return (np.asarray(p) >= threshold).astype(np.uint8)


def compose_subregions(labels):
    """Build WT/TC/ET masks from a ground-truth label map."""
    labels = validate_labels(labels)
    wt = np.isin(labels, (1, 2, 4)).astype(np.uint8)
    tc = np.isin(labels, (1, 4)).astype(np.uint8)
    et = (labels == 4).astype(np.uint8)
    return SubRegionMasks(wt=wt, tc=tc, et=et)


def compose_from_channels(pred):
    """Build WT/TC/ET masks from binary prediction channels (label 1, 2, 4)."""
    pred = np.asarray(pred)
    if pred.ndim != 3 or pred.shape[-1] != 3:
        raise ValueError(f"expected (N,M,3) channel masks, got shape {pred.shape}")
    c1, c2, c4 = (pred[..., i].astype(bool) for i in range(3))
    return SubRegionMasks(
        wt=(c1 | c2 | c4).astype(np.uint8),
        tc=(c1 | c4).astype(np.uint8),
        et=c4.astype(np.uint8),
    )


def subregion_dices(pred_masks: SubRegionMasks, true_masks: SubRegionMasks):
    """Dice per sub-region as a (wt, tc, et) tuple."""
    return (
        dice_score(pred_masks.wt, true_masks.wt),
        dice_score(pred_masks.tc, true_masks.tc),
        dice_score(pred_masks.et, true_masks.et),
    )


def structure_target(labels):
    """Binary (N,M,3) training target with channels for labels 1, 2, 4."""
    labels = validate_labels(labels)
    return np.stack([(labels == v) for v in STRUCTURE_LABELS], axis=-1).astype(np.float32)
