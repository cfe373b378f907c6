"""Adam optimization, the training loop and k-fold cross-validation.

Training minimizes the Dice loss with Adam at a base learning rate that
decays exponentially every 10 epochs. Batches are drawn by a seeded
shuffle each epoch and the incomplete final batch is kept. Validation
Dice per intra-tumoral structure is recorded every epoch; fold-level
evaluation reports the median Dice per glioma sub-region over the fold's
validation samples.

All randomness derives from integer seeds, so a (seed, config, dataset)
triple fully determines the trained weights. Folds are independent models
seeded with seed+fold and may train concurrently; DIUNET_THREADS caps the
worker count.
"""

import csv
import multiprocessing
import os
from concurrent.futures import ProcessPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass, replace

import numpy as np

try:
    from threadpoolctl import threadpool_limits
except ImportError:  # pragma: no cover
    threadpool_limits = None

from . import autodiff as ad
from .metrics import binarize, compose_from_channels, compose_subregions, dice_score, structure_target
from .network import ModelConfig, build_model
from .phantom import kfold_split
from .preprocess import channel_stats, zscore

LR_DECAY_EPOCHS = 10


@contextmanager
def _single_threaded_blas():
    """Pin BLAS to one thread; the small batched products here run faster
    without thread handoff, and fold-level parallelism owns the cores."""
    if threadpool_limits is None:
        yield
    else:
        with threadpool_limits(limits=1):
            yield


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 64
    base_lr: float = 1e-4
    lr_decay: float = 0.9
    seed: int = 0
    folds: int = 10
    threshold: float = 0.5

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.folds < 2:
            raise ValueError("epochs and batch_size must be >= 1, folds >= 2")
        if self.base_lr < 0 or not 0 < self.lr_decay <= 1:
            raise ValueError("base_lr must be >= 0 and lr_decay in (0, 1]")


@dataclass
class AdamState:
    m: list
    v: list
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params):
        return cls(
            m=[np.zeros_like(p) for p in params],
            v=[np.zeros_like(p) for p in params],
        )


def adam_step(params, grads, state: AdamState, lr):
    """One bias-corrected Adam update, in place; t increments once per call."""
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


class Adam:
    """Adam bound to a model's parameters; rejects non-finite gradients."""

    def __init__(self, params):
        self.params = list(params)
        self.state = AdamState.for_params([p.data for p in self.params])

    def step(self, lr):
        grads = []
        for p in self.params:
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            if not np.isfinite(g).all():
                raise FloatingPointError(f"non-finite gradient in parameter {p.name!r}")
            grads.append(g)
        adam_step([p.data for p in self.params], grads, self.state, lr)


def lr_at_epoch(epoch, config: TrainConfig):
    """base_lr * decay^floor(epoch / 10); constant within each 10-epoch block."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return config.base_lr * config.lr_decay ** (epoch // LR_DECAY_EPOCHS)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    dice_label1: float
    dice_label2: float
    dice_label4: float
    lr: float


@dataclass
class FoldReport:
    """Median validation Dice per glioma sub-region for one fold's model."""

    fold: int
    wt: float
    tc: float
    et: float


def _to_arrays(samples):
    x = np.stack([s.image for s in samples]).astype(np.float32)
    y = np.stack([structure_target(s.labels) for s in samples]).astype(np.float32)
    return x, y


def _batched_scores(model, x, batch=32):
    parts = [model.predict(x[i : i + batch]) for i in range(0, len(x), batch)]
    return np.concatenate(parts, axis=0)


def structure_dices(model, x, y, threshold=0.5):
    """Median per-image Dice for each target channel (labels 1, 2, 4)."""
    pred = binarize(_batched_scores(model, x), threshold)
    per_channel = []
    for c in range(y.shape[-1]):
        scores = [dice_score(pred[i, :, :, c], y[i, :, :, c]) for i in range(len(x))]
        per_channel.append(float(np.median(scores)))
    return per_channel


def train_model(model, train_samples, val_samples, config: TrainConfig):
    """Train in place; returns the per-epoch history."""
    if not train_samples:
        raise ValueError("training set is empty")
    x_train, y_train = _to_arrays(train_samples)
    x_val, y_val = _to_arrays(val_samples) if val_samples else (None, None)

    optimizer = Adam(model.parameters())
    history = []
    n = len(x_train)
    with _single_threaded_blas():
        for epoch in range(config.epochs):
            lr = lr_at_epoch(epoch, config)
            order = np.random.default_rng([config.seed, epoch]).permutation(n)
            losses = []
            for start in range(0, n, config.batch_size):
                idx = order[start : start + config.batch_size]
                out = model.forward(x_train[idx], train=True)
                loss = ad.dice_loss(out, y_train[idx].astype(out.data.dtype))
                ad.backward(loss, optimizer.params)
                optimizer.step(lr)
                losses.append(float(loss.data))
            if x_val is not None and len(x_val):
                d1, d2, d4 = structure_dices(model, x_val, y_val, config.threshold)
            else:
                d1 = d2 = d4 = float("nan")
            history.append(EpochRecord(epoch, float(np.mean(losses)), d1, d2, d4, lr))
    return history


def evaluate_samples(model, samples, threshold=0.5, fold=-1):
    """Per-sample sub-region Dice rows: (sample_id, fold, wt, tc, et)."""
    x = np.stack([s.image for s in samples]).astype(np.float32)
    pred = binarize(_batched_scores(model, x), threshold)
    rows = []
    for i, s in enumerate(samples):
        pm = compose_from_channels(pred[i])
        gm = compose_subregions(s.labels)
        rows.append(
            (
                s.patient_id,
                fold,
                dice_score(pm.wt, gm.wt),
                dice_score(pm.tc, gm.tc),
                dice_score(pm.et, gm.et),
            )
        )
    return rows


def _run_fold(fold, train_ids, val_ids, samples, model_config, config):
    train_samples = [samples[i] for i in train_ids]
    val_samples = [samples[i] for i in val_ids]

    # z-score with statistics from this fold's training split only
    mean, std = channel_stats([s.image for s in train_samples])
    train_samples = [replace(s, image=zscore(s.image, mean, std)) for s in train_samples]
    val_samples = [replace(s, image=zscore(s.image, mean, std)) for s in val_samples]

    model = build_model(model_config, seed=config.seed + fold)
    fold_config = TrainConfig(
        epochs=config.epochs,
        batch_size=config.batch_size,
        base_lr=config.base_lr,
        lr_decay=config.lr_decay,
        seed=config.seed + fold,
        folds=config.folds,
        threshold=config.threshold,
    )
    history = train_model(model, train_samples, val_samples, fold_config)
    rows = evaluate_samples(model, val_samples, config.threshold, fold=fold)
    report = FoldReport(
        fold=fold,
        wt=float(np.median([r[2] for r in rows])),
        tc=float(np.median([r[3] for r in rows])),
        et=float(np.median([r[4] for r in rows])),
    )
    return report, rows, history


def thread_count():
    """Worker cap from DIUNET_THREADS (default 1: sequential folds)."""
    raw = os.environ.get("DIUNET_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise ValueError(f"DIUNET_THREADS must be an integer, got {raw!r}")


def _run_fold_job(args):
    fold, train_ids, val_ids, samples, model_config, config = args
    try:
        # keep the whole job single-threaded: forked children must not spin
        # up the inherited multi-threaded BLAS pool
        with _single_threaded_blas():
            return _run_fold(fold, train_ids, val_ids, samples, model_config, config)
    except Exception as exc:
        raise RuntimeError(f"fold {fold} failed: {exc}") from exc


def cross_validate(samples, model_config: ModelConfig, config: TrainConfig):
    """Train one fresh model per fold; returns (fold reports, per-sample rows).

    Folds run in separate processes when DIUNET_THREADS > 1 (each model is
    independent and seeded with seed+fold); results are ordered by fold
    index and independent of scheduling. Training errors propagate
    annotated with the fold that raised them.
    """
    folds = kfold_split(len(samples), config.folds, config.seed)
    workers = min(thread_count(), len(folds))
    jobs = [
        (fold, train_ids, val_ids, samples, model_config, config)
        for fold, (train_ids, val_ids) in enumerate(folds)
    ]
    if workers > 1:
        # quiesce the parent's BLAS threads before forking: forking while a
        # BLAS worker sits in a critical section deadlocks the children
        ctx = multiprocessing.get_context("fork")
        with _single_threaded_blas():
            with ProcessPoolExecutor(max_workers=workers, mp_context=ctx) as pool:
                results = list(pool.map(_run_fold_job, jobs))
    else:
        results = [_run_fold_job(j) for j in jobs]

    reports = [r for r, _, _ in results]
    all_rows = [row for _, rows, _ in results for row in rows]
    return reports, all_rows


def median_over_folds(reports):
    """Across-fold median Dice per sub-region as a (wt, tc, et) tuple."""
    return (
        float(np.median([r.wt for r in reports])),
        float(np.median([r.tc for r in reports])),
        float(np.median([r.et for r in reports])),
    )


# ---------------------------------------------------------------------------
# CSV plumbing


def _write_csv(path, header, rows):
    tmp = str(path) + ".tmp"
    with open(tmp, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(header)
        writer.writerows(rows)
    os.replace(tmp, path)


def write_history_csv(history, path):
    _write_csv(
        path,
        ["epoch", "train_loss", "dice_label1", "dice_label2", "dice_label4", "lr"],
        [
            (
                h.epoch,
                f"{h.train_loss:.6f}",
                f"{h.dice_label1:.6f}",
                f"{h.dice_label2:.6f}",
                f"{h.dice_label4:.6f}",
                f"{h.lr:.6e}",
            )
            for h in history
        ],
    )


def write_fold_reports_csv(reports, path):
    _write_csv(
        path,
        ["fold", "wt_dice", "tc_dice", "et_dice"],
        [(r.fold, f"{r.wt:.6f}", f"{r.tc:.6f}", f"{r.et:.6f}") for r in reports],
    )


def read_fold_reports_csv(path):
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        reports = []
        for row in reader:
            reports.append(
                FoldReport(
                    fold=int(row["fold"]),
                    wt=float(row["wt_dice"]),
                    tc=float(row["tc_dice"]),
                    et=float(row["et_dice"]),
                )
            )
    if not reports:
        raise ValueError(f"{path}: no fold reports found")
    return reports


def write_metrics_csv(rows, path):
    _write_csv(
        path,
        ["sample_id", "fold", "wt_dice", "tc_dice", "et_dice"],
        [(sid, fold, f"{wt:.6f}", f"{tc:.6f}", f"{et:.6f}") for sid, fold, wt, tc, et in rows],
    )
