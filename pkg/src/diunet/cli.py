"""Command-line interface tying the pipeline together.

Subcommands: generate, preprocess, train, evaluate, segment, stats,
gradcheck, paramcount, repro. Training options can come from an INI config
file ([model] / [train] sections); command-line flags override file
values and unknown keys are rejected. All randomness flows from --seed.
Outputs are written to a temporary file and renamed, so failures leave
nothing partial behind. DIUNET_THREADS caps fold-level parallelism.
"""

import argparse
import configparser
import os
import sys
from dataclasses import replace

import numpy as np

from . import autodiff as ad
from .metrics import binarize, compose_from_channels
from .network import (
    ModelConfig,
    build_model,
    count_params,
    load_model,
    save_model,
)
from .phantom import PhantomSpec, generate_phantoms, read_dataset, write_dataset
from .preprocess import channel_stats, preprocess_dataset, zscore
from .stats import compare_models, summarize, write_decision_csv
from .train import (
    TrainConfig,
    cross_validate,
    evaluate_samples,
    median_over_folds,
    read_fold_reports_csv,
    train_model,
    write_fold_reports_csv,
    write_history_csv,
    write_metrics_csv,
)

CONFIG_SCHEMA = {
    "model": {"depth": int, "base_filters": int, "variant": str},
    "train": {
        "epochs": int,
        "batch_size": int,
        "lr": float,
        "lr_decay": float,
        "seed": int,
        "folds": int,
        "threshold": float,
        "val_fraction": float,
    },
}

TRAIN_DEFAULTS = {
    "depth": 4,
    "base_filters": 8,
    "variant": "dilated",
    "epochs": 100,
    "batch_size": 64,
    "lr": 1e-4,
    "lr_decay": 0.9,
    "seed": 0,
    "folds": 10,
    "threshold": 0.5,
    "val_fraction": 0.1,
}


def load_config_file(path):
    """Parse the INI config; unknown sections or keys are errors."""
    parser = configparser.ConfigParser()
    if not parser.read(path):
        raise ValueError(f"cannot read config file {path}")
    values = {}
    for section in parser.sections():
        if section not in CONFIG_SCHEMA:
            raise ValueError(f"unknown config section [{section}]")
        for key, raw in parser[section].items():
            if key not in CONFIG_SCHEMA[section]:
                raise ValueError(f"unknown key {key!r} in section [{section}]")
            values[key] = CONFIG_SCHEMA[section][key](raw)
    return values


def resolve_settings(args):
    """Defaults, overridden by the config file, overridden by CLI flags."""
    settings = dict(TRAIN_DEFAULTS)
    if getattr(args, "config", None):
        settings.update(load_config_file(args.config))
    for key in TRAIN_DEFAULTS:
        flag = getattr(args, key, None)
        if flag is not None:
            settings[key] = flag
    return settings


def write_pgm(mask, path):
    """Binary mask as a P5 portable graymap with values {0, 255}."""
    mask = np.asarray(mask)
    data = (mask.astype(np.uint8) * 255).tobytes()
    header = f"P5\n{mask.shape[1]} {mask.shape[0]}\n255\n".encode("ascii")
    tmp = str(path) + ".tmp"
    with open(tmp, "wb") as f:
        f.write(header + data)
    os.replace(tmp, path)


def standardize_with_model(model, samples):
    return [replace(s, image=zscore(s.image, model.norm_mean, model.norm_std)) for s in samples]


# ---------------------------------------------------------------------------
# subcommands


def cmd_generate(args):
    spec = PhantomSpec(size=args.size, count=args.count, seed=args.seed)
    samples = generate_phantoms(spec)
    write_dataset(samples, args.out)
    print(f"wrote {len(samples)} phantoms ({args.size}x{args.size}) to {args.out}")
    return 0


def cmd_preprocess(args):
    samples = read_dataset(args.data)
    prepped = preprocess_dataset(samples, args.size, window=not args.no_window)
    if not prepped:
        raise ValueError("no samples left after preprocessing")
    if args.zscore:
        mean, std = channel_stats([s.image for s in prepped])
        prepped = [replace(s, image=zscore(s.image, mean, std)) for s in prepped]
    write_dataset(prepped, args.out)
    dropped = len(samples) - len(prepped)
    print(f"kept {len(prepped)} samples ({dropped} tumor-free dropped) -> {args.out}")
    return 0


def _train_val_split(samples, val_fraction, seed):
    n = len(samples)
    n_val = int(round(n * val_fraction))
    perm = np.random.default_rng([seed, 999]).permutation(n)
    val_ids = set(perm[:n_val].tolist())
    train = [s for i, s in enumerate(samples) if i not in val_ids]
    val = [s for i, s in enumerate(samples) if i in val_ids]
    return train, val


def cmd_train(args):
    settings = resolve_settings(args)
    samples = read_dataset(args.data)
    train_samples, val_samples = _train_val_split(
        samples, settings["val_fraction"], settings["seed"]
    )
    mean, std = channel_stats([s.image for s in train_samples])
    train_std = [replace(s, image=zscore(s.image, mean, std)) for s in train_samples]
    val_std = [replace(s, image=zscore(s.image, mean, std)) for s in val_samples]

    n, m, d = samples[0].image.shape
    model_config = ModelConfig(
        depth=settings["depth"],
        base_filters=settings["base_filters"],
        height=n,
        width=m,
        in_channels=d,
        classes=3,
        variant=settings["variant"],
    )
    train_config = TrainConfig(
        epochs=settings["epochs"],
        batch_size=settings["batch_size"],
        base_lr=settings["lr"],
        lr_decay=settings["lr_decay"],
        seed=settings["seed"],
        folds=settings["folds"],
        threshold=settings["threshold"],
    )
    model = build_model(model_config, seed=settings["seed"])
    model.norm_mean = mean.astype(np.float32)
    model.norm_std = std.astype(np.float32)
    history = train_model(model, train_std, val_std, train_config)
    save_model(model, args.out_model)
    if args.history_csv:
        write_history_csv(history, args.history_csv)
    last = history[-1]
    print(
        f"trained {settings['variant']} model for {len(history)} epochs; "
        f"final val dice l1/l2/l4 = {last.dice_label1:.3f}/{last.dice_label2:.3f}/{last.dice_label4:.3f}"
    )
    return 0


def cmd_evaluate(args):
    model = load_model(args.model)
    samples = standardize_with_model(model, read_dataset(args.data))
    rows = evaluate_samples(model, samples, args.threshold, fold=-1)
    write_metrics_csv(rows, args.report_csv)
    wt = float(np.median([r[2] for r in rows]))
    tc = float(np.median([r[3] for r in rows]))
    et = float(np.median([r[4] for r in rows]))
    print(f"median dice over {len(rows)} samples: WT {wt:.4f}, TC {tc:.4f}, ET {et:.4f}")
    return 0


def cmd_segment(args):
    model = load_model(args.model)
    raw = read_dataset(args.data)
    samples = standardize_with_model(model, raw)
    os.makedirs(args.out_dir, exist_ok=True)
    x = np.stack([s.image for s in samples])
    scores = model.predict(x)
    pred = binarize(scores, args.threshold)
    rows = evaluate_samples(model, samples, args.threshold, fold=-1)
    for i, sample in enumerate(samples):
        masks = compose_from_channels(pred[i])
        for region in ("wt", "tc", "et"):
            path = os.path.join(args.out_dir, f"sample{sample.patient_id:04d}_{region}.pgm")
            write_pgm(getattr(masks, region), path)
    write_metrics_csv(rows, os.path.join(args.out_dir, "dice.csv"))
    print(f"wrote {3 * len(samples)} masks and dice.csv to {args.out_dir}")
    return 0


def cmd_stats(args):
    reports_a = read_fold_reports_csv(args.reports_a)
    reports_b = read_fold_reports_csv(args.reports_b)
    rows = compare_models(reports_a, reports_b, alpha=args.alpha)
    write_decision_csv(rows, args.out)
    print(summarize(rows, alpha=args.alpha))
    return 0


def cmd_gradcheck(args):
    from .metrics import structure_target

    config = ModelConfig(
        depth=args.depth,
        base_filters=args.base_filters,
        height=args.size,
        width=args.size,
        in_channels=4,
        classes=3,
    )
    model = build_model(config, seed=args.seed, dtype=np.float64)
    sample = preprocess_dataset(
        generate_phantoms(PhantomSpec(size=max(args.size, 32), count=1, seed=args.seed)),
        args.size,
    )[0]
    mean, std = channel_stats([sample.image])
    x = zscore(sample.image, mean, std).astype(np.float64)[None]
    y = structure_target(sample.labels).astype(np.float64)[None]
    report = ad.gradcheck(model, x, y, n_coords=args.coords, seed=args.seed)
    worst = 0.0
    print(f"{'tensor':<24} {'shape':<18} {'checked':>7} {'max rel err':>12}")
    for row in report:
        worst = max(worst, row["max_rel_err"])
        print(
            f"{row['name']:<24} {str(row['shape']):<18} {row['checked']:>7} "
            f"{row['max_rel_err']:>12.3e}"
        )
    print(f"worst relative error: {worst:.3e} (tolerance {args.tolerance:g})")
    if worst > args.tolerance or not all(r["all_finite"] for r in report):
        print("gradient check FAILED", file=sys.stderr)
        return 1
    print("gradient check passed")
    return 0


def cmd_paramcount(args):
    base = 32 if args.full_scale else args.base_filters
    size = 1 << args.depth
    counts = {}
    for variant in ("dilated", "baseline"):
        config = ModelConfig(
            depth=args.depth, base_filters=base, height=size, width=size, variant=variant
        )
        counts[variant] = count_params(build_model(config, seed=0))
    reduction = 100.0 * (1.0 - counts["dilated"] / counts["baseline"])
    print(f"{'variant':<10} {'parameters':>12}")
    for variant, n in counts.items():
        print(f"{variant:<10} {n:>12,}")
    print(f"reduction: {reduction:.1f}% (depth {args.depth}, base filters {base})")
    return 0


def cmd_repro(args):
    os.makedirs(args.out_dir, exist_ok=True)
    spec = PhantomSpec(size=args.size, count=args.count, seed=args.seed)
    samples = generate_phantoms(spec)
    container = os.path.join(args.out_dir, "phantoms.diud")
    write_dataset(samples, container)
    prepped = preprocess_dataset(samples, args.size)

    train_config = TrainConfig(
        epochs=args.epochs,
        batch_size=args.batch,
        base_lr=args.lr,
        lr_decay=args.lr_decay,
        seed=args.seed,
        folds=args.k,
    )
    reports = {}
    for variant in ("dilated", "baseline"):
        model_config = ModelConfig(
            depth=args.depth,
            base_filters=args.base_filters,
            height=args.size,
            width=args.size,
            in_channels=4,
            classes=3,
            variant=variant,
        )
        fold_reports, rows = cross_validate(prepped, model_config, train_config)
        reports[variant] = fold_reports
        write_fold_reports_csv(
            fold_reports, os.path.join(args.out_dir, f"fold_reports_{variant}.csv")
        )
        write_metrics_csv(rows, os.path.join(args.out_dir, f"metrics_{variant}.csv"))
        wt, tc, et = median_over_folds(fold_reports)
        print(f"{variant}: across-fold median dice WT {wt:.4f}, TC {tc:.4f}, ET {et:.4f}")

    rows = compare_models(reports["dilated"], reports["baseline"], alpha=args.alpha)
    write_decision_csv(rows, os.path.join(args.out_dir, "decision.csv"))
    print(summarize(rows, alpha=args.alpha))
    return 0


# ---------------------------------------------------------------------------
# argument wiring


def build_parser():
    parser = argparse.ArgumentParser(
        prog="diunet",
        description="Dilated Inception U-Net segmentation pipeline",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="generate a synthetic phantom dataset")
    p.add_argument("--count", type=int, default=200)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("preprocess", help="crop, resize, filter and window a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--size", type=int, default=128)
    p.add_argument("--no-window", action="store_true", help="skip intensity windowing")
    p.add_argument(
        "--zscore",
        action="store_true",
        help="also standardize with container-wide statistics (training computes "
        "split-specific statistics itself)",
    )
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train", help="train one model on a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--config", help="INI file with [model] and [train] sections")
    p.add_argument("--out-model", required=True)
    p.add_argument("--history-csv")
    for key, typ in (
        ("depth", int),
        ("base_filters", int),
        ("variant", str),
        ("epochs", int),
        ("batch_size", int),
        ("lr", float),
        ("lr_decay", float),
        ("seed", int),
        ("threshold", float),
        ("val_fraction", float),
    ):
        p.add_argument(f"--{key.replace('_', '-')}", type=typ, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="per-sample sub-region Dice for a trained model")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--report-csv", required=True)
    p.add_argument("--threshold", type=float, default=0.5)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("segment", help="write predicted sub-region masks as PGM images")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--threshold", type=float, default=0.5)
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("stats", help="compare two fold-report CSVs")
    p.add_argument("--reports-a", required=True)
    p.add_argument("--reports-b", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--alpha", type=float, default=0.05)
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("gradcheck", help="finite-difference check of all gradients")
    p.add_argument("--depth", type=int, default=2)
    p.add_argument("--base-filters", type=int, default=2)
    p.add_argument("--size", type=int, default=16)
    p.add_argument("--coords", type=int, default=100)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("paramcount", help="parameter counts for both variants")
    p.add_argument("--depth", type=int, default=4)
    p.add_argument("--base-filters", type=int, default=8)
    p.add_argument("--full-scale", action="store_true", help="use base_filters=32")
    p.set_defaults(func=cmd_paramcount)

    p = sub.add_parser("repro", help="full pipeline: generate, preprocess, CV, stats")
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--count", type=int, default=200)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--depth", type=int, default=3)
    p.add_argument("--base-filters", type=int, default=8)
    p.add_argument("--epochs", type=int, default=60)
    p.add_argument("--batch", type=int, default=16)
    p.add_argument("--lr", type=float, default=3e-3)
    p.add_argument("--lr-decay", type=float, default=0.9)
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--alpha", type=float, default=0.05)
    p.set_defaults(func=cmd_repro)

    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
