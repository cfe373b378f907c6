"""Normality and paired-difference tests on fold-level Dice scores.

shapiro_wilk implements the small-sample W test with Royston's
approximation for the coefficients and p-value (AS R94), valid here for
3 <= n <= 50. wilcoxon_signed_rank is the two-sided paired test; for up
to 25 nonzero differences the p-value is exact, computed by counting the
distribution of the positive-rank sum over all sign assignments (ties get
average ranks, zero differences are dropped). Larger samples fall back to
the normal approximation with tie correction and continuity correction.

compare_models applies the protocol used to compare two segmentation
models: Shapiro-Wilk on each score set as the normality gate, then the
two-sided Wilcoxon signed-rank test per glioma sub-region.
"""

import csv
import math
import os
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr, ndtri

SHAPIRO_MIN_N = 3
SHAPIRO_MAX_N = 50
WILCOXON_EXACT_MAX = 25


def shapiro_wilk(x):
    """Shapiro-Wilk normality test; returns (W, p)."""
    x = np.sort(np.asarray(x, dtype=np.float64))
    n = x.size
    if not SHAPIRO_MIN_N <= n <= SHAPIRO_MAX_N:
        raise ValueError(f"shapiro_wilk supports {SHAPIRO_MIN_N} <= n <= {SHAPIRO_MAX_N}, got {n}")
    if x[-1] == x[0]:
        raise ValueError("sample has zero range, W is undefined")

    # expected normal order statistics (Blom) and Royston-adjusted weights
    m = ndtri((np.arange(1, n + 1) - 0.375) / (n + 0.25))
    mm = float(m @ m)
    u = 1.0 / math.sqrt(n)
    a = np.empty(n)
    if n == 3:
        a[0], a[1], a[2] = -math.sqrt(0.5), 0.0, math.sqrt(0.5)
    else:
        c = m / math.sqrt(mm)
        a_n = (
            c[-1]
            + 0.221157 * u
            - 0.147981 * u**2
            - 2.071190 * u**3
            + 4.434685 * u**4
            - 2.706056 * u**5
        )
        if n > 5:
            a_n1 = (
                c[-2]
                + 0.042981 * u
                - 0.293762 * u**2
                - 1.752461 * u**3
                + 5.682633 * u**4
                - 3.582633 * u**5
            )
            phi = (mm - 2 * m[-1] ** 2 - 2 * m[-2] ** 2) / (1 - 2 * a_n**2 - 2 * a_n1**2)
            a[2:-2] = m[2:-2] / math.sqrt(phi)
            a[-1], a[-2] = a_n, a_n1
            a[0], a[1] = -a_n, -a_n1
        else:
            phi = (mm - 2 * m[-1] ** 2) / (1 - 2 * a_n**2)
            a[1:-1] = m[1:-1] / math.sqrt(phi)
            a[-1] = a_n
            a[0] = -a_n

    w_num = float(a @ x) ** 2
    w_den = float(((x - x.mean()) ** 2).sum())
    w = min(w_num / w_den, 1.0)

    if n == 3:
        p = 6.0 / math.pi * (math.asin(math.sqrt(w)) - math.asin(math.sqrt(0.75)))
        return w, float(min(max(p, 0.0), 1.0))
    if n <= 11:
        gamma = -2.273 + 0.459 * n
        if 1.0 - w >= math.exp(gamma):  # transform undefined, W far in the tail
            return w, 0.0
        wt = -math.log(gamma - math.log(1.0 - w))
        mu = 0.5440 - 0.39978 * n + 0.025054 * n**2 - 0.0006714 * n**3
        sigma = math.exp(1.3822 - 0.77857 * n + 0.062767 * n**2 - 0.0020322 * n**3)
    else:
        ln_n = math.log(n)
        wt = math.log(1.0 - w)
        mu = -1.5861 - 0.31082 * ln_n - 0.083751 * ln_n**2 + 0.0038915 * ln_n**3
        sigma = math.exp(-0.4803 - 0.082676 * ln_n + 0.0030302 * ln_n**2)
    z = (wt - mu) / sigma
    return w, float(1.0 - ndtr(z))


def average_ranks(values):
    """Ranks 1..n with ties sharing their average rank."""
    values = np.asarray(values)
    order = np.argsort(values, kind="stable")
    ranks = np.empty(values.size, dtype=np.float64)
    i = 0
    while i < values.size:
        j = i
        while j + 1 < values.size and values[order[j + 1]] == values[order[i]]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def _exact_two_sided_p(ranks2, w2_plus):
    """P(|W+ - S/2| >= |observed|) by counting rank-subset sums.

    ranks2 are the doubled (integer) ranks; counts[t] is the number of sign
    assignments with doubled positive-rank sum t, built by dynamic
    programming. Counts stay exact in float64 for m <= 25.
    """
    total = int(ranks2.sum())
    counts = np.zeros(total + 1)
    counts[0] = 1.0
    for r in ranks2:
        r = int(r)
        counts[r:] += counts[: total + 1 - r]
    hi = max(w2_plus, total - w2_plus)
    lo = total - hi
    p = (counts[hi:].sum() + counts[: lo + 1].sum()) / 2.0 ** len(ranks2)
    return min(float(p), 1.0)


def wilcoxon_signed_rank(a, b, mode="auto"):
    """Two-sided Wilcoxon signed-rank test on paired samples; returns (T, p).

    T is min(W+, W-). Zero differences are dropped; ties in |difference|
    receive average ranks. mode "exact" enumerates the null distribution
    (m <= 25), "approx" uses the tie-corrected normal approximation with
    continuity correction, "auto" picks by sample size.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("paired samples must be 1-D and of equal length")
    d = a - b
    d = d[d != 0.0]
    m = d.size
    if m == 0:
        raise ValueError("all paired differences are zero, no information")
    if mode not in ("auto", "exact", "approx"):
        raise ValueError(f"unknown mode {mode!r}")
    if mode == "exact" and m > WILCOXON_EXACT_MAX:
        raise ValueError(f"exact mode supports at most {WILCOXON_EXACT_MAX} nonzero differences")

    ranks = average_ranks(np.abs(d))
    w_plus = float(ranks[d > 0].sum())
    w_minus = float(ranks[d < 0].sum())
    t_stat = min(w_plus, w_minus)

    use_exact = mode == "exact" or (mode == "auto" and m <= WILCOXON_EXACT_MAX)
    if use_exact:
        ranks2 = np.rint(2.0 * ranks).astype(np.int64)
        p = _exact_two_sided_p(ranks2, int(round(2.0 * w_plus)))
    else:
        mean = m * (m + 1) / 4.0
        var = float((ranks**2).sum()) / 4.0
        delta = w_plus - mean
        z = (delta - 0.5 * np.sign(delta)) / math.sqrt(var)
        p = min(2.0 * (1.0 - ndtr(abs(z))), 1.0)
    return t_stat, float(p)


SUB_REGIONS = ("wt", "tc", "et")
SUB_REGION_NAMES = {"wt": "whole tumor", "tc": "tumor core", "et": "enhancing tumor"}


@dataclass
class ComparisonRow:
    region: str
    n: int
    median_a: float
    median_b: float
    mean_a: float
    mean_b: float
    shapiro_w_a: float
    shapiro_p_a: float
    shapiro_w_b: float
    shapiro_p_b: float
    normal_a: bool
    normal_b: bool
    statistic: float
    p_value: float
    significant: bool


def _safe_shapiro(values, alpha):
    try:
        w, p = shapiro_wilk(values)
        return w, p, p >= alpha
    except ValueError:
        # constant scores carry no evidence of normality
        return float("nan"), float("nan"), False


def compare_models(reports_a, reports_b, alpha=0.05):
    """Per-sub-region decision table for two fold-report lists.

    Shapiro-Wilk screens each score set for normality; the paired
    comparison itself is the two-sided Wilcoxon signed-rank test (the
    fold-level n here is far too small to trust normality anyway). When
    every paired difference is zero the p-value is reported as 1.
    """
    if len(reports_a) != len(reports_b):
        raise ValueError("fold report lists must have equal length")
    if not reports_a:
        raise ValueError("empty fold report lists")
    rows = []
    for region in SUB_REGIONS:
        xa = np.array([getattr(r, region) for r in reports_a], dtype=np.float64)
        xb = np.array([getattr(r, region) for r in reports_b], dtype=np.float64)
        wa, pa, na = _safe_shapiro(xa, alpha)
        wb, pb, nb = _safe_shapiro(xb, alpha)
        if np.all(xa == xb):
            stat, p = float("nan"), 1.0
        else:
            stat, p = wilcoxon_signed_rank(xa, xb)
        rows.append(
            ComparisonRow(
                region=region,
                n=len(xa),
                median_a=float(np.median(xa)),
                median_b=float(np.median(xb)),
                mean_a=float(xa.mean()),
                mean_b=float(xb.mean()),
                shapiro_w_a=wa,
                shapiro_p_a=pa,
                shapiro_w_b=wb,
                shapiro_p_b=pb,
                normal_a=na,
                normal_b=nb,
                statistic=stat,
                p_value=p,
                significant=bool(p < alpha),
            )
        )
    return rows


def write_decision_csv(rows, path):
    tmp = str(path) + ".tmp"
    with open(tmp, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(
            [
                "region",
                "n",
                "median_a",
                "median_b",
                "mean_a",
                "mean_b",
                "shapiro_w_a",
                "shapiro_p_a",
                "shapiro_w_b",
                "shapiro_p_b",
                "normal_a",
                "normal_b",
                "wilcoxon_t",
                "p_value",
                "significant",
            ]
        )
        for r in rows:
            writer.writerow(
                [
                    r.region,
                    r.n,
                    f"{r.median_a:.6f}",
                    f"{r.median_b:.6f}",
                    f"{r.mean_a:.6f}",
                    f"{r.mean_b:.6f}",
                    f"{r.shapiro_w_a:.6f}",
                    f"{r.shapiro_p_a:.6f}",
                    f"{r.shapiro_w_b:.6f}",
                    f"{r.shapiro_p_b:.6f}",
                    int(r.normal_a),
                    int(r.normal_b),
                    f"{r.statistic:.3f}",
                    f"{r.p_value:.6g}",
                    int(r.significant),
                ]
            )
    os.replace(tmp, path)


def summarize(rows, alpha=0.05):
    lines = []
    for r in rows:
        verdict = "significant" if r.significant else "not significant"
        lines.append(
            f"{SUB_REGION_NAMES[r.region]}: median {r.median_a:.4f} -> {r.median_b:.4f}, "
            f"Wilcoxon p = {r.p_value:.4g} ({verdict} at alpha = {alpha})"
        )
    return "\n".join(lines)
