"""Performance indices computed from ground-truth / predicted mask pairs.

All overlap indices are built from soft confusion sums (no thresholding of
predictions), with a small slacking factor delta keeping denominators away
from zero. Pass ``threshold=`` to any entry point that accepts predictions to
get the binary-reporting mode instead.

Conventions for the Hausdorff distance:

- both foreground sets empty  -> 0.0 (perfect agreement)
- exactly one set empty       -> nan ("undefined"; no finite distance is
  meaningful). Batch means skip undefined values and report how many were
  skipped.
"""

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from segsense.validation import (
    as_binary_array,
    as_unit_interval_array,
    check_same_shape,
)

METRIC_NAMES = (
    "dice",
    "f_score",
    "iou",
    "rmse",
    "loss_bce",
    "loss_dice",
    "hausdorff",
)

# indices where a smaller value means a better model
LOWER_IS_BETTER = frozenset({"rmse", "loss_bce", "loss_dice", "hausdorff"})

CSV_HEADER = ("pair_id",) + METRIC_NAMES + ("hd_defined",)


@dataclass(frozen=True)
class MetricConfig:
    """Knobs shared by the index formulas.

    beta weights recall vs precision in the F-score (1 by default), delta is
    the slacking factor that avoids division-by-zero singularities, and
    bce_clamp bounds predictions away from 0/1 before taking logs.
    """

    beta: float = 1.0
    delta: float = 1e-5
    bce_clamp: float = 1e-7

    def __post_init__(self):
        if self.beta <= 0:
            raise ValueError(f"beta must be > 0, got {self.beta}")
        if self.delta <= 0:
            raise ValueError(f"delta must be > 0, got {self.delta}")
        if not (0.0 < self.bce_clamp < 0.5):
            raise ValueError(f"bce_clamp must be in (0, 0.5), got {self.bce_clamp}")


DEFAULT_CONFIG = MetricConfig()


@dataclass(frozen=True)
class ConfusionCounts:
    """Soft TP/FP/FN sums over the pixels of one mask pair."""

    tp: float
    fp: float
    fn: float

    def __post_init__(self):
        if self.tp < 0 or self.fp < 0 or self.fn < 0:
            raise ValueError(
                f"counts must be nonnegative, got ({self.tp}, {self.fp}, {self.fn})"
            )


@dataclass(frozen=True)
class MetricRecord:
    """The index vector for one evaluation point."""

    pair_id: str
    dice: float
    f_score: float
    iou: float
    rmse: float
    loss_bce: float
    loss_dice: float
    hausdorff: float
    hd_defined: bool = True

    def value(self, name):
        if name not in METRIC_NAMES:
            raise KeyError(f"unknown metric index {name!r}")
        return getattr(self, name)


def _as_pair(gt, pr, threshold=None):
    gt_arr = as_binary_array(_data(gt), "gt")
    pr_arr = as_unit_interval_array(_data(pr), "pr")
    check_same_shape(gt_arr, pr_arr)
    if threshold is not None:
        pr_arr = (pr_arr > threshold).astype(np.float64)
    return gt_arr, pr_arr


def _data(m):
    if isinstance(m, np.ndarray):
        return m
    return m.data if hasattr(m, "data") else m


def confusion(gt, pr, threshold=None):
    """Soft confusion sums: tp = sum(gt*pr), fp = sum(pr)-tp, fn = sum(gt)-tp.

    Predictions may be soft values in [0, 1]; pass a threshold to binarize
    them first (pr > threshold).
    """
    gt_arr, pr_arr = _as_pair(gt, pr, threshold)
    tp = float(np.sum(gt_arr * pr_arr))
    fp = max(0.0, float(np.sum(pr_arr)) - tp)
    fn = max(0.0, float(np.sum(gt_arr)) - tp)
    return ConfusionCounts(tp=tp, fp=fp, fn=fn)


def dice(counts, config=DEFAULT_CONFIG):
    """Overlap similarity (2*tp + delta) / (fn + fp + 2*tp + delta)."""
    d = config.delta
    return (2.0 * counts.tp + d) / (counts.fn + counts.fp + 2.0 * counts.tp + d)


def f_score(counts, config=DEFAULT_CONFIG):
    """Weighted harmonic mean of precision and recall with slack delta."""
    b2 = config.beta ** 2
    d = config.delta
    num = (1.0 + b2) * (counts.tp + d)
    return num / (num + b2 * counts.fn + counts.fp + d)


def iou(counts, config=DEFAULT_CONFIG):
    """Intersection over union (tp + delta) / (fn + fp + tp + delta)."""
    d = config.delta
    return (counts.tp + d) / (counts.fn + counts.fp + counts.tp + d)


def dice_loss(counts, config=DEFAULT_CONFIG):
    """1 - dice; evaluation-side counterpart of training with a Dice objective."""
    return 1.0 - dice(counts, config)


def rmse(gt, pr, threshold=None):
    """Pixelwise root-mean-square difference between the two maps."""
    gt_arr, pr_arr = _as_pair(gt, pr, threshold)
    return float(np.sqrt(np.mean((gt_arr - pr_arr) ** 2)))


def bce_loss(gt, pr, config=DEFAULT_CONFIG, threshold=None):
    """Mean binary cross-entropy with predictions clamped away from 0 and 1."""
    gt_arr, pr_arr = _as_pair(gt, pr, threshold)
    p = np.clip(pr_arr, config.bce_clamp, 1.0 - config.bce_clamp)
    return float(-np.mean(gt_arr * np.log(p) + (1.0 - gt_arr) * np.log1p(-p)))


def _foreground_points(arr, spacing):
    pts = np.argwhere(arr > 0.5).astype(np.float64)
    pts[:, 0] *= spacing[0]
    pts[:, 1] *= spacing[1]
    return pts


def directed_hausdorff(gt, pr, spacing=(1.0, 1.0)):
    """max over gt foreground points of the distance to the nearest pr point.

    Returns nan when either foreground set is empty.
    """
    gt_arr, pr_arr = _as_pair(gt, pr)
    a = _foreground_points(gt_arr, spacing)
    b = _foreground_points(pr_arr, spacing)
    if len(a) == 0 or len(b) == 0:
        return math.nan
    dists, _ = cKDTree(b).query(a)
    return float(np.max(dists))


def hausdorff(gt, pr, spacing=(1.0, 1.0)):
    """Symmetric Hausdorff distance between the two foreground sets.

    Distances are Euclidean over (row, col) scaled by spacing=(dy, dx); the
    default is isotropic pixel units. Both sets empty gives 0.0; exactly one
    empty gives nan (undefined).
    """
    gt_arr, pr_arr = _as_pair(gt, pr)
    a = _foreground_points(gt_arr, spacing)
    b = _foreground_points(pr_arr, spacing)
    if len(a) == 0 and len(b) == 0:
        return 0.0
    if len(a) == 0 or len(b) == 0:
        return math.nan
    d_ab, _ = cKDTree(b).query(a)
    d_ba, _ = cKDTree(a).query(b)
    return float(max(np.max(d_ab), np.max(d_ba)))


def evaluate_pair(gt, pr, config=DEFAULT_CONFIG, spacing=(1.0, 1.0),
                  pair_id="", threshold=None):
    """Compute the full index vector for one gt/pr pair."""
    gt_arr, pr_arr = _as_pair(gt, pr, threshold)
    counts = confusion(gt_arr, pr_arr)
    hd = hausdorff(gt_arr, pr_arr, spacing)
    return MetricRecord(
        pair_id=pair_id or getattr(gt, "source_id", ""),
        dice=dice(counts, config),
        f_score=f_score(counts, config),
        iou=iou(counts, config),
        rmse=rmse(gt_arr, pr_arr),
        loss_bce=bce_loss(gt_arr, pr_arr, config),
        loss_dice=dice_loss(counts, config),
        hausdorff=hd,
        hd_defined=not math.isnan(hd),
    )


def batch_mean(records, pair_id="batch_mean"):
    """Arithmetic mean of each index over the batch, without any rounding.

    Undefined Hausdorff values are excluded from the Hausdorff mean; the
    number of excluded records is returned alongside the mean record.
    Summation order is fixed (input order) for bit-reproducibility.
    """
    records = list(records)
    if not records:
        raise ValueError("batch_mean needs at least one record")
    n = len(records)
    hd_values = [r.hausdorff for r in records if r.hd_defined]
    hd_undefined = n - len(hd_values)
    mean = MetricRecord(
        pair_id=pair_id,
        dice=sum(r.dice for r in records) / n,
        f_score=sum(r.f_score for r in records) / n,
        iou=sum(r.iou for r in records) / n,
        rmse=sum(r.rmse for r in records) / n,
        loss_bce=sum(r.loss_bce for r in records) / n,
        loss_dice=sum(r.loss_dice for r in records) / n,
        hausdorff=sum(hd_values) / len(hd_values) if hd_values else math.nan,
        hd_defined=bool(hd_values),
    )
    return mean, hd_undefined


def _format_value(x):
    return repr(float(x))


def write_metrics_csv(path, records, summary=True):
    """Write per-pair metric rows at full double precision.

    The hd_defined column counts the defined Hausdorff values aggregated in
    the row: 1/0 for single pairs, the defined count for the summary row.
    """
    records = list(records)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_HEADER)
        for r in records:
            writer.writerow(
                [r.pair_id]
                + [_format_value(r.value(name)) for name in METRIC_NAMES]
                + [int(r.hd_defined)]
            )
        if summary and records:
            mean, hd_undefined = batch_mean(records)
            writer.writerow(
                [mean.pair_id]
                + [_format_value(mean.value(name)) for name in METRIC_NAMES]
                + [len(records) - hd_undefined]
            )
    return path
