"""Segmentation quality metrics: confusion tallies, IoU, precision/recall,
confusion ratio, and the single-class vs co-occurrence sample split."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cam import PseudoMask
from .errors import NoValidClass, ShapeMismatch
from .tensorio import IGNORE_LABEL


@dataclass
class ConfusionTally:
    """Per-label TP/FP/FN pixel counts over labels 0..C (0 is background)."""

    tp: np.ndarray  # (C+1,) int64
    fp: np.ndarray
    fn: np.ndarray

    @classmethod
    def zeros(cls, num_classes):
        n = num_classes + 1
        return cls(np.zeros(n, np.int64), np.zeros(n, np.int64), np.zeros(n, np.int64))

    @property
    def num_labels(self):
        return len(self.tp)

    def __add__(self, other):
        if self.num_labels != other.num_labels:
            raise ShapeMismatch("cannot merge tallies over different label counts")
        return ConfusionTally(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn)


def accumulate(tally: ConfusionTally, pred: PseudoMask, gt: PseudoMask) -> ConfusionTally:
    """Add one sample's pixel counts; ground-truth pixels labeled 255 are skipped."""
    p = pred.labels
    g = gt.labels
    if p.shape != g.shape:
        raise ShapeMismatch(f"prediction shape {p.shape} does not match ground truth {g.shape}")
    n = tally.num_labels
    keep = g != IGNORE_LABEL
    p = p[keep].ravel()
    g = g[keep].ravel()
    if (p >= n).any() or (g >= n).any() or (p < 0).any() or (g < 0).any():
        raise ShapeMismatch(f"labels exceed the tally's {n} classes")
    matrix = np.bincount(n * g + p, minlength=n * n).reshape(n, n)  # rows gt, cols pred
    diag = np.diag(matrix)
    tally.tp += diag
    tally.fp += matrix.sum(axis=0) - diag
    tally.fn += matrix.sum(axis=1) - diag
    return tally


def miou(tally: ConfusionTally):
    """Mean IoU over classes that appear at all; per-class IoU uses NaN for 0/0."""
    denom = tally.tp + tally.fp + tally.fn
    per_class = np.full(tally.num_labels, np.nan)
    valid = denom > 0
    if not valid.any():
        raise NoValidClass("every class has zero TP, FP, and FN")
    per_class[valid] = tally.tp[valid] / denom[valid]
    return float(per_class[valid].mean()), per_class


def confusion_ratio(tally: ConfusionTally):
    """Per-class FP/TP plus the average over finite entries.

    A class with zero TP but positive FP reports +inf so pathological classes
    stay visible; a class with neither reports NaN and is excluded.
    """
    per_class = np.full(tally.num_labels, np.nan)
    has_tp = tally.tp > 0
    per_class[has_tp] = tally.fp[has_tp] / tally.tp[has_tp]
    pathological = (tally.tp == 0) & (tally.fp > 0)
    per_class[pathological] = np.inf
    finite = np.isfinite(per_class)
    average = float(per_class[finite].mean()) if finite.any() else float("nan")
    return per_class, average


def precision_recall(tally: ConfusionTally):
    """Per-class precision and recall arrays (NaN where undefined) plus means."""
    prec = np.full(tally.num_labels, np.nan)
    rec = np.full(tally.num_labels, np.nan)
    pd = tally.tp + tally.fp
    rd = tally.tp + tally.fn
    prec[pd > 0] = tally.tp[pd > 0] / pd[pd > 0]
    rec[rd > 0] = tally.tp[rd > 0] / rd[rd > 0]
    mean_p = float(np.nanmean(prec)) if np.isfinite(prec).any() else float("nan")
    mean_r = float(np.nanmean(rec)) if np.isfinite(rec).any() else float("nan")
    return prec, rec, mean_p, mean_r


def split_by_cooccurrence(manifest):
    """Sample ids with exactly one image label vs two or more."""
    single = [s.id for s in manifest.samples if len(s.image_labels) == 1]
    multi = [s.id for s in manifest.samples if len(s.image_labels) >= 2]
    return single, multi


def _fmt(x):
    if x is None or (isinstance(x, float) and np.isnan(x)):
        return "-"
    if isinstance(x, float) and np.isinf(x):
        return "inf"
    return f"{x:.4f}"


def report_dict(tally: ConfusionTally, class_names) -> dict:
    """Metric report as a JSON-ready dictionary."""
    mean_iou, per_iou = miou(tally)
    per_cr, mean_cr = confusion_ratio(tally)
    prec, rec, mean_p, mean_r = precision_recall(tally)
    names = ["background"] + list(class_names)
    fg = slice(1, None)

    def listify(arr):
        return [None if np.isnan(v) else ("inf" if np.isinf(v) else float(v)) for v in arr]

    fg_iou = per_iou[fg][~np.isnan(per_iou[fg])]
    fg_cr = per_cr[fg][np.isfinite(per_cr[fg])]
    return {
        "classes": names,
        "iou": listify(per_iou),
        "confusion_ratio": listify(per_cr),
        "precision": listify(prec),
        "recall": listify(rec),
        "miou": mean_iou,
        "miou_foreground": float(fg_iou.mean()) if len(fg_iou) else None,
        "avg_confusion_ratio": None if np.isnan(mean_cr) else mean_cr,
        "avg_confusion_ratio_foreground": float(fg_cr.mean()) if len(fg_cr) else None,
        "mean_precision": mean_p,
        "mean_recall": mean_r,
    }


def format_table(tally: ConfusionTally, class_names, title="metrics") -> str:
    """Aligned per-class rows plus a summary row."""
    mean_iou, per_iou = miou(tally)
    per_cr, mean_cr = confusion_ratio(tally)
    prec, rec, mean_p, mean_r = precision_recall(tally)
    names = ["background"] + list(class_names)
    width = max(len(n) for n in names + ["class", "mean"])
    head = f"{'class':<{width}}  {'iou':>8}  {'cr':>8}  {'prec':>8}  {'recall':>8}"
    lines = [f"[{title}]", head, "-" * len(head)]
    for i, name in enumerate(names):
        lines.append(
            f"{name:<{width}}  {_fmt(per_iou[i]):>8}  {_fmt(per_cr[i]):>8}  "
            f"{_fmt(prec[i]):>8}  {_fmt(rec[i]):>8}"
        )
    lines.append("-" * len(head))
    lines.append(
        f"{'mean':<{width}}  {_fmt(mean_iou):>8}  {_fmt(mean_cr):>8}  "
        f"{_fmt(mean_p):>8}  {_fmt(mean_r):>8}"
    )
    return "\n".join(lines)
