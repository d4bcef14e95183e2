"""Confusion-matrix bookkeeping and the derived evaluation metrics.

Conventions, fixed here and relied on by the reports:
  - entry (i, j) counts pixels with ground truth i predicted j;
  - macro averages run over classes present in the ground truth;
  - per-class precision is 0 when the class is never predicted;
  - macro sums add their terms in sorted value order, so reordering the
    vocabulary cannot change any aggregate bit.
The textbook overall accuracy (trace / n) is reported as `oa`; the
per-class TP+TN form, which only coincides with it for two classes, is
kept alongside as `oa_literal`.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .losses import IGNORE_ID


def confusion(pred: np.ndarray, gt: np.ndarray, num_classes: int,
              ignore_id: int = IGNORE_ID) -> np.ndarray:
    """Exact (K, K) integer counts; ignored pixels are excluded entirely."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"confusion: raster shapes differ: {pred.shape} vs {gt.shape}")
    valid = gt != ignore_id
    p = pred[valid]
    g = gt[valid]
    for name, arr in (("pred", p), ("gt", g)):
        if arr.size and (arr.min() < 0 or arr.max() >= num_classes):
            raise ValueError(f"confusion: {name} ids outside [0, {num_classes})")
    counts = np.bincount(g.astype(np.int64) * num_classes + p.astype(np.int64),
                         minlength=num_classes * num_classes)
    return counts.reshape(num_classes, num_classes)


def _sorted_mean(values: np.ndarray) -> float:
    if values.size == 0:
        return float("nan")
    return float(np.sort(values).sum() / values.size)


@dataclass
class MetricsResult:
    n: int
    oa: float
    oa_literal: float
    kappa: float
    miou: float
    macro_precision: float
    macro_recall: float
    macro_f1: float
    present: np.ndarray = field(repr=False)       # classes with gt pixels
    iou: np.ndarray = field(repr=False)           # per class, NaN when absent
    precision: np.ndarray = field(repr=False)
    recall: np.ndarray = field(repr=False)
    f1: np.ndarray = field(repr=False)


def metrics(cm: np.ndarray) -> MetricsResult:
    cm = np.asarray(cm, dtype=np.int64)
    k = cm.shape[0]
    n = int(cm.sum())
    if n == 0:
        raise ValueError("metrics: confusion matrix is empty (no counted pixels)")
    tp = np.diag(cm)
    gt_count = cm.sum(axis=1)     # a_m
    pred_count = cm.sum(axis=0)   # b_m
    fp = pred_count - tp
    fn = gt_count - tp
    tn = n - tp - fp - fn

    oa = float(tp.sum() / n)
    oa_literal = float((tp.sum() + tn.sum()) / (k * n))
    p_e = float((gt_count * pred_count).sum() / (n * n))
    if p_e >= 1.0:
        kappa = 0.0
    else:
        kappa = float((oa - p_e) / (1.0 - p_e))

    present = gt_count > 0
    iou = np.full(k, np.nan)
    precision = np.full(k, np.nan)
    recall = np.full(k, np.nan)
    f1 = np.full(k, np.nan)
    for c in np.nonzero(present)[0]:
        iou[c] = tp[c] / (tp[c] + fp[c] + fn[c])
        precision[c] = tp[c] / (tp[c] + fp[c]) if tp[c] + fp[c] > 0 else 0.0
        recall[c] = tp[c] / gt_count[c]
        pr = precision[c] + recall[c]
        f1[c] = 2.0 * precision[c] * recall[c] / pr if pr > 0 else 0.0

    sel = np.nonzero(present)[0]
    return MetricsResult(
        n=n, oa=oa, oa_literal=oa_literal, kappa=kappa,
        miou=_sorted_mean(iou[sel]),
        macro_precision=_sorted_mean(precision[sel]),
        macro_recall=_sorted_mean(recall[sel]),
        macro_f1=_sorted_mean(f1[sel]),
        present=present, iou=iou, precision=precision, recall=recall, f1=f1)


def _fmt(x: float) -> str:
    return repr(float(x))


def _key_name(name: str) -> str:
    return name.replace(" ", "_")


def render_kv(result: MetricsResult, class_names: list[str]) -> str:
    """Machine-readable report: one metric per line, tab separated."""
    lines = [
        f"oa\t{_fmt(result.oa)}",
        f"oa_literal_eq12\t{_fmt(result.oa_literal)}",
        f"kappa\t{_fmt(result.kappa)}",
        f"miou\t{_fmt(result.miou)}",
        f"macro_precision\t{_fmt(result.macro_precision)}",
        f"macro_recall\t{_fmt(result.macro_recall)}",
        f"macro_f1\t{_fmt(result.macro_f1)}",
    ]
    for i, name in enumerate(class_names):
        lines.append(f"per_class_iou_{_key_name(name)}\t{_fmt(result.iou[i])}")
    return "\n".join(lines) + "\n"


def render_table(result: MetricsResult, class_names: list[str]) -> str:
    """Human-readable summary table."""
    rows = [
        f"pixels counted      {result.n}",
        f"overall accuracy    {result.oa:.4f}",
        f"kappa               {result.kappa:.4f}",
        f"mean IoU            {result.miou:.4f}",
        f"macro precision     {result.macro_precision:.4f}",
        f"macro recall        {result.macro_recall:.4f}",
        f"macro F1            {result.macro_f1:.4f}",
        "",
        f"{'class':<16}{'iou':>8}{'prec':>8}{'recall':>8}{'f1':>8}",
    ]
    for i, name in enumerate(class_names):
        if result.present[i]:
            rows.append(f"{name:<16}{result.iou[i]:>8.4f}{result.precision[i]:>8.4f}"
                        f"{result.recall[i]:>8.4f}{result.f1[i]:>8.4f}")
        else:
            rows.append(f"{name:<16}{'-':>8}{'-':>8}{'-':>8}{'-':>8}")
    return "\n".join(rows) + "\n"
