"""Segmentation metrics: confusion counts, threshold metrics and a
rank-statistic AUC (tie-corrected Mann-Whitney, equal to trapezoidal ROC
integration over all distinct thresholds).

0/0 ratios are reported as 1.0 together with a degenerate flag, never as
silent NaN.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata


@dataclass
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    @property
    def total(self):
        return self.tp + self.fp + self.tn + self.fn


def _require_binary(name, arr):
    if not np.all((arr == 0) | (arr == 1)):
        raise ValueError(f"{name} must be binary 0/1")


def confusion(pred_bin, gt, fov=None):
    """Pixel confusion counts, restricted to fov-true pixels when given."""
    pred_bin = np.asarray(pred_bin)
    gt = np.asarray(gt)
    if pred_bin.shape != gt.shape:
        raise ValueError(f"confusion: shape mismatch {pred_bin.shape} vs {gt.shape}")
    _require_binary("prediction", pred_bin)
    _require_binary("ground truth", gt)
    if fov is not None:
        keep = np.asarray(fov).astype(bool).reshape(-1)
        p = pred_bin.reshape(-1)[keep]
        g = gt.reshape(-1)[keep]
    else:
        p = pred_bin.reshape(-1)
        g = gt.reshape(-1)
    tp = int(np.sum((p == 1) & (g == 1)))
    fp = int(np.sum((p == 1) & (g == 0)))
    tn = int(np.sum((p == 0) & (g == 0)))
    fn = int(np.sum((p == 0) & (g == 1)))
    return ConfusionCounts(tp=tp, fp=fp, tn=tn, fn=fn)


def _ratio(num, den, flags, name):
    if den == 0:
        flags.append(name)
        return 1.0
    return num / den


def scalar_metrics(c: ConfusionCounts):
    """sens/spec/acc/f1/iou from counts; 0/0 -> 1.0 plus a flag entry."""
    flags = []
    out = {
        "sensitivity": _ratio(c.tp, c.tp + c.fn, flags, "sensitivity"),
        "specificity": _ratio(c.tn, c.tn + c.fp, flags, "specificity"),
        "accuracy": _ratio(c.tp + c.tn, c.total, flags, "accuracy"),
        "f1": _ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn, flags, "f1"),
        "iou": _ratio(c.tp, c.tp + c.fp + c.fn, flags, "iou"),
    }
    return out, flags


def auc(probs, gt, fov=None):
    """Area under the ROC curve by tie-corrected rank statistic.

    Returns None when the ground truth has a single class (flagged
    undefined, never silently 0).
    """
    probs = np.asarray(probs, dtype=np.float64).reshape(-1)
    gt = np.asarray(gt).reshape(-1)
    if probs.shape != gt.shape:
        raise ValueError(f"auc: shape mismatch {probs.shape} vs {gt.shape}")
    _require_binary("ground truth", gt)
    if fov is not None:
        keep = np.asarray(fov).astype(bool).reshape(-1)
        probs, gt = probs[keep], gt[keep]
    n_pos = int(np.sum(gt == 1))
    n_neg = gt.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = rankdata(probs)  # average ranks handle ties (counted half)
    rank_sum = float(np.sum(ranks[gt == 1]))
    u = rank_sum - n_pos * (n_pos + 1) / 2.0
    return u / (n_pos * n_neg)


@dataclass
class EvalReport:
    """Per-image and aggregate metrics for one evaluation run."""

    threshold: float
    n_images: int
    per_image: list = field(default_factory=list)
    degenerate_flags: list = field(default_factory=list)
    sensitivity: float = 0.0
    specificity: float = 0.0
    accuracy: float = 0.0
    auc: float = 0.0
    f1: float = 0.0
    iou: float = 0.0
    pooled: dict = field(default_factory=dict)

    def to_json(self, indent=2):
        return json.dumps({
            "sensitivity": self.sensitivity,
            "specificity": self.specificity,
            "accuracy": self.accuracy,
            "auc": self.auc,
            "f1": self.f1,
            "iou": self.iou,
            "threshold": self.threshold,
            "n_images": self.n_images,
            "per_image": self.per_image,
            "degenerate_flags": self.degenerate_flags,
            "pooled": self.pooled,
        }, indent=indent)


def evaluate_images(prob_maps, gts, fovs=None, threshold=0.5):
    """Score a set of images.

    Aggregates both ways: the headline numbers are per-image means; the
    `pooled` dict recomputes everything from pooled global counts (and a
    pooled AUC over all pixels).
    """
    if fovs is None:
        fovs = [None] * len(prob_maps)
    per_image = []
    all_flags = []
    pooled_counts = ConfusionCounts()
    pooled_probs, pooled_gt = [], []
    for i, (pm, gt, fov) in enumerate(zip(prob_maps, gts, fovs)):
        pred = (np.asarray(pm) > threshold).astype(np.uint8)
        c = confusion(pred, gt, fov)
        m, flags = scalar_metrics(c)
        a = auc(pm, gt, fov)
        if a is None:
            flags.append("auc")
            a = 1.0
        m["auc"] = a
        per_image.append(m)
        all_flags.extend(f"image{i}:{name}" for name in flags)
        pooled_counts.tp += c.tp
        pooled_counts.fp += c.fp
        pooled_counts.tn += c.tn
        pooled_counts.fn += c.fn
        keep = (np.asarray(fov).astype(bool).reshape(-1) if fov is not None
                else np.ones(np.asarray(gt).size, dtype=bool))
        pooled_probs.append(np.asarray(pm, dtype=np.float64).reshape(-1)[keep])
        pooled_gt.append(np.asarray(gt).reshape(-1)[keep])

    pooled_m, pooled_flags = scalar_metrics(pooled_counts)
    pooled_auc = auc(np.concatenate(pooled_probs), np.concatenate(pooled_gt))
    if pooled_auc is None:
        pooled_flags.append("auc")
        pooled_auc = 1.0
    pooled_m["auc"] = pooled_auc
    all_flags.extend(f"pooled:{name}" for name in pooled_flags)

    report = EvalReport(threshold=threshold, n_images=len(per_image),
                        per_image=per_image, degenerate_flags=all_flags,
                        pooled=pooled_m)
    for key in ("sensitivity", "specificity", "accuracy", "auc", "f1", "iou"):
        setattr(report, key, float(np.mean([m[key] for m in per_image])))
    return report
