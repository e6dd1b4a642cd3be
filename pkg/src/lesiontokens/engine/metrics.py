"""Overlap metrics for masks and threshold/rank metrics for binary classification."""

from __future__ import annotations

import numpy as np
from scipy.stats import rankdata

from ..diffcore import DimensionError


def _ratio(num: int, den: int) -> float:
    # empty denominator: both relevant sets are empty, which counts as agreement
    return 1.0 if den == 0 else num / den


def confusion_counts(pred, gt) -> tuple[int, int, int, int]:
    pred = np.asarray(pred).astype(bool)
    gt = np.asarray(gt).astype(bool)
    if pred.shape != gt.shape:
        raise DimensionError(f"prediction {pred.shape} vs ground truth {gt.shape}")
    tp = int(np.sum(pred & gt))
    fp = int(np.sum(pred & ~gt))
    fn = int(np.sum(~pred & gt))
    tn = int(np.sum(~pred & ~gt))
    return tp, fp, fn, tn


def segmentation_metrics(pred, gt) -> dict[str, float]:
    tp, fp, fn, tn = confusion_counts(pred, gt)
    return {
        "JA": _ratio(tp, tp + fp + fn),
        "DI": _ratio(2 * tp, 2 * tp + fp + fn),
        "AC": (tp + tn) / (tp + fp + fn + tn),
        "SE": 1.0 if tp + fn == 0 and fp == 0 else (0.0 if tp + fn == 0 else tp / (tp + fn)),
        "SP": 1.0 if tn + fp == 0 and fn == 0 else (0.0 if tn + fp == 0 else tn / (tn + fp)),
    }


def auc_score(scores, labels) -> float:
    """Area under the ROC curve as the Mann-Whitney rank statistic (ties count half)."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels).astype(bool)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC is undefined with a single class present")
    ranks = rankdata(scores)
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def _threshold_metrics(scores, labels, threshold: float) -> dict[str, float]:
    tp, fp, fn, tn = confusion_counts(np.asarray(scores, dtype=float) >= threshold, labels)
    return {
        "AC": (tp + tn) / (tp + fp + fn + tn),
        "SE": tp / (tp + fn) if tp + fn else 0.0,
        "SP": tn / (tn + fp) if tn + fp else 0.0,
    }


def classification_metrics(scores, labels, threshold: float = 0.5) -> dict[str, float]:
    """AC/SE/SP at ``threshold`` plus AUC; raises when only one class is present."""
    labels = np.asarray(labels).astype(bool)
    out = _threshold_metrics(scores, labels, threshold)
    out["AUC"] = auc_score(scores, labels)
    return out


def summarize(seg_preds, seg_gts, class_probs, class_labels, reference_class: int = 0) -> dict:
    """Build the metrics report: mean per-image segmentation scores and
    one-vs-rest classification scores for every class except the reference one."""
    report: dict = {"segmentation": {}, "classification": {}}
    if seg_gts:
        per_image = [segmentation_metrics(p, g) for p, g in zip(seg_preds, seg_gts)]
        for key in ("JA", "DI", "AC", "SE", "SP"):
            report["segmentation"][key] = float(np.mean([m[key] for m in per_image]))
        report["segmentation"]["count"] = len(per_image)
    if class_labels is not None and len(class_labels):
        probs = np.asarray(class_probs, dtype=float)
        labels = np.asarray(class_labels)
        report["classification"]["AC"] = float(np.mean(probs.argmax(axis=1) == labels))
        report["classification"]["count"] = int(labels.size)
        subtasks = {}
        for c in range(probs.shape[1]):
            if c == reference_class:
                continue
            positives = labels == c
            entry = _threshold_metrics(probs[:, c], positives, 0.5)
            try:
                entry["AUC"] = auc_score(probs[:, c], positives)
            except ValueError:
                entry["AUC"] = None
            subtasks[f"class_{c}"] = entry
        report["classification"]["subtasks"] = subtasks
    return report
