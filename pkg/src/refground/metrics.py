"""Evaluation metrics for detection, multi-label classification and grounding."""

from __future__ import annotations

import json
import warnings
from typing import NamedTuple

import numpy as np

from .errors import ClassWithoutPositives, EmptyEvaluationSet, SingleClassInput
from .objectives import iou


class PRF(NamedTuple):
    precision: float
    recall: float
    f1: float
    undefined: frozenset = frozenset()  # names of ratios that hit 0/0 and were set to 0


def auc_score(scores, labels) -> float:
    """Mann-Whitney AUC; a tie between a positive and a negative counts one half."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    pos, neg = scores[labels], np.sort(scores[~labels])
    if pos.size == 0 or neg.size == 0:
        raise SingleClassInput("AUC needs both classes")
    below = np.searchsorted(neg, pos, side="left")
    ties = np.searchsorted(neg, pos, side="right") - below
    wins2 = int((2 * below + ties).sum())
    return wins2 / (2.0 * pos.size * neg.size)


def roc_curve(scores, labels):
    """(fpr, tpr, thresholds) with one point per distinct score, starting at (0, 0)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    order = np.argsort(-scores, kind="stable")
    s, y = scores[order], labels[order]
    last = np.r_[np.nonzero(np.diff(s))[0], s.size - 1]
    tp = np.cumsum(y)[last]
    fp = np.cumsum(~y)[last]
    tpr = np.r_[0.0, tp / max(y.sum(), 1)]
    fpr = np.r_[0.0, fp / max((~y).sum(), 1)]
    return fpr, tpr, np.r_[np.inf, s[last]]


def equal_error_rate(scores, labels) -> float:
    fpr, tpr, _ = roc_curve(scores, labels)
    fnr = 1.0 - tpr
    gap = fpr - fnr
    i = int(np.argmax(gap >= 0))
    if i == 0:
        return float(fpr[0])
    g0, g1 = gap[i - 1], gap[i]
    t = -g0 / (g1 - g0)
    return float(fpr[i - 1] + t * (fpr[i] - fpr[i - 1]))


def rank_metrics(scores, labels) -> tuple:
    """(AUC, EER) for manipulation scores (higher = more likely manipulated)."""
    labels = np.asarray(labels).astype(bool)
    if labels.all() or not labels.any():
        raise SingleClassInput("rank metrics need both authentic and manipulated samples")
    return auc_score(scores, labels), equal_error_rate(scores, labels)


def accuracy(pred, truth) -> float:
    pred, truth = np.asarray(pred), np.asarray(truth)
    if pred.size == 0:
        raise EmptyEvaluationSet("no samples to score")
    return float((pred == truth).mean())


def grounding_metrics(pred_boxes, true_boxes) -> tuple:
    """(mean IoU, fraction IoU >= 0.5, fraction IoU >= 0.75) over paired boxes."""
    if len(pred_boxes) == 0:
        raise EmptyEvaluationSet("no manipulated-image samples to ground")
    ious = np.array([iou(p, t) for p, t in zip(pred_boxes, true_boxes)])
    return float(ious.mean()), float((ious >= 0.5).mean()), float((ious >= 0.75).mean())


def _prf(tp: int, fp: int, fn: int) -> PRF:
    undefined = set()
    if tp + fp:
        precision = tp / (tp + fp)
    else:
        precision = 0.0
        undefined.add("precision")
    if tp + fn:
        recall = tp / (tp + fn)
    else:
        recall = 0.0
        undefined.add("recall")
    if precision + recall:
        f1 = 2 * precision * recall / (precision + recall)
    else:
        f1 = 0.0
        undefined.add("f1")
    return PRF(precision, recall, f1, frozenset(undefined))


def token_metrics(pred_mask, true_mask, valid=None) -> PRF:
    """Precision / recall / F1 of the manipulated-token class over valid positions."""
    pred = np.asarray(pred_mask, bool)
    true = np.asarray(true_mask, bool)
    valid = np.ones_like(true) if valid is None else np.asarray(valid, bool)
    tp = int((pred & true & valid).sum())
    fp = int((pred & ~true & valid).sum())
    fn = int((~pred & true & valid).sum())
    return _prf(tp, fp, fn)


def average_precision(scores, labels) -> float:
    """Mean of the precision at each positive's rank (ties keep input order)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    order = np.argsort(-scores, kind="stable")
    hits = labels[order]
    if not hits.any():
        raise SingleClassInput("class has no positives")
    ranks = np.arange(1, hits.size + 1)
    return float((np.cumsum(hits)[hits] / ranks[hits]).mean())


def multilabel_metrics(scores, labels, threshold: float = 0.5) -> tuple:
    """(mAP, CF1, OF1) for (B, C) class probabilities."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    aps = []
    for c in range(labels.shape[1]):
        if not labels[:, c].any():
            warnings.warn(f"class {c} has no positives; skipped in mAP", ClassWithoutPositives, stacklevel=2)
            continue
        aps.append(average_precision(scores[:, c], labels[:, c]))
    pred = scores >= threshold
    per_class = []
    for c in range(labels.shape[1]):
        tp = int((pred[:, c] & labels[:, c]).sum())
        fp = int((pred[:, c] & ~labels[:, c]).sum())
        fn = int((~pred[:, c] & labels[:, c]).sum())
        per_class.append(_prf(tp, fp, fn).f1)
    tp = int((pred & labels).sum())
    fp = int((pred & ~labels).sum())
    fn = int((~pred & labels).sum())
    map_ = float(np.mean(aps)) if aps else 0.0
    return map_, float(np.mean(per_class)), _prf(tp, fp, fn).f1


def format_report(metrics: dict) -> str:
    """One ``key<TAB>value`` line per metric, keys sorted."""
    lines = []
    for key in sorted(metrics):
        value = metrics[key]
        lines.append(f"{key}\t{value:.6f}" if isinstance(value, float) else f"{key}\t{value}")
    return "\n".join(lines) + "\n"


def report_json(metrics: dict) -> str:
    return json.dumps(metrics, indent=2, sort_keys=True) + "\n"
