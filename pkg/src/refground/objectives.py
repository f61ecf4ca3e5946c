"""Training objectives: the four task losses and the weighted total."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import DegenerateBothEmpty, MissingBoxTarget, ShapeMismatch
from .tensor import Tensor


@dataclass(frozen=True)
class BoundingBox:
    cx: float
    cy: float
    w: float
    h: float

    def corners(self) -> tuple:
        x1, y1 = self.cx - self.w / 2, self.cy - self.h / 2
        x2, y2 = self.cx + self.w / 2, self.cy + self.h / 2
        return tuple(min(max(v, 0.0), 1.0) for v in (x1, y1, x2, y2))

    def as_array(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.w, self.h])


def _box(b) -> BoundingBox:
    return b if isinstance(b, BoundingBox) else BoundingBox(*map(float, b))


def iou(a, b) -> float:
    ax1, ay1, ax2, ay2 = _box(a).corners()
    bx1, by1, bx2, by2 = _box(b).corners()
    inter = max(0.0, min(ax2, bx2) - max(ax1, bx1)) * max(0.0, min(ay2, by2) - max(ay1, by1))
    union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter
    if union <= 0:
        raise DegenerateBothEmpty("both boxes have zero area")
    return inter / union


def giou(a, b) -> float:
    """Generalized IoU of two (cx, cy, w, h) boxes, in (-1, 1]."""
    ax1, ay1, ax2, ay2 = _box(a).corners()
    bx1, by1, bx2, by2 = _box(b).corners()
    inter = max(0.0, min(ax2, bx2) - max(ax1, bx1)) * max(0.0, min(ay2, by2) - max(ay1, by1))
    union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter
    if union <= 0:
        raise DegenerateBothEmpty("both boxes have zero area")
    hull = (max(ax2, bx2) - min(ax1, bx1)) * (max(ay2, by2) - min(ay1, by1))
    return inter / union - (hull - union) / hull


def giou_tensor(pred: Tensor, target: np.ndarray) -> Tensor:
    """Row-wise GIoU between predicted (n, 4) boxes and constant targets."""
    def col(x, i):
        return x[:, i] if isinstance(x, Tensor) else T.constant(x[:, i])

    def corners(x):
        cx, cy, w, h = (col(x, i) for i in range(4))
        return cx - w * 0.5, cy - h * 0.5, cx + w * 0.5, cy + h * 0.5

    ax1, ay1, ax2, ay2 = corners(pred)
    bx1, by1, bx2, by2 = corners(np.asarray(target, dtype=np.float64))
    iw = T.clamp_min(T.minimum(ax2, bx2) - T.maximum(ax1, bx1), 0.0)
    ih = T.clamp_min(T.minimum(ay2, by2) - T.maximum(ay1, by1), 0.0)
    inter = iw * ih
    union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter
    hull = (T.maximum(ax2, bx2) - T.minimum(ax1, bx1)) * (T.maximum(ay2, by2) - T.minimum(ay1, by1))
    return inter / union - (hull - union) / hull


@dataclass
class Predictions:
    bic: Tensor  # (B, 2) logits
    mlc: Tensor  # (B, C) logits
    img: Tensor  # (B, 4) sigmoid box
    tmg: Tensor  # (B, L, 2) logits


@dataclass
class Targets:
    labels: np.ndarray  # (B,) 0 authentic / 1 manipulated
    classes: np.ndarray  # (B, C) 0/1
    boxes: np.ndarray  # (B, 4); NaN rows where no box
    token_mask: np.ndarray  # (B, L) bool
    token_valid: np.ndarray  # (B, L) bool


@dataclass
class LossBundle:
    l_bic: Tensor
    l_mlc: Tensor
    l_img: Tensor
    l_tmg: Tensor
    l_vrc: Tensor
    l_rgas: Tensor
    l_distill: Tensor
    alpha: float = 0.25
    beta: float = 1.0
    tau: float = 2.0

    def components(self) -> dict:
        names = ("l_bic", "l_mlc", "l_img", "l_tmg", "l_vrc", "l_rgas", "l_distill")
        return {n: float(getattr(self, n).data) for n in names}


def zero_loss() -> Tensor:
    return T.constant(0.0)


def _pick(logp: Tensor, index: np.ndarray) -> Tensor:
    """Gather logp[..., index] along the last (class) axis."""
    lead = np.indices(index.shape)
    return logp[tuple(lead) + (index,)]


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    return T.neg(T.mean_pool(_pick(T.log_softmax(logits, -1), np.asarray(labels, dtype=np.int64))))


def binary_cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean BCE-with-logits, as a two-way softmax over (0, z)."""
    pair = T.concat([T.reshape(T.scale(logits, 0.0), logits.shape + (1,)), T.reshape(logits, logits.shape + (1,))], -1)
    return T.neg(T.mean_pool(_pick(T.log_softmax(pair, -1), np.asarray(targets, dtype=np.int64))))


def box_loss(pred: Tensor, target: np.ndarray, lambda_l1: float, lambda_giou: float) -> Tensor:
    """lambda_l1 * L1 + lambda_giou * (1 - GIoU), averaged over boxes."""
    n = pred.shape[0]
    l1 = T.tsum(T.absolute(T.sub(pred, T.constant(target)))) * (1.0 / n)
    g = T.mean_pool(giou_tensor(pred, target))
    return l1 * lambda_l1 + (1.0 - g) * lambda_giou


def token_loss(logits: Tensor, token_mask: np.ndarray, valid: np.ndarray, w_pos: float) -> Tensor:
    """Class-weighted token cross-entropy, summed with weights and divided by the valid-token count."""
    valid = np.asarray(valid, bool)
    count = int(valid.sum())
    if count == 0:
        return T.scale(T.tsum(logits), 0.0)
    labels = np.asarray(token_mask, dtype=np.int64)
    nll = T.neg(_pick(T.log_softmax(logits, -1), labels))
    w = np.where(valid, np.where(labels == 1, w_pos, 1.0), 0.0) / count
    return T.tsum(T.mul(nll, T.constant(w)))


def image_manipulated(classes: np.ndarray) -> np.ndarray:
    return np.asarray(classes)[:, :2].astype(bool).any(axis=1)


def task_losses(pred: Predictions, tgt: Targets, lambda_l1: float = 5.0, lambda_giou: float = 2.0, w_pos: float = 3.0):
    """Returns ``(l_bic, l_mlc, l_img, l_tmg)``."""
    B = pred.bic.shape[0]
    if pred.mlc.shape != tgt.classes.shape or pred.img.shape != (B, 4) or pred.tmg.shape[:2] != tgt.token_mask.shape:
        raise ShapeMismatch("prediction and target shapes disagree")
    l_bic = cross_entropy(pred.bic, tgt.labels)
    l_mlc = binary_cross_entropy(pred.mlc, tgt.classes)
    has_img = image_manipulated(tgt.classes)
    if has_img.any():
        boxes = np.asarray(tgt.boxes, dtype=np.float64)[has_img]
        if not np.isfinite(boxes).all():
            raise MissingBoxTarget("image-manipulated sample lacks a box target")
        rows = np.nonzero(has_img)[0]
        l_img = box_loss(pred.img[rows], boxes, lambda_l1, lambda_giou)
    else:
        l_img = T.scale(T.tsum(pred.img), 0.0)
    l_tmg = token_loss(pred.tmg, tgt.token_mask, tgt.token_valid, w_pos)
    return l_bic, l_mlc, l_img, l_tmg


def total_loss(bundle: LossBundle) -> Tensor:
    """L_task + alpha * L_vrc + L_rgas + beta * L_distill."""
    task = bundle.l_bic + bundle.l_mlc + bundle.l_img + bundle.l_tmg
    return task + bundle.l_vrc * bundle.alpha + bundle.l_rgas + bundle.l_distill * bundle.beta
