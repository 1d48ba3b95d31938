"""Losses. Each returns ``(value, gradient w.r.t. the prediction)``."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

PRED_CLAMP = 1e-7


def bce_heatmap_loss(pred, target):
    """Mean binary cross-entropy between predicted and target confidence maps."""
    pred = np.asarray(pred)
    target = np.asarray(target)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs target {target.shape}")
    if np.any(target < 0) or np.any(target > 1):
        raise ValueError("targets must lie in [0, 1]")
    p = np.clip(pred.astype(np.float64), PRED_CLAMP, 1 - PRED_CLAMP)
    t = target.astype(np.float64)
    loss = -np.mean(t * np.log(p) + (1 - t) * np.log1p(-p))
    grad = (p - t) / (p * (1 - p)) / p.size
    return float(loss), grad.astype(pred.dtype)


def _log_softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def softmax_ce_loss(logits, labels):
    """Mean cross-entropy; ``labels`` are class indices or a [N, K] soft distribution."""
    logits = np.asarray(logits)
    x = logits.astype(np.float64)
    labels = np.asarray(labels)
    if labels.ndim == 1:
        target = np.zeros_like(x)
        target[np.arange(x.shape[0]), labels.astype(np.int64)] = 1.0
    else:
        if labels.shape != x.shape:
            raise ValueError(f"shape mismatch: logits {x.shape} vs targets {labels.shape}")
        target = labels.astype(np.float64)
    logp = _log_softmax(x)
    n = x.shape[0]
    loss = -(target * logp).sum() / n
    grad = (np.exp(logp) - target) / n
    return float(loss), grad.astype(logits.dtype)


def softmax(logits):
    return np.exp(_log_softmax(np.asarray(logits, dtype=np.float64)))


@dataclass(frozen=True)
class DistillSpec:
    gt_weight: float = 0.25
    match_features: bool = False
    feature_weight: float = 0.1

    def __post_init__(self):
        if not 0.0 <= self.gt_weight <= 1.0:
            raise ValueError("gt_weight must lie in [0, 1]")

    @property
    def soft_weight(self) -> float:
        return 1.0 - self.gt_weight


def distill_loss(student_out, teacher_out, target, spec: DistillSpec, kind="heatmap"):
    """Blend of the supervised loss and the loss against the (detached) teacher output.

    For ``kind="logits"`` the teacher output is turned into a softmax distribution.
    """
    student_out = np.asarray(student_out)
    teacher_out = np.asarray(teacher_out)
    if student_out.shape != teacher_out.shape:
        raise ValueError(f"student {student_out.shape} and teacher {teacher_out.shape} outputs differ")
    if kind == "heatmap":
        gt_loss, gt_grad = bce_heatmap_loss(student_out, target)
        soft_loss, soft_grad = bce_heatmap_loss(student_out, teacher_out)
    elif kind == "logits":
        gt_loss, gt_grad = softmax_ce_loss(student_out, target)
        soft_loss, soft_grad = softmax_ce_loss(student_out, softmax(teacher_out))
    else:
        raise ValueError(f"unknown output kind {kind!r}")
    w = spec.gt_weight
    loss = w * gt_loss + (1 - w) * soft_loss
    grad = w * gt_grad + (1 - w) * soft_grad
    return float(loss), grad.astype(student_out.dtype)


def feature_match_loss(student_feat, teacher_feat, weight=0.1):
    d = student_feat.astype(np.float64) - teacher_feat.astype(np.float64)
    loss = weight * np.mean(d * d)
    grad = weight * 2 * d / d.size
    return float(loss), grad.astype(student_feat.dtype)
