"""Training-objective formulas as verifiable pure functions.

Three terms: weighted binary cross-entropy on the segmentation logits, a
soft intersection-over-union relaxation on the probabilities, and an L1
penalty on the affinity fields restricted to foreground pixels.  The total
is their plain sum.  All math runs in float64 so the values can be pinned
against scalar-loop oracles.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .affinity import AffinityPair
from .errors import ShapeError


@dataclass(frozen=True)
class LossBreakdown:
    wbce: float
    iou: float
    af: float
    total: float


def _softplus(z: np.ndarray) -> np.ndarray:
    # log(1 + exp(z)) without overflow for large |z|
    return np.log1p(np.exp(-np.abs(z))) + np.maximum(z, 0.0)


def default_foreground_weight(target: np.ndarray) -> float:
    """Background/foreground pixel ratio of the target, the usual class
    rebalancing weight; 1.0 when the target has no foreground."""
    t = np.asarray(target)
    n_fg = float((t > 0.5).sum())
    if n_fg == 0:
        return 1.0
    return float((t.size - n_fg) / n_fg)


def wbce_loss(logits: np.ndarray, target: np.ndarray, w: float | None = None) -> float:
    """Weighted binary cross-entropy over sigmoid(logits).

    w scales the foreground term; by default it is the target's
    background/foreground ratio.  Saturated logits are safe: the loss is
    evaluated in its softplus form.
    """
    logits = np.asarray(logits, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if logits.shape != target.shape:
        raise ShapeError(f"logits {logits.shape} vs target {target.shape}")
    if w is None:
        w = default_foreground_weight(target)
    if w <= 0:
        raise ValueError(f"foreground weight must be positive, got {w}")
    # -log(sigmoid(z)) = softplus(-z);  -log(1 - sigmoid(z)) = softplus(z)
    per_pixel = w * target * _softplus(-logits) + (1.0 - target) * _softplus(logits)
    return float(per_pixel.mean())


def iou_loss(probs: np.ndarray, target: np.ndarray) -> float:
    """Soft IoU loss: 1 - sum(p*t) / sum(p + t - p*t).

    An all-zero union (empty prediction, empty target) counts as a perfect
    vacuous match and returns 0.
    """
    probs = np.asarray(probs, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if probs.shape != target.shape:
        raise ShapeError(f"probs {probs.shape} vs target {target.shape}")
    if probs.min() < 0 or probs.max() > 1:
        raise ValueError("probabilities must lie in [0, 1]")
    inter = float((probs * target).sum())
    union = float((probs + target - probs * target).sum())
    if union == 0:
        return 0.0
    return 1.0 - inter / union


def af_loss(pred_haf: np.ndarray, pred_vaf: np.ndarray, gt: AffinityPair,
            fg: np.ndarray) -> float:
    """L1 field regression averaged over foreground pixels only."""
    pred_haf = np.asarray(pred_haf, dtype=np.float64).reshape(gt.haf.shape)
    pred_vaf = np.asarray(pred_vaf, dtype=np.float64).reshape(gt.vaf.shape)
    fg = np.asarray(fg).astype(bool)
    if fg.shape != gt.haf.shape:
        raise ShapeError(f"fg {fg.shape} vs fields {gt.haf.shape}")
    n_fg = int(fg.sum())
    if n_fg == 0:
        return 0.0
    err = np.abs(gt.haf.astype(np.float64) - pred_haf)[fg].sum()
    err += np.abs(gt.vaf.astype(np.float64) - pred_vaf)[:, fg].sum()
    return float(err / n_fg)


def total_loss(seg_logits: np.ndarray, pred_haf: np.ndarray, pred_vaf: np.ndarray,
               target: np.ndarray, gt: AffinityPair,
               w: float | None = None) -> LossBreakdown:
    """All three terms; the segmentation target doubles as the foreground set."""
    from .tensor import sigmoid

    t = np.asarray(target, dtype=np.float64)
    wbce = wbce_loss(seg_logits, t, w)
    iou = iou_loss(sigmoid(np.asarray(seg_logits, dtype=np.float32)).astype(np.float64), t)
    af = af_loss(pred_haf, pred_vaf, gt, t > 0.5)
    return LossBreakdown(wbce, iou, af, wbce + iou + af)
