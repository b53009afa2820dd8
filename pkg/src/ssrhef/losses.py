"""Training losses: hard-example-focusing regression, multi-scale Dice,
count-class cross-entropy, and their weighted sum. Each returns the value and
the gradient with respect to its prediction inputs."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import NumericalError, ShapeError, sigmoid

DICE_EPS = 1e-6


@dataclass
class HefConfig:
    gamma: float = 2.0

    def __post_init__(self):
        if self.gamma < 0:
            raise ValueError(f"gamma must be non-negative, got {self.gamma}")


@dataclass
class LossWeights:
    lambda_seg: float = 1e-2
    lambda_cla: float = 1e-3

    def __post_init__(self):
        if self.lambda_seg < 0 or self.lambda_cla < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass
class LossBreakdown:
    hef: float
    segs: float
    cla: float
    overall: float


def hef_loss(pred, gt, cfg: HefConfig = HefConfig()):
    """Mean over pixels of ``(1 - sigmoid(pred))**gamma * (pred - gt)**2``.

    The gradient includes the derivative of the modulating factor.
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ShapeError(f"hef_loss: pred shape {pred.shape} != gt shape {gt.shape}")
    if not (np.isfinite(pred).all() and np.isfinite(gt).all()):
        raise NumericalError("hef_loss: non-finite input")
    g = cfg.gamma
    area = pred.shape[-1] * pred.shape[-2]
    s = sigmoid(pred)
    q = sigmoid(-pred)  # 1 - s without cancellation
    mod = q ** g
    r = pred - gt
    loss = float((mod * r * r).sum() / area)
    # d/dp (1-s)^g = -g (1-s)^g s
    grad = (2.0 * mod * r - g * mod * s * r * r) / area
    return loss, grad


def dice_loss(pred_probs, gt_levels):
    """Sum over levels of ``1 - (2 sum(p g) + eps) / (sum(p^2) + sum(g^2) + eps)``."""
    if len(pred_probs) != len(gt_levels):
        raise ShapeError(f"dice_loss: {len(pred_probs)} predicted levels vs {len(gt_levels)} targets")
    total = 0.0
    grads = []
    for p, g in zip(pred_probs, gt_levels):
        p = np.asarray(p, dtype=np.float64)
        g = np.asarray(g, dtype=np.float64)
        if p.shape != g.shape:
            raise ShapeError(f"dice_loss: level shape {p.shape} != target shape {g.shape}")
        num = 2.0 * (p * g).sum() + DICE_EPS
        den = (p * p).sum() + (g * g).sum() + DICE_EPS
        total += 1.0 - num / den
        grads.append(-(2.0 * g * den - num * 2.0 * p) / (den * den))
    return float(total), grads


def cls_loss(logits, label: int):
    logits = np.asarray(logits, dtype=np.float64).ravel()
    k = logits.size
    if k < 2:
        raise ShapeError(f"cls_loss: need at least 2 classes, got {k}")
    if not 0 <= label < k:
        raise ValueError(f"cls_loss: label {label} out of range [0, {k})")
    z = logits - logits.max()
    lse = np.log(np.exp(z).sum())
    probs = np.exp(z - lse)
    grad = probs.copy()
    grad[label] -= 1.0
    return float(lse - z[label]), grad


def overall_loss(hef: float, segs: float, cla: float, w: LossWeights = LossWeights()):
    """Weighted sum; also returns the factors by which each part's gradient scales."""
    parts = (hef, segs, cla)
    if not all(np.isfinite(parts)):
        raise NumericalError(f"overall_loss: non-finite part in {parts}")
    total = hef + w.lambda_seg * segs + w.lambda_cla * cla
    return LossBreakdown(hef, segs, cla, total), (1.0, w.lambda_seg, w.lambda_cla)
