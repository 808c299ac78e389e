"""Anchor box delta codec and the detection training loss.

Deltas are taken relative to an anchor P, with positions scaled by the
anchor's BEV diagonal ``P_d = sqrt(l^2 + w^2)`` (height by ``P_h``), sizes as
log ratios and heading as a plain difference.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..geom import Box3D

PROB_EPS = 1e-7


def _check_extent(b: Box3D, name: str) -> None:
    if min(b.l, b.w, b.h) <= 0:
        raise ValueError(f"{name} has a non-positive extent")


def delta_encode(anchor: Box3D, truth: Box3D) -> np.ndarray:
    """7-vector (dx, dy, dz, dl, dw, dh, dyaw) taking ``anchor`` to ``truth``."""
    _check_extent(anchor, "anchor")
    _check_extent(truth, "truth")
    d = math.hypot(anchor.l, anchor.w)
    return np.array([
        (truth.cx - anchor.cx) / d,
        (truth.cy - anchor.cy) / d,
        (truth.cz - anchor.cz) / anchor.h,
        math.log(truth.l / anchor.l),
        math.log(truth.w / anchor.w),
        math.log(truth.h / anchor.h),
        truth.yaw - anchor.yaw,
    ])


def delta_decode(anchor: Box3D, delta) -> Box3D:
    """Inverse of :func:`delta_encode`."""
    _check_extent(anchor, "anchor")
    dx, dy, dz, dl, dw, dh, dt = (float(v) for v in np.asarray(delta, dtype=np.float64).reshape(7))
    d = math.hypot(anchor.l, anchor.w)
    return Box3D(
        anchor.cx + dx * d,
        anchor.cy + dy * d,
        anchor.cz + dz * anchor.h,
        anchor.l * math.exp(dl),
        anchor.w * math.exp(dw),
        anchor.h * math.exp(dh),
        anchor.yaw + dt,
    )


def smooth_l1(x) -> np.ndarray:
    """0.5 x^2 for |x| < 1, |x| - 0.5 otherwise."""
    x = np.asarray(x, dtype=np.float64)
    a = np.abs(x)
    return np.where(a < 1.0, 0.5 * x * x, a - 0.5)


def bce(p, target: float) -> np.ndarray:
    """Binary cross entropy of probabilities ``p`` against a constant 0/1 label."""
    p = np.clip(np.asarray(p, dtype=np.float64), PROB_EPS, 1.0 - PROB_EPS)
    return -np.log(p) if target else -np.log1p(-p)


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 1.0  # weight of the negative-anchor classification term
    beta: float = 1.0  # weight of the positive-anchor classification term

    def __post_init__(self):
        for name in ("alpha", "beta"):
            v = getattr(self, name)
            if not (v > 0 and math.isfinite(v)):
                raise ValueError(f"{name} must be positive and finite, got {v}")


def loss(pos_scores, neg_scores, pred_deltas, truth_deltas, cfg: LossConfig = LossConfig()) -> float:
    """Classification plus regression loss over labelled anchors.

    ``pred_deltas``/``truth_deltas`` are (N_pos, 7), one row per positive
    anchor.  The two classification terms are means over their own anchor
    sets (an empty set contributes 0); the regression term sums Smooth-L1
    over the seven components and averages over positives.
    """
    pos = np.asarray(pos_scores, dtype=np.float64).ravel()
    neg = np.asarray(neg_scores, dtype=np.float64).ravel()
    pred = np.asarray(pred_deltas, dtype=np.float64).reshape(-1, 7)
    truth = np.asarray(truth_deltas, dtype=np.float64).reshape(-1, 7)
    if pred.shape != truth.shape:
        raise ValueError(f"prediction/target shapes differ: {pred.shape} vs {truth.shape}")
    if len(pred) and len(pos) == 0:
        raise ValueError("regression targets given without positive anchors")
    if len(pred) and len(pred) != len(pos):
        raise ValueError("need one regression row per positive anchor")
    total = 0.0
    if len(neg):
        total += cfg.alpha * float(bce(neg, 0).mean())
    if len(pos):
        total += cfg.beta * float(bce(pos, 1).mean())
    if len(pred):
        total += float(smooth_l1(pred - truth).sum() / len(pos))
    return total
