"""Precision with a near/far split around the receiving vehicle."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..geom import Box3D, iou_3d

NEAR_CUT = 20.0
IOU_THRESH = 0.7
BUCKETS = ("near", "far")


@dataclass(frozen=True)
class BucketStats:
    tp: int = 0
    fp: int = 0

    @property
    def detections(self) -> int:
        return self.tp + self.fp

    @property
    def precision(self) -> float | None:
        """Percent in [0, 100], or None (N/A) when the bucket has no detections."""
        return 100.0 * self.tp / self.detections if self.detections else None


def bucket_of(box: Box3D, near_cut: float = NEAR_CUT) -> str:
    return "near" if math.hypot(box.cx, box.cy) <= near_cut else "far"


def match(dets, truths: list[Box3D], iou_thresh: float = IOU_THRESH) -> list[int | None]:
    """Greedy one-to-one matching; returns the matched truth index per detection.

    Detections are visited by descending score (ties keep input order) and
    each takes the unmatched truth with the highest IoU if it reaches
    ``iou_thresh``.
    """
    dets = list(dets)
    out: list[int | None] = [None] * len(dets)
    if not dets or not truths:
        return out
    order = sorted(range(len(dets)), key=lambda i: -dets[i].score)
    taken = np.zeros(len(truths), dtype=bool)
    for i in order:
        best, best_j = iou_thresh, None
        for j, t in enumerate(truths):
            if taken[j]:
                continue
            v = iou_3d(dets[i].box, t)
            if v >= best:
                if best_j is None or v > best:
                    best, best_j = v, j
        if best_j is not None:
            taken[best_j] = True
            out[i] = best_j
    return out


def precision(
    dets, truths: list[Box3D], iou_thresh: float = IOU_THRESH, near_cut: float = NEAR_CUT
) -> dict[str, BucketStats]:
    """Per-bucket TP/FP counts.

    Boxes are in the receiver's frame, so distance is measured from its
    origin.  A true positive is bucketed by its truth's center, a false
    positive by its own center.
    """
    dets = list(dets)
    m = match(dets, truths, iou_thresh)
    counts = {b: [0, 0] for b in BUCKETS}
    for d, j in zip(dets, m):
        if j is None:
            counts[bucket_of(d.box, near_cut)][1] += 1
        else:
            counts[bucket_of(truths[j], near_cut)][0] += 1
    return {b: BucketStats(*counts[b]) for b in BUCKETS}


def format_precision(p: float | None) -> str:
    return "N/A" if p is None else f"{p:.2f}"
