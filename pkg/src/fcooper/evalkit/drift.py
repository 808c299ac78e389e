"""GPS drift sensitivity: re-run both fusion paradigms with a displaced sender pose."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from ..encoder import EncoderWeights, SpatialFeatureMap, spatial_features
from ..fusion import FULL, ChannelMask, sff, vff
from ..geom import Pose, RigidTransform, relative_transform
from ..voxel import DESK_GRID, VoxelFeatureStore, VoxelGridSpec, voxelize
from ..encoder import encode_voxels
from .detect import AnchorGrid, anchor_scores, proxy_detect, target_score
from .scene import Scene

PARADIGMS = ("vff", "sff")


def drifted_pose(pose: Pose, drift: float, angle: float) -> Pose:
    """``pose`` displaced by ``drift`` meters in the ground-plane direction ``angle``."""
    if drift < 0:
        raise ValueError("drift must be >= 0")
    if drift == 0:
        return pose
    return pose.moved(drift * math.cos(angle), drift * math.sin(angle))


def key_shift(spec: VoxelGridSpec, keys: np.ndarray, t_a: RigidTransform, t_b: RigidTransform) -> int:
    """Largest per-axis change of the receiver cell holding each sender voxel center."""
    if len(keys) == 0:
        return 0
    centers = spec.key_centers(np.asarray(keys))
    ka = np.floor((t_a.apply(centers) - spec.lower) / spec.size)
    kb = np.floor((t_b.apply(centers) - spec.lower) / spec.size)
    return int(np.abs(ka - kb).max())


@dataclass
class FusedViews:
    maps: dict[str, SpatialFeatureMap]
    scores: dict[str, np.ndarray]
    detections: dict[str, list]


def fuse_views(
    stores: list[VoxelFeatureStore],
    maps: list[SpatialFeatureMap],
    receiver: Pose,
    sender: Pose,
    weights: EncoderWeights,
    mask: ChannelMask = FULL,
    anchors: AnchorGrid = AnchorGrid(),
) -> FusedViews:
    """VFF and SFF results for a receiver (index 0) and one sender (index 1)."""
    fused_store = vff(stores[0], stores[1], relative_transform(receiver, sender))
    out = {
        "vff": spatial_features(fused_store, weights, receiver),
        "sff": sff(maps[0], maps[1], receiver, sender, mask),
    }
    scores = {k: anchor_scores(m, anchors) for k, m in out.items()}
    dets = {k: proxy_detect(m, anchors) for k, m in out.items()}
    return FusedViews(out, scores, dets)


@dataclass
class DriftReport:
    drift: float
    rows: list[dict] = field(default_factory=list)  # per trial x paradigm x target
    summary: list[dict] = field(default_factory=list)  # per trial x paradigm

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["trial", "paradigm", "target", "base_score", "drift_score", "delta"])
        for r in self.rows:
            w.writerow([r["trial"], r["paradigm"], r["target"],
                        f"{r['base_score']:.6f}", f"{r['drift_score']:.6f}", f"{r['delta']:.6f}"])
        return buf.getvalue()

    def summary_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["trial", "paradigm", "angle", "max_key_shift", "missed", "gained"])
        for r in self.summary:
            w.writerow([r["trial"], r["paradigm"], f"{r['angle']:.6f}", r["max_key_shift"], r["missed"], r["gained"]])
        return buf.getvalue()


def _det_keys(dets) -> set:
    return {tuple(np.round(d.box.as_array(), 6)) for d in dets}


def drift_experiment(
    scene: Scene,
    drift: float,
    trials: int = 4,
    seed: int = 0,
    grid: VoxelGridSpec = DESK_GRID,
    weights: EncoderWeights | None = None,
    mask: ChannelMask = FULL,
    anchors: AnchorGrid = AnchorGrid(),
) -> DriftReport:
    """Score changes per target when the sender's reported pose drifts.

    The sender's features are unchanged; only the pose it reports (and so
    the transform the receiver applies) moves by ``drift`` meters in a
    random direction per trial.  Targets are all truth boxes except the
    receiver's own body, in the receiver frame.
    """
    if drift < 0:
        raise ValueError("drift must be >= 0")
    if trials < 1:
        raise ValueError("need at least one trial")
    weights = weights or EncoderWeights.generate()
    receiver, sender = scene.poses[0], scene.poses[1]
    stores = [encode_voxels(grid, voxelize(grid, c, seed=seed), weights) for c in scene.clouds[:2]]
    maps = [spatial_features(s, weights, p) for s, p in zip(stores, (receiver, sender))]
    base = fuse_views(stores, maps, receiver, sender, weights, mask, anchors)
    own = _own_body(scene)
    targets = [(j, b) for j, b in enumerate(scene.truths_in(0)) if j != own]
    base_scores = {
        k: [target_score(base.maps[k], b, anchors, scores=base.scores[k]) for _, b in targets] for k in PARADIGMS
    }
    rng = np.random.default_rng(seed)
    t0 = relative_transform(receiver, sender)
    report = DriftReport(drift)
    for trial in range(trials):
        angle = float(rng.uniform(-math.pi, math.pi))
        moved = drifted_pose(sender, drift, angle)
        shift = key_shift(grid, stores[1].keys_array, t0, relative_transform(receiver, moved))
        views = fuse_views(stores, [maps[0], maps[1]], receiver, moved, weights, mask, anchors)
        for k in PARADIGMS:
            for (j, b), s0 in zip(targets, base_scores[k]):
                s1 = target_score(views.maps[k], b, anchors, scores=views.scores[k])
                report.rows.append(
                    {"trial": trial, "paradigm": k, "target": j, "base_score": s0, "drift_score": s1, "delta": s1 - s0}
                )
            before, after = _det_keys(base.detections[k]), _det_keys(views.detections[k])
            report.summary.append({
                "trial": trial, "paradigm": k, "angle": angle, "max_key_shift": shift,
                "missed": len(before - after), "gained": len(after - before),
            })
    return report


def _own_body(scene: Scene) -> int | None:
    if not scene.config.vehicle_bodies:
        return None
    return len(scene.config.objects)
