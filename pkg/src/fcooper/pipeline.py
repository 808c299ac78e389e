"""End-to-end cooperative perception run over one scene.

generate -> voxelize -> encode -> exchange (raw cloud, voxel features or
spatial features) -> fuse -> detect -> evaluate -> link budget.  Vehicle 0
is the receiver; every other vehicle sends to it.
"""

from __future__ import annotations

import csv
import io
import os
from dataclasses import dataclass, field
from importlib import resources

import numpy as np

from . import netsim, wire
from .encoder import EncoderWeights, SpatialFeatureMap, encode_voxels, spatial_features
from .evalkit.detect import AnchorGrid, Detection, proxy_detect
from .evalkit.drift import drift_experiment
from .evalkit.metrics import BUCKETS, bucket_of, format_precision, match, precision
from .evalkit.scene import Scene, SceneConfig, generate_scene
from .fusion import FULL, ChannelMask, sff, vff
from .geom import relative_transform
from .voxel import DESK_GRID, VoxelGridSpec, voxel_indices, voxelize

OUTPUT_FILES = ("detections.csv", "metrics.csv", "sizes.csv", "timeline.csv")


def bundled_scenes() -> list[str]:
    root = resources.files("fcooper") / "scenes"
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".json"))


def load_scene(name_or_path: str) -> SceneConfig:
    """A bundled scene by name (e.g. ``occlusion``) or a JSON file path."""
    if os.path.exists(name_or_path):
        return SceneConfig.load(name_or_path)
    res = resources.files("fcooper") / "scenes" / f"{name_or_path}.json"
    if not res.is_file():
        raise FileNotFoundError(f"no scene file or bundled scene named {name_or_path!r}")
    with resources.as_file(res) as p:
        return SceneConfig.load(p)


@dataclass
class RunConfig:
    scene: SceneConfig
    strategy: str = "sff"
    mask: ChannelMask = FULL
    link: str = "dsrc"
    seed: int = 0
    grid: VoxelGridSpec = DESK_GRID
    weights_seed: int = 0
    duration: float = 1.0
    drift: float = 0.0
    drift_trials: int = 4
    timings: netsim.StageTimings = field(default_factory=netsim.StageTimings)

    def __post_init__(self):
        if self.strategy not in netsim.STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}")
        if len(self.mask) == 0:
            raise ValueError("channel mask is empty")
        netsim.link_profile(self.link)
        if self.drift < 0:
            raise ValueError("drift must be >= 0")


@dataclass
class SenderSize:
    sender: str
    logical_bytes: int
    wire_bytes: int
    raw_reference_bytes: int


@dataclass
class RunResult:
    config: RunConfig
    scene: Scene
    detections: dict[str, list[Detection]]  # "single" and the chosen strategy
    fused_map: SpatialFeatureMap
    sizes: list[SenderSize]
    budget: netsim.Budget
    sim: netsim.SimResult
    drift_report: object = None

    @property
    def targets(self):
        own = len(self.scene.config.objects) if self.scene.config.vehicle_bodies else None
        return [b for j, b in enumerate(self.scene.truths_in(0)) if j != own]


def _in_range_points(grid: VoxelGridSpec, cloud: np.ndarray) -> int:
    _, ok = voxel_indices(grid, cloud[:, :3])
    return int(ok.sum())


def run(cfg: RunConfig) -> RunResult:
    scene = generate_scene(cfg.scene, cfg.seed)
    g = cfg.grid
    weights = EncoderWeights.generate(cfg.weights_seed)
    anchors = AnchorGrid()
    poses = scene.poses
    receiver = poses[0]
    stores = [encode_voxels(g, voxelize(g, c, seed=cfg.seed), weights) for c in scene.clouds]
    own_map = spatial_features(stores[0], weights, receiver)
    sizes = []

    if cfg.strategy == "raw":
        merged = [scene.clouds[0]]
        for i in range(1, len(poses)):
            cloud = scene.clouds[i]
            logical = np.ascontiguousarray(cloud, dtype="<f4").tobytes()
            sizes.append(SenderSize(f"v{i}", len(logical), len(wire.compress(logical)),
                                    _in_range_points(g, cloud) * wire.RAW_POINT_BYTES))
            moved = cloud.copy()
            moved[:, :3] = relative_transform(receiver, poses[i]).apply(cloud[:, :3].astype(np.float64))
            merged.append(moved)
        store = encode_voxels(g, voxelize(g, np.concatenate(merged), seed=cfg.seed), weights)
        fused = spatial_features(store, weights, receiver)
    elif cfg.strategy == "vff":
        store = stores[0]
        for i in range(1, len(poses)):
            logical = wire.encode_logical(wire.KIND_VOXEL, stores[i], pose=poses[i])
            data = wire.compress(logical)
            sizes.append(SenderSize(f"v{i}", len(logical), len(data),
                                    _in_range_points(g, scene.clouds[i]) * wire.RAW_POINT_BYTES))
            msg = wire.decode_message(data)
            store = vff(store, msg.payload, relative_transform(receiver, msg.pose))
        fused = spatial_features(store, weights, receiver)
    else:
        fused = own_map
        for i in range(1, len(poses)):
            m = spatial_features(stores[i], weights, poses[i])
            logical = wire.encode_logical(wire.KIND_SPATIAL, m, mask=cfg.mask)
            data = wire.compress(logical)
            sizes.append(SenderSize(f"v{i}", len(logical), len(data),
                                    _in_range_points(g, scene.clouds[i]) * wire.RAW_POINT_BYTES))
            msg = wire.decode_message(data)
            fused = sff(fused, msg.payload, receiver, msg.pose, cfg.mask)

    dets = {"single": proxy_detect(own_map, anchors), cfg.strategy: proxy_detect(fused, anchors)}
    link = netsim.link_profile(cfg.link)
    payload = max(s.wire_bytes for s in sizes)
    budget = netsim.latency_budget(cfg.strategy, payload, link, cfg.timings)
    names = [f"v{i}" for i in range(len(poses))]
    sim = netsim.run_scenario(netsim.Scenario(
        names, names[1:], {s.sender: s.wire_bytes for s in sizes}, link, cfg.timings,
        cfg.strategy, cfg.duration, cfg.seed,
    ))
    report = None
    if cfg.drift > 0:
        report = drift_experiment(scene, cfg.drift, cfg.drift_trials, cfg.seed, g, weights, cfg.mask, anchors)
    return RunResult(cfg, scene, dets, fused, sizes, budget, sim, report)


def _csv(rows, header) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def render(result: RunResult) -> dict[str, str]:
    """CSV file name -> content."""
    cfg = result.config
    targets = result.targets
    name = cfg.scene.name
    det_rows, metric_rows = [], []
    total_wire = sum(s.wire_bytes for s in result.sizes)
    ms = f"{result.budget.total * 1000:.3f}"
    for strategy, dets in result.detections.items():
        m = match(dets, targets)
        for i, (d, j) in enumerate(zip(dets, m)):
            b = d.box
            det_rows.append([strategy, i, *(f"{v:.4f}" for v in b.as_array()), f"{d.score:.6f}",
                             bucket_of(targets[j] if j is not None else b), int(j is not None)])
        stats = precision(dets, targets)
        for bucket in BUCKETS:
            s = stats[bucket]
            single = strategy == "single"
            metric_rows.append([name, strategy, bucket, format_precision(s.precision), s.tp, s.fp,
                                s.detections, 0 if single else total_wire, "0.000" if single else ms])
    size_rows = [
        [s.sender, cfg.strategy, cfg.mask.label if cfg.strategy == "sff" else FULL.label,
         len(cfg.mask) if cfg.strategy == "sff" else 128, s.logical_bytes, s.wire_bytes,
         f"{s.wire_bytes / s.logical_bytes:.6f}", s.raw_reference_bytes]
        for s in result.sizes
    ]
    out = {
        "detections.csv": _csv(det_rows, ["strategy", "index", "cx", "cy", "cz", "l", "w", "h", "yaw",
                                          "score", "bucket", "tp"]),
        "metrics.csv": _csv(metric_rows, ["scenario", "strategy", "bucket", "precision", "tp", "fp",
                                          "detections", "bytes", "ms"]),
        "sizes.csv": _csv(size_rows, ["sender", "strategy", "mask", "channels", "logical_bytes",
                                      "wire_bytes", "ratio", "raw_reference_bytes"]),
        "timeline.csv": result.sim.to_csv(),
    }
    if result.drift_report is not None:
        out["drift.csv"] = result.drift_report.to_csv()
        out["drift_summary.csv"] = result.drift_report.summary_csv()
    return out


def write_outputs(result: RunResult, out_dir: str | os.PathLike) -> list[str]:
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    for fname, text in render(result).items():
        p = os.path.join(out_dir, fname)
        with open(p, "w", newline="") as fh:
            fh.write(text)
        paths.append(p)
    return paths
