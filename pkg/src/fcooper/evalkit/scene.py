"""Synthetic multi-vehicle LiDAR scenes with ray-cast occlusion.

Objects are oriented boxes standing on the ground (world z = 0).  Each
vehicle carries a spinning LiDAR at its pose; every ray returns the nearest
box surface it hits, so anything behind a nearer box gets no points.
Ground returns are not generated (equivalent to a ground-removed cloud).
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from ..geom import Box3D, Pose, relative_transform, world_transform

SENSOR_HEIGHT = 1.73
CAR_SIZE = (3.9, 1.6, 1.56)


@dataclass(frozen=True)
class LidarConfig:
    beams: int = 16
    elevation_deg: tuple[float, float] = (-15.0, 15.0)
    azimuth_res_deg: float = 0.2
    max_range: float = 100.0
    range_noise: float = 0.01

    def directions(self) -> np.ndarray:
        """Unit ray directions (N, 3) in the sensor frame."""
        if self.beams < 1 or self.azimuth_res_deg <= 0:
            raise ValueError("lidar needs >= 1 beam and a positive azimuth step")
        el = np.radians(np.linspace(*self.elevation_deg, self.beams))
        az = np.radians(np.arange(-180.0, 180.0, self.azimuth_res_deg))
        e, a = np.meshgrid(el, az, indexing="ij")
        return np.stack(
            [np.cos(e) * np.cos(a), np.cos(e) * np.sin(a), np.sin(e)], axis=-1
        ).reshape(-1, 3)


@dataclass
class SceneConfig:
    """World layout: vehicle sensor poses and object boxes (world frame).

    Vehicle bodies are added as obstacles and ground-truth objects for the
    other vehicles when ``vehicle_bodies`` is set.
    """

    vehicles: list[Pose]
    objects: list[Box3D]
    lidar: LidarConfig = field(default_factory=LidarConfig)
    vehicle_bodies: bool = True
    name: str = "scene"

    def __post_init__(self):
        if len(self.vehicles) < 2:
            raise ValueError("a cooperative scene needs at least two vehicles")

    def body(self, i: int) -> Box3D:
        p = self.vehicles[i]
        l, w, h = CAR_SIZE
        return Box3D(p.x, p.y, h / 2, l, w, h, p.yaw)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "vehicles": [asdict(v) for v in self.vehicles],
            "objects": [asdict(b) for b in self.objects],
            "lidar": asdict(self.lidar),
            "vehicle_bodies": self.vehicle_bodies,
        }

    @classmethod
    def from_dict(cls, d: dict) -> SceneConfig:
        try:
            lidar = d.get("lidar", {})
            if "elevation_deg" in lidar:
                lidar = dict(lidar, elevation_deg=tuple(lidar["elevation_deg"]))
            return cls(
                vehicles=[Pose(**v) for v in d["vehicles"]],
                objects=[Box3D(**b) for b in d["objects"]],
                lidar=LidarConfig(**lidar),
                vehicle_bodies=bool(d.get("vehicle_bodies", True)),
                name=str(d.get("name", "scene")),
            )
        except (KeyError, TypeError) as exc:
            raise ValueError(f"invalid scene config: {exc}") from exc

    def save(self, path: str | os.PathLike) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)

    @classmethod
    def load(cls, path: str | os.PathLike) -> SceneConfig:
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


@dataclass
class Scene:
    config: SceneConfig
    clouds: list[np.ndarray]  # per vehicle, (N, 4) float32 in its sensor frame
    truths: list[Box3D]  # world frame
    hit_ids: list[np.ndarray]  # per point, index into ``truths`` of the surface hit

    @property
    def poses(self) -> list[Pose]:
        return self.config.vehicles

    def truths_in(self, vehicle: int) -> list[Box3D]:
        """Truth boxes expressed in a vehicle's sensor frame."""
        t = relative_transform(self.config.vehicles[vehicle], Pose())
        return [b.transformed(t) for b in self.truths]


def ray_box_distances(dirs: np.ndarray, origin: np.ndarray, box: Box3D) -> np.ndarray:
    """Entry distance along each unit ray, ``inf`` on a miss (slab method).

    Rays starting inside the box never hit it.
    """
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    o = origin - np.array([box.cx, box.cy, box.cz])
    o_local = np.array([c * o[0] + s * o[1], -s * o[0] + c * o[1], o[2]])
    d_local = np.stack(
        [c * dirs[:, 0] + s * dirs[:, 1], -s * dirs[:, 0] + c * dirs[:, 1], dirs[:, 2]], axis=1
    )
    half = np.array([box.l, box.w, box.h]) / 2
    if np.all(np.abs(o_local) < half):
        return np.full(len(dirs), np.inf)
    d_safe = np.where(np.abs(d_local) < 1e-12, 1e-12, d_local)
    t1 = (-half - o_local) / d_safe
    t2 = (half - o_local) / d_safe
    t_near = np.minimum(t1, t2).max(axis=1)
    t_far = np.maximum(t1, t2).min(axis=1)
    hit = (t_near <= t_far) & (t_near > 0)
    return np.where(hit, t_near, np.inf)


def cast(
    pose: Pose, boxes: list[Box3D], lidar: LidarConfig, rng: np.random.Generator,
    reflectance: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    """Simulate one sweep; returns sensor-frame points (N, 4) and hit box ids."""
    dirs_local = lidar.directions()
    to_world = world_transform(pose)
    dirs = to_world.apply(dirs_local) - np.array([pose.x, pose.y, pose.z])
    origin = np.array([pose.x, pose.y, pose.z])
    best = np.full(len(dirs), np.inf)
    which = np.full(len(dirs), -1, dtype=np.int64)
    for i, box in enumerate(boxes):
        d = ray_box_distances(dirs, origin, box)
        closer = d < best
        best[closer] = d[closer]
        which[closer] = i
    hit = np.isfinite(best) & (best <= lidar.max_range)
    r = best[hit] + lidar.range_noise * rng.standard_normal(int(hit.sum()))
    xyz = dirs_local[hit] * r[:, None]
    refl = np.clip(reflectance[which[hit]] + 0.05 * rng.standard_normal(len(r)), 0.0, 1.0)
    cloud = np.concatenate([xyz, refl[:, None]], axis=1).astype(np.float32)
    return cloud, which[hit]


def generate_scene(config: SceneConfig, seed: int = 0) -> Scene:
    rng = np.random.default_rng(seed)
    truths = list(config.objects)
    body_ids = {}
    if config.vehicle_bodies:
        for i in range(len(config.vehicles)):
            body_ids[i] = len(truths)
            truths.append(config.body(i))
    reflectance = rng.uniform(0.2, 0.8, size=len(truths))
    clouds, hits = [], []
    for i, pose in enumerate(config.vehicles):
        own = body_ids.get(i)
        boxes = [b for j, b in enumerate(truths) if j != own]
        ids = np.array([j for j in range(len(truths)) if j != own], dtype=np.int64)
        refl = reflectance[ids] if len(ids) else reflectance[:0]
        cloud, which = cast(pose, boxes, config.lidar, rng, refl)
        clouds.append(cloud)
        hits.append(ids[which] if len(which) else which)
    return Scene(config, clouds, truths, hits)


def _box_gap_ok(box: Box3D, others: list[Box3D], gap: float) -> bool:
    for o in others:
        if math.hypot(box.cx - o.cx, box.cy - o.cy) < (box.l + o.l) / 2 + gap:
            return False
    return True


def _car(x, y, yaw, rng) -> Box3D:
    l, w, h = CAR_SIZE
    l += rng.uniform(-0.2, 0.2)
    w += rng.uniform(-0.08, 0.08)
    h += rng.uniform(-0.08, 0.08)
    return Box3D(x, y, h / 2, l, w, h, yaw)


def visible_fraction(pose: Pose, target: Box3D, blockers: list[Box3D], lidar: LidarConfig) -> float:
    """Share of the target's LiDAR returns that survive the blockers."""
    dirs = world_transform(pose).apply(lidar.directions()) - np.array([pose.x, pose.y, pose.z])
    origin = np.array([pose.x, pose.y, pose.z])
    d_t = ray_box_distances(dirs, origin, target)
    own = np.isfinite(d_t) & (d_t <= lidar.max_range)
    if not own.any():
        return 0.0
    blocked = np.zeros(len(dirs), dtype=bool)
    for b in blockers:
        blocked |= ray_box_distances(dirs, origin, b) < d_t
    return float((own & ~blocked).sum() / own.sum())


def _blocker_for(v: Pose, target: Box3D, rng) -> Box3D:
    """A car part-way along the sight line from ``v`` to ``target``, shifted sideways."""
    f = rng.uniform(0.4, 0.6)
    heading = math.atan2(target.cy - v.y, target.cx - v.x)
    shift = rng.uniform(0.55, 1.1) * rng.choice([-1.0, 1.0])
    bx = v.x + f * (target.cx - v.x) - shift * math.sin(heading)
    by = v.y + f * (target.cy - v.y) + shift * math.cos(heading)
    return _car(bx, by, heading + rng.uniform(-0.1, 0.1), rng)


def occlusion_scene(seed: int, n_distractors: int = 3, lidar: LidarConfig | None = None) -> SceneConfig:
    """Two-vehicle scene with a target car partly hidden from both vehicles.

    The receiver sits at the origin facing +x; the sender comes the other
    way in the same corridor, so the two see opposite ends of a target car
    between them.  A blocker car near each sight line hides part of the
    target from that vehicle.  Layouts are re-drawn until each vehicle keeps
    between 35% and 80% of the returns it would get unoccluded.
    """
    rng = np.random.default_rng(seed)
    lidar = lidar or LidarConfig()
    receiver = Pose(0.0, 0.0, SENSOR_HEIGHT, 0.0)
    for _ in range(500):
        target = _car(rng.uniform(16.0, 24.0), rng.uniform(-0.6, 0.6), rng.uniform(-0.03, 0.03), rng)
        sender = Pose(
            target.cx + rng.uniform(14.0, 20.0), target.cy + rng.uniform(-0.6, 0.6), SENSOR_HEIGHT,
            math.pi + rng.uniform(-0.05, 0.05),
        )
        bodies = [Box3D(v.x, v.y, CAR_SIZE[2] / 2, *CAR_SIZE, v.yaw) for v in (receiver, sender)]
        blockers = []
        for v in (receiver, sender):
            blk = _blocker_for(v, target, rng)
            if _box_gap_ok(blk, [target, *bodies, *blockers], 0.5):
                blockers.append(blk)
        if len(blockers) < 2:
            continue
        objects = [target, *blockers]
        for _ in range(n_distractors):
            for _ in range(50):
                y = rng.choice([-1.0, 1.0]) * rng.uniform(6.0, 25.0)
                d = _car(rng.uniform(5.0, 60.0), y, rng.choice([0.0, math.pi / 2]), rng)
                if _box_gap_ok(d, objects + bodies, 2.0):
                    objects.append(d)
                    break
        others = objects[1:]
        fr = visible_fraction(receiver, target, others + bodies[1:], lidar)
        fs = visible_fraction(sender, target, others + bodies[:1], lidar)
        if 0.35 <= fr <= 0.8 and 0.35 <= fs <= 0.8:
            return SceneConfig([receiver, sender], objects, lidar, True, f"occlusion-{seed}")
    raise RuntimeError(f"could not lay out an occlusion scene for seed {seed}")


def _place(objects: list[Box3D], bodies: list[Box3D], cands, rng, gap: float = 1.0) -> None:
    for x, y, yaw in cands:
        b = _car(x, y, yaw, rng)
        if _box_gap_ok(b, objects + bodies, gap):
            objects.append(b)


def intersection_scene(seed: int = 0) -> SceneConfig:
    """Receiver approaching a crossroads; sender waiting on the cross street."""
    rng = np.random.default_rng(seed)
    receiver = Pose(0.0, 0.0, SENSOR_HEIGHT, 0.0)
    sender = Pose(30.0, -14.0, SENSOR_HEIGHT, math.pi / 2)
    bodies = [Box3D(v.x, v.y, CAR_SIZE[2] / 2, *CAR_SIZE, v.yaw) for v in (receiver, sender)]
    objects: list[Box3D] = []
    cands = [(rng.uniform(8, 24), rng.choice([-3.5, 3.5]), 0.0) for _ in range(4)]
    cands += [(rng.choice([26.5, 33.5]), rng.uniform(-8, 25), math.pi / 2) for _ in range(5)]
    cands += [(rng.uniform(36, 60), rng.choice([-3.5, 3.5]), 0.0) for _ in range(4)]
    _place(objects, bodies, cands, rng)
    return SceneConfig([receiver, sender], objects, name=f"intersection-{seed}")


def multilane_scene(seed: int = 0) -> SceneConfig:
    """Four-lane road; the sender drives ahead in the next lane."""
    rng = np.random.default_rng(seed)
    receiver = Pose(0.0, 0.0, SENSOR_HEIGHT, 0.0)
    sender = Pose(rng.uniform(18, 26), 3.5, SENSOR_HEIGHT, 0.0)
    bodies = [Box3D(v.x, v.y, CAR_SIZE[2] / 2, *CAR_SIZE, v.yaw) for v in (receiver, sender)]
    objects: list[Box3D] = []
    lanes = (-7.0, -3.5, 0.0, 3.5)
    cands = [(rng.uniform(6, 66), lanes[rng.integers(4)], rng.uniform(-0.05, 0.05)) for _ in range(14)]
    _place(objects, bodies, cands, rng, gap=2.0)
    return SceneConfig([receiver, sender], objects, name=f"multilane-{seed}")


def parking_scene(seed: int = 0) -> SceneConfig:
    """Rows of parked cars seen from two aisles."""
    rng = np.random.default_rng(seed)
    receiver = Pose(0.0, 0.0, SENSOR_HEIGHT, 0.0)
    sender = Pose(35.0, 12.0, SENSOR_HEIGHT, math.pi)
    bodies = [Box3D(v.x, v.y, CAR_SIZE[2] / 2, *CAR_SIZE, v.yaw) for v in (receiver, sender)]
    objects: list[Box3D] = []
    cands = []
    for row_y in (-6.0, 6.0, 18.0):
        for x in np.arange(8.0, 50.0, 2.8):
            if rng.random() < 0.6:
                cands.append((float(x), row_y + rng.uniform(-0.2, 0.2), math.pi / 2 + rng.uniform(-0.05, 0.05)))
    _place(objects, bodies, cands, rng, gap=0.3)
    return SceneConfig([receiver, sender], objects, name=f"parking-{seed}")


SCENARIOS = {
    "occlusion": occlusion_scene,
    "intersection": intersection_scene,
    "multilane": multilane_scene,
    "parking": parking_scene,
}
