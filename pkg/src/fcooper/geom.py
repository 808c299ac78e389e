"""Vehicle poses, planar rigid transforms and oriented 3D boxes.

All frames follow the LiDAR convention: x forward, y left, z up, yaw
counter-clockwise from +x.  Transforms are yaw-only (no roll/pitch) plus a
vertical offset, which is all that ground vehicles exchanging GPS/IMU poses
need.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


def normalize_angle(angle: float) -> float:
    """Wrap an angle to [-pi, pi)."""
    a = math.fmod(angle + math.pi, 2.0 * math.pi)
    if a < 0.0:
        a += 2.0 * math.pi
    a -= math.pi
    # fmod rounding can land exactly on +pi
    if a >= math.pi:
        a -= 2.0 * math.pi
    return a


def _check_finite(*values: float) -> None:
    if not all(math.isfinite(v) for v in values):
        raise ValueError(f"non-finite value in {values}")


@dataclass(frozen=True)
class Pose:
    """World pose of a vehicle's sensor (east, north, up in meters; yaw in rad)."""

    x: float = 0.0
    y: float = 0.0
    z: float = 0.0
    yaw: float = 0.0

    def __post_init__(self):
        _check_finite(self.x, self.y, self.z, self.yaw)
        object.__setattr__(self, "yaw", normalize_angle(float(self.yaw)))

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x, self.y, self.z, self.yaw)

    def moved(self, dx: float = 0.0, dy: float = 0.0, dz: float = 0.0) -> Pose:
        return Pose(self.x + dx, self.y + dy, self.z + dz, self.yaw)


@dataclass(frozen=True)
class RigidTransform:
    """Yaw rotation about z followed by a translation."""

    yaw: float = 0.0
    dx: float = 0.0
    dy: float = 0.0
    dz: float = 0.0

    @property
    def translation(self) -> tuple[float, float, float]:
        return (self.dx, self.dy, self.dz)

    def apply(self, points):
        """Map points of shape (3,) or (N, >=3); extra columns pass through."""
        pts = np.asarray(points, dtype=np.float64)
        single = pts.ndim == 1
        pts = np.atleast_2d(pts)
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        out = pts.copy()
        out[:, 0] = c * pts[:, 0] - s * pts[:, 1] + self.dx
        out[:, 1] = s * pts[:, 0] + c * pts[:, 1] + self.dy
        out[:, 2] = pts[:, 2] + self.dz
        return out[0] if single else out

    def inverse(self) -> RigidTransform:
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        # R^T (-t)
        return RigidTransform(
            -self.yaw,
            -(c * self.dx + s * self.dy),
            -(-s * self.dx + c * self.dy),
            -self.dz,
        )

    def compose(self, other: RigidTransform) -> RigidTransform:
        """Return ``self o other`` (apply ``other`` first)."""
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        return RigidTransform(
            self.yaw + other.yaw,
            c * other.dx - s * other.dy + self.dx,
            s * other.dx + c * other.dy + self.dy,
            other.dz + self.dz,
        )


IDENTITY = RigidTransform()


def relative_transform(receiver: Pose, sender: Pose) -> RigidTransform:
    """Transform taking sender-frame coordinates into the receiver frame."""
    ex, ey = sender.x - receiver.x, sender.y - receiver.y
    c, s = math.cos(receiver.yaw), math.sin(receiver.yaw)
    return RigidTransform(
        sender.yaw - receiver.yaw,
        c * ex + s * ey,
        -s * ex + c * ey,
        sender.z - receiver.z,
    )


def apply_transform(t: RigidTransform, p):
    return t.apply(p)


def world_transform(pose: Pose) -> RigidTransform:
    """Sensor frame -> world frame."""
    return RigidTransform(pose.yaw, pose.x, pose.y, pose.z)


@dataclass(frozen=True)
class Box3D:
    """Oriented box: center, extents (length along heading, width, height), yaw."""

    cx: float
    cy: float
    cz: float
    l: float
    w: float
    h: float
    yaw: float = 0.0

    def __post_init__(self):
        _check_finite(self.cx, self.cy, self.cz, self.l, self.w, self.h, self.yaw)
        if self.l <= 0 or self.w <= 0 or self.h <= 0:
            raise ValueError(f"box extents must be positive, got {self.l}, {self.w}, {self.h}")

    def as_array(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.cz, self.l, self.w, self.h, self.yaw])

    @classmethod
    def from_array(cls, a) -> Box3D:
        return cls(*(float(v) for v in a[:7]))

    @property
    def volume(self) -> float:
        return self.l * self.w * self.h

    def bev_corners(self) -> np.ndarray:
        """Counter-clockwise (4, 2) footprint corners."""
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        hl, hw = self.l / 2.0, self.w / 2.0
        local = np.array([[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]])
        rot = np.array([[c, -s], [s, c]])
        return local @ rot.T + np.array([self.cx, self.cy])

    def contains(self, points) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        dx, dy = pts[:, 0] - self.cx, pts[:, 1] - self.cy
        u = c * dx + s * dy
        v = -s * dx + c * dy
        return (
            (np.abs(u) <= self.l / 2)
            & (np.abs(v) <= self.w / 2)
            & (np.abs(pts[:, 2] - self.cz) <= self.h / 2)
        )

    def transformed(self, t: RigidTransform) -> Box3D:
        cx, cy, cz = t.apply([self.cx, self.cy, self.cz])
        return Box3D(cx, cy, cz, self.l, self.w, self.h, normalize_angle(self.yaw + t.yaw))


def _polygon_area(poly: np.ndarray) -> float:
    if len(poly) < 3:
        return 0.0
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))


def clip_convex(subject: np.ndarray, clip: np.ndarray) -> np.ndarray:
    """Sutherland-Hodgman clipping of ``subject`` by the CCW convex polygon ``clip``."""
    output = [tuple(p) for p in subject]
    n = len(clip)
    for i in range(n):
        if not output:
            break
        ax, ay = clip[i]
        bx, by = clip[(i + 1) % n]
        ex, ey = bx - ax, by - ay

        def side(p):
            return ex * (p[1] - ay) - ey * (p[0] - ax)

        inp, output = output, []
        prev = inp[-1]
        sp = side(prev)
        for cur in inp:
            sc = side(cur)
            if sc >= 0:
                if sp < 0:
                    output.append(_intersect(prev, cur, sp, sc))
                output.append(cur)
            elif sp >= 0:
                output.append(_intersect(prev, cur, sp, sc))
            prev, sp = cur, sc
    return np.array(output, dtype=np.float64).reshape(-1, 2)


def _intersect(p, q, sp, sq):
    t = sp / (sp - sq)
    return (p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1]))


def bev_intersection(a: Box3D, b: Box3D) -> float:
    return _polygon_area(clip_convex(a.bev_corners(), b.bev_corners()))


def bev_iou(a: Box3D, b: Box3D) -> float:
    inter = bev_intersection(a, b)
    union = a.l * a.w + b.l * b.w - inter
    return min(max(inter / union, 0.0), 1.0) if union > 0 else 0.0


def iou_3d(a: Box3D, b: Box3D) -> float:
    """Volume IoU of two yaw-rotated boxes (BEV polygon overlap x z overlap)."""
    if a == b:
        return 1.0
    zo = min(a.cz + a.h / 2, b.cz + b.h / 2) - max(a.cz - a.h / 2, b.cz - b.h / 2)
    if zo <= 0:
        return 0.0
    inter = bev_intersection(a, b) * zo
    union = a.volume + b.volume - inter
    if union <= 0:
        return 0.0
    return min(max(inter / union, 0.0), 1.0)
