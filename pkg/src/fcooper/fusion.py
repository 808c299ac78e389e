"""Voxel feature fusion (VFF) and spatial feature fusion (SFF).

Both paradigms merge co-located features with an element-wise max.  VFF
works on sparse voxel stores and handles sender voxels whose centers land
on receiver cell boundaries; SFF works on dense BEV maps laid on an
enlarged canvas covering both vehicles' detection ranges.
"""

from __future__ import annotations

import enum
import math
import re
from dataclasses import dataclass

import numpy as np

from .encoder import SpatialFeatureMap
from .geom import Pose, RigidTransform, relative_transform
from .voxel import FEATURE_DIM, VoxelFeatureStore, VoxelGridSpec, linearize

DEFAULT_EPS = 1e-6
# below this heading difference the sender map is laid down without resampling
ALIGNED_YAW = math.radians(1.0)


def maxout_fuse(a, b) -> np.ndarray:
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"cannot fuse vectors of shapes {a.shape} and {b.shape}")
    return np.maximum(a, b)


class ChannelMask:
    """Set of channel indices in [0, 128), serialised as a 16-byte bitmap."""

    __slots__ = ("bits",)

    def __init__(self, channels=()):
        bits = 0
        for c in channels:
            c = int(c)
            if not 0 <= c < FEATURE_DIM:
                raise ValueError(f"channel {c} outside [0, {FEATURE_DIM})")
            bits |= 1 << c
        self.bits = bits

    @classmethod
    def from_range(cls, first: int, last: int) -> ChannelMask:
        """Inclusive range, e.g. ``from_range(55, 99)``."""
        if last < first:
            raise ValueError(f"empty channel range {first}-{last}")
        return cls(range(first, last + 1))

    @classmethod
    def from_bytes(cls, data: bytes) -> ChannelMask:
        if len(data) != 16:
            raise ValueError("channel mask must be 16 bytes")
        m = cls()
        m.bits = int.from_bytes(data, "little")
        return m

    @classmethod
    def parse(cls, text: str) -> ChannelMask:
        """Accept a preset name (full, key, min) or ranges like ``55-99,120``."""
        name = text.strip().lower()
        if name in PRESETS:
            return PRESETS[name]
        channels = []
        for part in name.split(","):
            m = re.fullmatch(r"\s*(\d+)\s*(?:-\s*(\d+))?\s*", part)
            if not m:
                raise ValueError(f"bad channel mask {text!r}")
            lo = int(m.group(1))
            hi = int(m.group(2)) if m.group(2) else lo
            if hi < lo:
                raise ValueError(f"empty channel range in {text!r}")
            channels.extend(range(lo, hi + 1))
        return cls(channels)

    def to_bytes(self) -> bytes:
        return self.bits.to_bytes(16, "little")

    @property
    def indices(self) -> tuple[int, ...]:
        return tuple(c for c in range(FEATURE_DIM) if self.bits >> c & 1)

    def __len__(self) -> int:
        return bin(self.bits).count("1")

    def __contains__(self, c) -> bool:
        return 0 <= c < FEATURE_DIM and bool(self.bits >> c & 1)

    def __eq__(self, other) -> bool:
        return isinstance(other, ChannelMask) and self.bits == other.bits

    def __hash__(self) -> int:
        return hash(self.bits)

    @property
    def label(self) -> str:
        """Compact text form accepted by :meth:`parse`, e.g. ``55-99`` or ``0-3,7``."""
        parts, idx = [], self.indices
        i = 0
        while i < len(idx):
            j = i
            while j + 1 < len(idx) and idx[j + 1] == idx[j] + 1:
                j += 1
            parts.append(str(idx[i]) if i == j else f"{idx[i]}-{idx[j]}")
            i = j + 1
        return ",".join(parts)

    def __repr__(self) -> str:
        idx = self.indices
        if idx and idx == tuple(range(idx[0], idx[-1] + 1)):
            return f"ChannelMask({idx[0]}-{idx[-1]})"
        return f"ChannelMask({list(idx)})"


FULL = ChannelMask.from_range(0, 127)
KEY = ChannelMask.from_range(55, 99)
MIN = ChannelMask.from_range(95, 99)
PRESETS = {"full": FULL, "key": KEY, "min": MIN}


class Alignment(enum.Enum):
    INTERIOR = 1
    FACE = 2
    EDGE = 4
    CORNER = 8


@dataclass(frozen=True)
class AlignmentCase:
    kind: Alignment
    keys: tuple[tuple[int, int, int], ...]


_KINDS = [Alignment.INTERIOR, Alignment.FACE, Alignment.EDGE, Alignment.CORNER]


def classify_alignment(center, spec: VoxelGridSpec, eps: float = DEFAULT_EPS) -> AlignmentCase:
    """Find which receiver voxels a transformed sender voxel center touches.

    An axis counts as "on a boundary" when the center is within ``eps`` of
    an interior cell plane; the voxels on both sides of every such plane are
    affected.  Planes on the outer edge of the range only touch one in-range
    cell and are treated as interior positions.
    """
    c = np.asarray(center, dtype=np.float64)[:3]
    dims = spec.dims
    choices = []
    for axis in range(3):
        u = (c[axis] - spec.lower[axis]) / spec.voxel_size[axis]
        plane = int(round(u))
        if 0 < plane < dims[axis] and abs(u - plane) * spec.voxel_size[axis] <= eps:
            choices.append((plane - 1, plane))
        else:
            choices.append((min(max(int(math.floor(u)), 0), dims[axis] - 1),))
    keys = tuple((i, j, k) for i in choices[0] for j in choices[1] for k in choices[2])
    n_planes = sum(len(ch) == 2 for ch in choices)
    return AlignmentCase(_KINDS[n_planes], keys)


def _fused_store(spec, lin, vecs) -> VoxelFeatureStore:
    """Max-reduce possibly repeated linear keys into a store."""
    if len(lin) == 0:
        return VoxelFeatureStore(spec)
    order = np.argsort(lin, kind="stable")
    lin, vecs = lin[order], vecs[order]
    starts = np.flatnonzero(np.r_[True, lin[1:] != lin[:-1]])
    fused = np.maximum.reduceat(vecs, starts, axis=0)
    u = lin[starts]
    keys = np.stack([u % spec.W, (u // spec.W) % spec.H, u // (spec.W * spec.H)], axis=1)
    return VoxelFeatureStore(spec, keys, fused)


def vff(
    receiver: VoxelFeatureStore,
    sender: VoxelFeatureStore,
    t: RigidTransform,
    eps: float = DEFAULT_EPS,
) -> VoxelFeatureStore:
    """Fuse a sender's voxel features into the receiver's grid.

    ``t`` maps sender coordinates into the receiver frame.  Sender voxels
    whose centers fall outside the receiver range are dropped; the rest are
    max-fused into every receiver voxel they touch (inserted where the
    receiver had none).
    """
    spec = receiver.spec
    if not spec.same_voxel_size(sender.spec):
        raise ValueError(f"voxel sizes differ: {spec.voxel_size} vs {sender.spec.voxel_size}")
    if len(sender) == 0:
        return receiver
    centers = t.apply(sender.spec.key_centers(sender.keys_array))
    inside = np.all((centers >= spec.lower) & (centers <= spec.upper), axis=1)
    centers, feats = centers[inside], sender.features[inside]

    u = (centers - spec.lower) / spec.size
    near = np.abs(u - np.round(u)) * spec.size <= eps
    plane = np.round(u)
    on_plane = near & (plane > 0) & (plane < np.array(spec.dims))
    simple = ~np.any(on_plane, axis=1)

    keys = np.clip(np.floor(u[simple]).astype(np.int64), 0, np.array(spec.dims) - 1)
    lin_parts = [receiver.linear_keys, linearize(spec, keys)]
    vec_parts = [receiver.features, feats[simple]]
    for i in np.flatnonzero(~simple):
        case = classify_alignment(centers[i], spec, eps)
        lin_parts.append(linearize(spec, case.keys))
        vec_parts.append(np.repeat(feats[i][None, :], len(case.keys), axis=0))
    return _fused_store(spec, np.concatenate(lin_parts), np.concatenate(vec_parts))


def select_channels(fmap: SpatialFeatureMap, mask: ChannelMask) -> SpatialFeatureMap:
    """Keep only the masked channel slots (in ascending slot order)."""
    if len(mask) == 0:
        raise ValueError("channel mask is empty")
    wanted = [i for i, c in enumerate(fmap.channels) if c in mask]
    return SpatialFeatureMap(
        fmap.data[wanted], fmap.grid, fmap.pose, tuple(fmap.channels[i] for i in wanted)
    )


def expand_channels(fmap: SpatialFeatureMap, total: int = FEATURE_DIM) -> SpatialFeatureMap:
    """Re-expand a channel subset into ``total`` slots; missing slots are zero."""
    if fmap.channels == tuple(range(total)):
        return fmap
    data = np.zeros((total, fmap.H, fmap.W), dtype=np.float32)
    data[list(fmap.channels)] = fmap.data
    return SpatialFeatureMap(data, fmap.grid, fmap.pose)


@dataclass(frozen=True)
class Placement:
    """Sender map laid on the receiver's cell lattice.

    ``row0``/``col0`` give the lattice offset of ``data`` relative to the
    receiver map's cell (0, 0); ``covered`` marks cells the sender's range
    actually reaches.
    """

    data: np.ndarray
    covered: np.ndarray
    row0: int
    col0: int


def place_sender(
    receiver: SpatialFeatureMap, sender: SpatialFeatureMap, receiver_pose: Pose, sender_pose: Pose
) -> Placement:
    cell = receiver.cell_size
    if abs(cell - sender.cell_size) > 1e-9:
        raise ValueError(f"cell sizes differ: {cell} vs {sender.cell_size}")
    t = relative_transform(receiver_pose, sender_pose)
    rx0, ry0 = receiver.grid.x_range[0], receiver.grid.y_range[0]
    sx0, sy0 = sender.grid.x_range[0], sender.grid.y_range[0]
    if abs(t.yaw) <= ALIGNED_YAW:
        col0 = int(round((sx0 + t.dx - rx0) / cell))
        row0 = int(round((sy0 + t.dy - ry0) / cell))
        return Placement(sender.data, np.ones((sender.H, sender.W), dtype=bool), row0, col0)

    # nearest-neighbour resampling into the receiver heading
    sx1, sy1 = sender.grid.x_range[1], sender.grid.y_range[1]
    corners = t.apply(np.array([[sx0, sy0, 0], [sx1, sy0, 0], [sx1, sy1, 0], [sx0, sy1, 0]]))
    col0 = int(math.floor((corners[:, 0].min() - rx0) / cell))
    col1 = int(math.ceil((corners[:, 0].max() - rx0) / cell))
    row0 = int(math.floor((corners[:, 1].min() - ry0) / cell))
    row1 = int(math.ceil((corners[:, 1].max() - ry0) / cell))
    rows = np.arange(row0, row1)
    cols = np.arange(col0, col1)
    cy, cx = np.meshgrid(ry0 + (rows + 0.5) * cell, rx0 + (cols + 0.5) * cell, indexing="ij")
    pts = np.stack([cx.ravel(), cy.ravel(), np.zeros(cx.size)], axis=1)
    src = t.inverse().apply(pts)
    sc = np.floor((src[:, 0] - sx0) / cell).astype(np.int64)
    sr = np.floor((src[:, 1] - sy0) / cell).astype(np.int64)
    ok = (sc >= 0) & (sc < sender.W) & (sr >= 0) & (sr < sender.H)
    data = np.zeros((sender.C, len(rows) * len(cols)), dtype=np.float32)
    data[:, ok] = sender.data[:, sr[ok], sc[ok]]
    shape = (len(rows), len(cols))
    return Placement(data.reshape((sender.C,) + shape), ok.reshape(shape), row0, col0)


def sff_overlap(
    receiver: SpatialFeatureMap,
    sender: SpatialFeatureMap,
    receiver_pose: Pose | None = None,
    sender_pose: Pose | None = None,
) -> tuple[int, int]:
    """(rows, cols) extent of the bounding overlap of the two footprints."""
    p = place_sender(receiver, sender, receiver_pose or receiver.pose, sender_pose or sender.pose)
    rows = min(receiver.H, p.row0 + p.covered.shape[0]) - max(0, p.row0)
    cols = min(receiver.W, p.col0 + p.covered.shape[1]) - max(0, p.col0)
    return max(rows, 0), max(cols, 0)


def sff(
    receiver: SpatialFeatureMap,
    sender: SpatialFeatureMap,
    receiver_pose: Pose | None = None,
    sender_pose: Pose | None = None,
    mask: ChannelMask = FULL,
) -> SpatialFeatureMap:
    """Fuse two BEV maps on a canvas spanning both footprints.

    Overlapping cells take the max of both maps on masked channels; on
    unmasked channels the receiver's values are kept and the sender's are
    ignored.  Cells covered by neither map are zero.  The result is in the
    receiver frame with all 128 channel slots.
    """
    receiver_pose = receiver_pose or receiver.pose
    sender_pose = sender_pose or sender.pose
    if len(mask) == 0:
        raise ValueError("channel mask is empty")
    rec = expand_channels(receiver)
    snd = expand_channels(sender)
    p = place_sender(rec, snd, receiver_pose, sender_pose)
    ph, pw = p.covered.shape
    top, left = min(0, p.row0), min(0, p.col0)
    bottom, right = max(rec.H, p.row0 + ph), max(rec.W, p.col0 + pw)
    canvas = np.zeros((FEATURE_DIM, bottom - top, right - left), dtype=np.float32)

    r0, c0 = -top, -left
    canvas[:, r0 : r0 + rec.H, c0 : c0 + rec.W] = rec.data
    rec_cov = np.zeros(canvas.shape[1:], dtype=bool)
    rec_cov[r0 : r0 + rec.H, c0 : c0 + rec.W] = True

    chans = np.array(mask.indices)
    sr, sc = p.row0 - top, p.col0 - left
    region = canvas[chans, sr : sr + ph, sc : sc + pw]
    both = rec_cov[sr : sr + ph, sc : sc + pw] & p.covered
    snd_data = p.data[chans]
    fused = np.where(both, np.maximum(region, snd_data), np.where(p.covered, snd_data, region))
    canvas[chans, sr : sr + ph, sc : sc + pw] = fused

    cell = rec.cell_size
    g = rec.grid
    grid = VoxelGridSpec(
        (g.x_range[0] + left * cell, g.x_range[0] + right * cell),
        (g.y_range[0] + top * cell, g.y_range[0] + bottom * cell),
        g.z_range,
        g.voxel_size,
    )
    return SpatialFeatureMap(canvas, grid, receiver_pose)
