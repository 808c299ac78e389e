"""FeatureMessage envelope, sparse feature bodies, gzip framing and size accounting.

Every message is a fixed 130-byte header followed by a kind-specific body,
all little-endian, and the whole thing is gzip-compressed for the link::

    offset  size  field
         0     4  magic b"FCPR"
         4     1  version (1)
         5     1  kind: 1 voxel features, 2 spatial features, 3 detections
         6    32  sender pose x, y, z, yaw (4 x f64)
        38    48  grid ranges xmin, xmax, ymin, ymax, zmin, zmax (6 x f64)
        86    24  voxel sizes v_w, v_h, v_d (3 x f64)
       110    16  channel mask, bit c set when channel c is present
       126     4  entry count (u32)

Bodies:

* voxel: u32 N, u32 feature dim (128), u32 key space (W*H*D), then N records
  of (u32 linear key, 128 x f32) with strictly ascending keys.
* spatial: u32 H, u32 W, then per masked channel (ascending) u32 channel
  index, u32 plane bytes and H*W f32 values in row-major order.
* detections: N records of (cx, cy, cz, l, w, h, yaw, score) as f32.

The gzip stream is written with mtime 0 so identical content gives
identical bytes.
"""

from __future__ import annotations

import gzip
import struct
import zlib
from dataclasses import dataclass

import numpy as np

from .encoder import SpatialFeatureMap
from .fusion import FULL, ChannelMask
from .geom import Box3D, Pose
from .voxel import FEATURE_DIM, VoxelFeatureStore, VoxelGridSpec, delinearize

MAGIC = b"FCPR"
VERSION = 1
KIND_VOXEL = 1
KIND_SPATIAL = 2
KIND_DETECTIONS = 3
KINDS = (KIND_VOXEL, KIND_SPATIAL, KIND_DETECTIONS)

_HEADER = struct.Struct("<4sBB4d6d3d16sI")
HEADER_SIZE = _HEADER.size  # 130
_VOXEL_HEAD = struct.Struct("<III")
_SPATIAL_HEAD = struct.Struct("<II")
_PLANE_HEAD = struct.Struct("<II")
VOXEL_RECORD = 4 + 4 * FEATURE_DIM  # 516
DETECTION_RECORD = 8 * 4
RAW_POINT_BYTES = 16
GZIP_LEVEL = 6
_U32_MAX = 2**32 - 1


class WireError(ValueError):
    """Malformed message content."""


class CorruptMessageError(WireError):
    """Message failed an integrity check (gzip CRC/length, magic, counts)."""


@dataclass
class FeatureMessage:
    """Decoded envelope: header fields plus one kind-specific payload."""

    kind: int
    pose: Pose
    grid: VoxelGridSpec
    mask: ChannelMask
    count: int
    payload: object  # VoxelFeatureStore | SpatialFeatureMap | list of (Box3D, score)
    version: int = VERSION


@dataclass(frozen=True)
class SizeReport:
    logical_bytes: int
    wire_bytes: int
    raw_reference_bytes: int = 0

    @property
    def ratio(self) -> float:
        return self.wire_bytes / self.logical_bytes if self.logical_bytes else 1.0


# -- header ---------------------------------------------------------------


def pack_header(kind: int, pose: Pose, grid: VoxelGridSpec, mask: ChannelMask, count: int) -> bytes:
    if kind not in KINDS:
        raise WireError(f"unknown message kind {kind}")
    if not 0 <= count <= _U32_MAX:
        raise WireError(f"entry count {count} does not fit in u32")
    return _HEADER.pack(
        MAGIC, VERSION, kind, *pose.as_tuple(),
        *grid.x_range, *grid.y_range, *grid.z_range, *grid.voxel_size,
        mask.to_bytes(), count,
    )


def unpack_header(data: bytes) -> tuple[int, Pose, VoxelGridSpec, ChannelMask, int]:
    if len(data) < HEADER_SIZE:
        raise CorruptMessageError(f"message shorter than the {HEADER_SIZE}-byte header")
    f = _HEADER.unpack_from(data)
    magic, version, kind = f[0], f[1], f[2]
    if magic != MAGIC:
        raise CorruptMessageError(f"bad magic {magic!r}")
    if version != VERSION:
        raise WireError(f"unsupported version {version}")
    if kind not in KINDS:
        raise CorruptMessageError(f"unknown message kind {kind}")
    try:
        pose = Pose(*f[3:7])
        grid = VoxelGridSpec(f[7:9], f[9:11], f[11:13], f[13:16])
    except ValueError as exc:
        raise CorruptMessageError(f"invalid header field: {exc}") from exc
    return kind, pose, grid, ChannelMask.from_bytes(f[16]), f[17]


# -- bodies ---------------------------------------------------------------


def voxel_body_size(n: int) -> int:
    return _VOXEL_HEAD.size + n * VOXEL_RECORD


def spatial_body_size(channels: int, h: int, w: int) -> int:
    return _SPATIAL_HEAD.size + channels * (_PLANE_HEAD.size + h * w * 4)


def pack_voxel(store: VoxelFeatureStore) -> bytes:
    """Sparse voxel body; keys are the store's linearised keys, ascending."""
    space = store.spec.num_voxels
    if space - 1 > _U32_MAX:
        raise WireError(f"voxel key space {space} exceeds u32")
    n = len(store)
    rec = np.zeros(n, dtype=[("key", "<u4"), ("feat", "<f4", (FEATURE_DIM,))])
    rec["key"] = store.linear_keys
    rec["feat"] = store.features
    return _VOXEL_HEAD.pack(n, FEATURE_DIM, space) + rec.tobytes()


def unpack_voxel(body: bytes, grid: VoxelGridSpec) -> VoxelFeatureStore:
    if len(body) < _VOXEL_HEAD.size:
        raise CorruptMessageError("voxel body truncated")
    n, dim, space = _VOXEL_HEAD.unpack_from(body)
    if dim != FEATURE_DIM:
        raise WireError(f"feature dim {dim} != {FEATURE_DIM}")
    if space != grid.num_voxels:
        raise CorruptMessageError(f"key space {space} does not match grid {grid.num_voxels}")
    if len(body) != voxel_body_size(n):
        raise CorruptMessageError(f"voxel body is {len(body)} bytes, expected {voxel_body_size(n)}")
    rec = np.frombuffer(body, dtype=[("key", "<u4"), ("feat", "<f4", (FEATURE_DIM,))], offset=_VOXEL_HEAD.size)
    keys = rec["key"].astype(np.int64)
    if n and (np.any(np.diff(keys) <= 0) or keys[-1] >= space):
        raise CorruptMessageError("voxel keys not strictly ascending or out of range")
    return VoxelFeatureStore(grid, delinearize(grid, keys).reshape(-1, 3), rec["feat"].copy())


def pack_spatial(fmap: SpatialFeatureMap, mask: ChannelMask = FULL) -> bytes:
    """Dense f32 planes for the masked channels the map actually holds."""
    if len(mask) == 0:
        raise WireError("channel mask is empty")
    slot = {c: i for i, c in enumerate(fmap.channels)}
    missing = [c for c in mask.indices if c not in slot]
    if missing:
        raise WireError(f"map does not hold masked channels {missing[:5]}")
    parts = [_SPATIAL_HEAD.pack(fmap.H, fmap.W)]
    plane_bytes = fmap.H * fmap.W * 4
    for c in mask.indices:
        parts.append(_PLANE_HEAD.pack(c, plane_bytes))
        parts.append(np.ascontiguousarray(fmap.data[slot[c]], dtype="<f4").tobytes())
    return b"".join(parts)


def unpack_spatial(body: bytes, grid: VoxelGridSpec, pose: Pose, mask: ChannelMask) -> SpatialFeatureMap:
    if len(body) < _SPATIAL_HEAD.size:
        raise CorruptMessageError("spatial body truncated")
    h, w = _SPATIAL_HEAD.unpack_from(body)
    if (h, w) != (grid.H, grid.W):
        raise CorruptMessageError(f"plane size {(h, w)} does not match grid {(grid.H, grid.W)}")
    chans = mask.indices
    if len(body) != spatial_body_size(len(chans), h, w):
        raise CorruptMessageError("spatial body length does not match mask and grid")
    data = np.empty((len(chans), h, w), dtype=np.float32)
    off = _SPATIAL_HEAD.size
    for i, c in enumerate(chans):
        idx, nbytes = _PLANE_HEAD.unpack_from(body, off)
        if idx != c or nbytes != h * w * 4:
            raise CorruptMessageError(f"plane {i} header ({idx}, {nbytes}) disagrees with mask")
        off += _PLANE_HEAD.size
        data[i] = np.frombuffer(body, dtype="<f4", count=h * w, offset=off).reshape(h, w)
        off += nbytes
    return SpatialFeatureMap(data, grid, pose, chans)


def pack_detections(dets) -> bytes:
    """``dets`` is an iterable of objects with ``box`` and ``score`` or (box, score) pairs."""
    rows = []
    for d in dets:
        box, score = (d.box, d.score) if hasattr(d, "box") else d
        rows.append([*box.as_array(), score])
    return np.asarray(rows, dtype="<f4").reshape(-1, 8).tobytes()


def unpack_detections(body: bytes, count: int) -> list[tuple[Box3D, float]]:
    if len(body) != count * DETECTION_RECORD:
        raise CorruptMessageError("detection body length does not match entry count")
    arr = np.frombuffer(body, dtype="<f4").reshape(-1, 8).astype(np.float64)
    return [(Box3D.from_array(r[:7]), float(r[7])) for r in arr]


# -- compression ----------------------------------------------------------


def compress(body: bytes) -> bytes:
    return gzip.compress(body, compresslevel=GZIP_LEVEL, mtime=0)


def decompress(data: bytes) -> bytes:
    try:
        return gzip.decompress(data)
    except (OSError, EOFError, zlib.error) as exc:
        raise CorruptMessageError(f"gzip stream rejected: {exc}") from exc


# -- messages -------------------------------------------------------------


def encode_logical(
    kind: int, payload, pose: Pose | None = None, mask: ChannelMask = FULL, grid: VoxelGridSpec | None = None
) -> bytes:
    """Header + body, uncompressed."""
    if kind == KIND_VOXEL:
        body, count, grid = pack_voxel(payload), len(payload), payload.spec
        pose = pose or Pose()
    elif kind == KIND_SPATIAL:
        body, count, grid = pack_spatial(payload, mask), len(mask), payload.grid
        pose = pose or payload.pose
    elif kind == KIND_DETECTIONS:
        payload = list(payload)
        body, count = pack_detections(payload), len(payload)
        grid = grid or VoxelGridSpec()
        pose = pose or Pose()
    else:
        raise WireError(f"unknown message kind {kind}")
    return pack_header(kind, pose, grid, mask, count) + body


def decode_logical(data: bytes) -> FeatureMessage:
    kind, pose, grid, mask, count = unpack_header(data)
    body = data[HEADER_SIZE:]
    if kind == KIND_VOXEL:
        payload = unpack_voxel(body, grid)
        n = len(payload)
    elif kind == KIND_SPATIAL:
        payload = unpack_spatial(body, grid, pose, mask)
        n = payload.C
    else:
        payload = unpack_detections(body, count)
        n = len(payload)
    if n != count:
        raise CorruptMessageError(f"header declares {count} entries, body holds {n}")
    return FeatureMessage(kind, pose, grid, mask, count, payload)


def encode_message(kind: int, payload, pose: Pose | None = None, mask: ChannelMask = FULL, grid=None) -> bytes:
    """Wire bytes (gzip of header + body)."""
    return compress(encode_logical(kind, payload, pose, mask, grid))


def decode_message(data: bytes) -> FeatureMessage:
    return decode_logical(decompress(data))


def size_report(logical: bytes, wire: bytes | None = None, raw_points: int = 0) -> SizeReport:
    """Sizes for one message; ``raw_points`` gives the raw-cloud reference (16 B per point)."""
    if wire is None:
        wire = compress(logical)
    return SizeReport(len(logical), len(wire), raw_points * RAW_POINT_BYTES)
