"""Voxel grid, point bucketing/sampling and the sparse voxel feature store."""

from __future__ import annotations

import os
from collections.abc import Iterator, Mapping
from dataclasses import dataclass

import numpy as np

FEATURE_DIM = 128
MAX_POINTS_PER_VOXEL = 35


@dataclass(frozen=True)
class VoxelGridSpec:
    """Axis-aligned detection range split into voxels.

    ``voxel_size`` is ``(v_w, v_h, v_d)``: edge lengths along x, y and z, so
    the grid has ``W`` cells along x, ``H`` along y and ``D`` along z.
    """

    x_range: tuple[float, float] = (0.0, 70.4)
    y_range: tuple[float, float] = (-40.0, 40.0)
    z_range: tuple[float, float] = (-3.0, 1.0)
    voxel_size: tuple[float, float, float] = (0.2, 0.2, 0.4)

    def __post_init__(self):
        for name in ("x_range", "y_range", "z_range"):
            lo, hi = getattr(self, name)
            if not hi > lo:
                raise ValueError(f"{name} must have max > min, got {(lo, hi)}")
            object.__setattr__(self, name, (float(lo), float(hi)))
        if any(v <= 0 for v in self.voxel_size):
            raise ValueError(f"voxel sizes must be positive, got {self.voxel_size}")
        object.__setattr__(self, "voxel_size", tuple(float(v) for v in self.voxel_size))

    @property
    def W(self) -> int:
        return int(round((self.x_range[1] - self.x_range[0]) / self.voxel_size[0]))

    @property
    def H(self) -> int:
        return int(round((self.y_range[1] - self.y_range[0]) / self.voxel_size[1]))

    @property
    def D(self) -> int:
        return int(round((self.z_range[1] - self.z_range[0]) / self.voxel_size[2]))

    @property
    def dims(self) -> tuple[int, int, int]:
        """(W, H, D)."""
        return (self.W, self.H, self.D)

    @property
    def lower(self) -> np.ndarray:
        return np.array([self.x_range[0], self.y_range[0], self.z_range[0]])

    @property
    def upper(self) -> np.ndarray:
        return np.array([self.x_range[1], self.y_range[1], self.z_range[1]])

    @property
    def size(self) -> np.ndarray:
        return np.array(self.voxel_size)

    @property
    def num_voxels(self) -> int:
        return self.W * self.H * self.D

    def same_voxel_size(self, other: VoxelGridSpec, tol: float = 1e-9) -> bool:
        return all(abs(a - b) <= tol for a, b in zip(self.voxel_size, other.voxel_size))

    def key_centers(self, keys: np.ndarray) -> np.ndarray:
        """Metric centers of integer (ix, iy, iz) keys."""
        return self.lower + (np.asarray(keys, dtype=np.float64) + 0.5) * self.size


PAPER_GRID = VoxelGridSpec()
# Same range at 0.8 m BEV cells: W=88, H=100, D=10.
DESK_GRID = VoxelGridSpec(voxel_size=(0.8, 0.8, 0.4))


def voxel_indices(spec: VoxelGridSpec, points) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised voxel lookup.

    Returns ``(keys, valid)`` where ``keys`` is an (N, 3) int64 array of
    (ix, iy, iz) and ``valid`` marks in-range points.  Points lying exactly on
    an axis maximum are clamped into the last cell.
    """
    xyz = np.atleast_2d(np.asarray(points, dtype=np.float64))[:, :3]
    lo, hi = spec.lower, spec.upper
    valid = np.all((xyz >= lo) & (xyz <= hi), axis=1) & np.all(np.isfinite(xyz), axis=1)
    keys = np.zeros((len(xyz), 3), dtype=np.int64)
    if valid.any():
        raw = np.floor((xyz[valid] - lo) / spec.size).astype(np.int64)
        keys[valid] = np.clip(raw, 0, np.array(spec.dims) - 1)
    return keys, valid


def voxel_index(spec: VoxelGridSpec, p) -> tuple[int, int, int] | None:
    """Key of the voxel containing ``p``, or ``None`` when out of range."""
    keys, valid = voxel_indices(spec, np.asarray(p, dtype=np.float64)[None, :3])
    if not valid[0]:
        return None
    return tuple(int(v) for v in keys[0])


def linearize(spec: VoxelGridSpec, keys) -> np.ndarray:
    k = np.asarray(keys, dtype=np.int64).reshape(-1, 3)
    return k[:, 0] + spec.W * (k[:, 1] + spec.H * k[:, 2])


def delinearize(spec: VoxelGridSpec, lin) -> np.ndarray:
    lin = np.asarray(lin, dtype=np.int64)
    ix = lin % spec.W
    rest = lin // spec.W
    return np.stack([ix, rest % spec.H, rest // spec.H], axis=-1)


def bucket_points(spec: VoxelGridSpec, cloud) -> dict[tuple[int, int, int], np.ndarray]:
    """Group in-range points by voxel key; out-of-range points are dropped."""
    cloud = np.asarray(cloud)
    if cloud.size == 0:
        return {}
    keys, valid = voxel_indices(spec, cloud)
    if not valid.any():
        return {}
    pts = cloud[valid]
    lin = linearize(spec, keys[valid])
    order = np.argsort(lin, kind="stable")
    lin_sorted = lin[order]
    starts = np.flatnonzero(np.r_[True, lin_sorted[1:] != lin_sorted[:-1]])
    groups = np.split(pts[order], starts[1:])
    uniq = delinearize(spec, lin_sorted[starts])
    return {tuple(int(v) for v in k): g for k, g in zip(uniq, groups)}


def sample_voxel(points, cap: int = MAX_POINTS_PER_VOXEL, seed: int = 0) -> np.ndarray:
    """Randomly keep ``cap`` points (without replacement) from an over-full voxel."""
    if cap < 1:
        raise ValueError("cap must be >= 1")
    points = np.asarray(points)
    if len(points) <= cap:
        return points
    rng = np.random.default_rng(seed)
    idx = np.sort(rng.choice(len(points), size=cap, replace=False))
    return points[idx]


def voxelize(
    spec: VoxelGridSpec, cloud, cap: int = MAX_POINTS_PER_VOXEL, seed: int = 0
) -> dict[tuple[int, int, int], np.ndarray]:
    """Bucket a cloud and cap every voxel at ``cap`` points.

    Each voxel draws from its own stream seeded by ``(seed, linear key)`` so
    the result does not depend on iteration order.
    """
    out = {}
    for key, pts in bucket_points(spec, cloud).items():
        if len(pts) > cap:
            sub_seed = np.random.SeedSequence([seed, int(linearize(spec, key)[0])])
            pts = sample_voxel(pts, cap, sub_seed)
        out[key] = pts
    return out


class VoxelFeatureStore(Mapping):
    """Sparse map from voxel key to a 128-d float32 feature vector.

    Entries are kept as two parallel arrays sorted by linearised key, which
    makes lookups a binary search and serialisation a straight copy.  The
    store is treated as immutable once built.
    """

    def __init__(self, spec: VoxelGridSpec, keys=None, features=None):
        self.spec = spec
        if keys is None:
            keys = np.zeros((0, 3), dtype=np.int64)
            features = np.zeros((0, FEATURE_DIM), dtype=np.float32)
        keys = np.asarray(keys, dtype=np.int64).reshape(-1, 3)
        features = np.asarray(features, dtype=np.float32)
        if features.ndim != 2 or features.shape[1] != FEATURE_DIM or len(features) != len(keys):
            raise ValueError(
                f"expected ({len(keys)}, {FEATURE_DIM}) features, got {features.shape}"
            )
        if len(keys) and (np.any(keys < 0) or np.any(keys >= np.array(spec.dims))):
            raise ValueError("voxel key out of grid range")
        lin = linearize(spec, keys)
        order = np.argsort(lin, kind="stable")
        lin = lin[order]
        if np.any(lin[1:] == lin[:-1]):
            raise ValueError("duplicate voxel keys")
        self.keys_array = keys[order]
        self.features = np.ascontiguousarray(features[order])
        self.linear_keys = lin

    @classmethod
    def from_dict(cls, spec: VoxelGridSpec, entries: Mapping) -> VoxelFeatureStore:
        if not entries:
            return cls(spec)
        keys = np.array(list(entries.keys()), dtype=np.int64)
        feats = np.stack([np.asarray(v, dtype=np.float32) for v in entries.values()])
        return cls(spec, keys, feats)

    def _find(self, key) -> int:
        k = np.asarray(key, dtype=np.int64)
        if k.shape != (3,) or np.any(k < 0) or np.any(k >= np.array(self.spec.dims)):
            return -1
        lin = int(linearize(self.spec, k)[0])
        i = int(np.searchsorted(self.linear_keys, lin))
        if i < len(self.linear_keys) and self.linear_keys[i] == lin:
            return i
        return -1

    def __getitem__(self, key) -> np.ndarray:
        i = self._find(key)
        if i < 0:
            raise KeyError(key)
        return self.features[i]

    def __contains__(self, key) -> bool:
        return self._find(key) >= 0

    def __iter__(self) -> Iterator[tuple[int, int, int]]:
        for k in self.keys_array:
            yield (int(k[0]), int(k[1]), int(k[2]))

    def __len__(self) -> int:
        return len(self.linear_keys)

    def __eq__(self, other) -> bool:
        if not isinstance(other, VoxelFeatureStore):
            return NotImplemented
        return (
            self.spec == other.spec
            and np.array_equal(self.linear_keys, other.linear_keys)
            and np.array_equal(self.features, other.features)
        )

    __hash__ = None

    def __repr__(self) -> str:
        return f"VoxelFeatureStore({len(self)} entries, dims={self.spec.dims})"

    @property
    def density(self) -> float:
        return len(self) / self.spec.num_voxels


def read_kitti_bin(path: str | os.PathLike) -> np.ndarray:
    """Load a headerless little-endian float32 (x, y, z, reflectance) file."""
    data = np.fromfile(path, dtype="<f4")
    if data.size % 4:
        raise ValueError(f"{path}: size is not a multiple of 16 bytes")
    return data.reshape(-1, 4)


def write_kitti_bin(path: str | os.PathLike, cloud) -> None:
    np.asarray(cloud, dtype="<f4").reshape(-1, 4).tofile(path)
