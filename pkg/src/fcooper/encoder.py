"""Fixed-weight voxel feature encoder and feature-learning network.

Nothing here is trained.  ``EncoderWeights.generate(seed)`` draws every
parameter from a PCG64 stream (``numpy.random.default_rng(seed)``) in a fixed
order, so a seed pins the network bit-for-bit.  Draw order and distributions:

* ``vfe1_w`` (64, 7): normal, column ``j`` scaled by ``1 / (sqrt(7) * INPUT_SCALE[j])``
* ``vfe1_b`` (64,): normal, std 0.1
* ``vfe2_w`` (128, 128): normal, std ``sqrt(2 / 128)``
* ``vfe2_b`` (128,): normal, std 0.1
* ``conv{i}_w`` (64, Cin, 3, 3, 3): uniform on ``[0, 2 * fln_gain / fan_in)``
* ``conv{i}_b`` (64,): ``-fln_threshold * uniform[0, 1)``

Each conv kernel is then averaged over the eight rotations/reflections of
its (H, W) footprint, so the bird's-eye response does not depend on which
way a vehicle is heading (up to lattice effects).

The feature-learning kernels are non-negative and the biases non-positive.
With ReLU activations that makes the network monotone in its input (a
maxout-fused store never yields smaller map values than either input) and
keeps empty space exactly zero, which the sparse convolution path relies on.
"""

from __future__ import annotations

import os
import struct
from collections.abc import Mapping
from dataclasses import dataclass, field, replace

import numpy as np

from .geom import Pose
from .voxel import FEATURE_DIM, MAX_POINTS_PER_VOXEL, VoxelFeatureStore, VoxelGridSpec

# typical magnitude of each per-point input: x, y, z, reflectance, dx, dy, dz
INPUT_SCALE = np.array([35.2, 40.0, 2.0, 1.0, 0.4, 0.4, 0.4])

VFE_HIDDEN = 64
FLN_CHANNELS = 64
# (stride, padding) per conv layer, all kernels 3x3x3, order (depth, height, width)
FLN_PLAN = (
    ((2, 1, 1), (1, 1, 1)),
    ((1, 1, 1), (0, 1, 1)),
    ((2, 1, 1), (1, 1, 1)),
)
FLN_OUT_DEPTH = FEATURE_DIM // FLN_CHANNELS

WEIGHTS_MAGIC = b"FCWT"
WEIGHTS_VERSION = 1


@dataclass(eq=False)
class EncoderWeights:
    seed: int
    vfe1_w: np.ndarray
    vfe1_b: np.ndarray
    vfe2_w: np.ndarray
    vfe2_b: np.ndarray
    conv_w: list[np.ndarray] = field(default_factory=list)
    conv_b: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def generate(
        cls, seed: int = 0, fln_gain: float = 8.0, fln_threshold: float = 0.2
    ) -> EncoderWeights:
        rng = np.random.default_rng(seed)
        f32 = np.float32
        vfe1_w = rng.standard_normal((VFE_HIDDEN, 7)) / (np.sqrt(7.0) * INPUT_SCALE)
        vfe1_b = 0.1 * rng.standard_normal(VFE_HIDDEN)
        vfe2_w = np.sqrt(2.0 / FEATURE_DIM) * rng.standard_normal((FEATURE_DIM, 2 * VFE_HIDDEN))
        vfe2_b = 0.1 * rng.standard_normal(FEATURE_DIM)
        conv_w, conv_b = [], []
        cin = FEATURE_DIM
        for _ in FLN_PLAN:
            fan_in = cin * 27
            w = rng.random((FLN_CHANNELS, cin, 3, 3, 3)) * (2.0 * fln_gain / fan_in)
            conv_w.append(_dihedral_mean(w).astype(f32))
            conv_b.append((-fln_threshold * rng.random(FLN_CHANNELS)).astype(f32))
            cin = FLN_CHANNELS
        return cls(
            seed, vfe1_w.astype(f32), vfe1_b.astype(f32), vfe2_w.astype(f32),
            vfe2_b.astype(f32), conv_w, conv_b,
        )

    def zero_biases(self) -> EncoderWeights:
        return replace(
            self,
            vfe1_b=np.zeros_like(self.vfe1_b),
            vfe2_b=np.zeros_like(self.vfe2_b),
            conv_b=[np.zeros_like(b) for b in self.conv_b],
        )

    def arrays(self) -> list[np.ndarray]:
        return [self.vfe1_w, self.vfe1_b, self.vfe2_w, self.vfe2_b, *self.conv_w, *self.conv_b]

    def __eq__(self, other) -> bool:
        if not isinstance(other, EncoderWeights):
            return NotImplemented
        return self.seed == other.seed and all(
            a.shape == b.shape and np.array_equal(a, b) for a, b in zip(self.arrays(), other.arrays())
        )

    def to_bytes(self) -> bytes:
        header = WEIGHTS_MAGIC + struct.pack("<IQ", WEIGHTS_VERSION, self.seed & 0xFFFFFFFFFFFFFFFF)
        return header + b"".join(np.asarray(a, dtype="<f4").tobytes() for a in self.arrays())

    @classmethod
    def from_bytes(cls, data: bytes) -> EncoderWeights:
        if len(data) < 16 or data[:4] != WEIGHTS_MAGIC:
            raise ValueError("not an encoder weights file")
        version, seed = struct.unpack_from("<IQ", data, 4)
        if version != WEIGHTS_VERSION:
            raise ValueError(f"unsupported weights version {version}")
        shapes = [(VFE_HIDDEN, 7), (VFE_HIDDEN,), (FEATURE_DIM, 2 * VFE_HIDDEN), (FEATURE_DIM,)]
        cin = FEATURE_DIM
        conv_shapes = []
        for _ in FLN_PLAN:
            conv_shapes.append((FLN_CHANNELS, cin, 3, 3, 3))
            cin = FLN_CHANNELS
        shapes += conv_shapes + [(FLN_CHANNELS,)] * len(FLN_PLAN)
        expected = 16 + 4 * sum(int(np.prod(s)) for s in shapes)
        if len(data) != expected:
            raise ValueError(f"weights file has {len(data)} bytes, expected {expected}")
        arrays, off = [], 16
        for s in shapes:
            n = int(np.prod(s))
            arrays.append(np.frombuffer(data, dtype="<f4", count=n, offset=off).reshape(s).astype(np.float32))
            off += 4 * n
        k = len(FLN_PLAN)
        return cls(seed, *arrays[:4], arrays[4:4 + k], arrays[4 + k:])

    def save(self, path: str | os.PathLike) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path: str | os.PathLike) -> EncoderWeights:
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())


@dataclass(eq=False)
class SpatialFeatureMap:
    """Channel-major BEV feature tensor ``data[c, row, col]``.

    Rows run along y (``grid.H``) and columns along x (``grid.W``), both with
    ``grid``'s cell size, expressed in the frame of the vehicle at ``pose``.
    ``channels`` lists which of the 128 channel slots the planes hold when the
    map was reduced with a channel mask.
    """

    data: np.ndarray
    grid: VoxelGridSpec
    pose: Pose = field(default_factory=Pose)
    channels: tuple[int, ...] | None = None

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 3:
            raise ValueError(f"expected a C x H x W array, got shape {self.data.shape}")
        if self.data.shape[1:] != (self.grid.H, self.grid.W):
            raise ValueError(
                f"map is {self.data.shape[1:]} but grid is {(self.grid.H, self.grid.W)}"
            )
        if self.channels is None:
            self.channels = tuple(range(self.data.shape[0]))
        self.channels = tuple(int(c) for c in self.channels)
        if len(self.channels) != self.data.shape[0]:
            raise ValueError("channel list does not match plane count")

    @property
    def C(self) -> int:
        return self.data.shape[0]

    @property
    def H(self) -> int:
        return self.data.shape[1]

    @property
    def W(self) -> int:
        return self.data.shape[2]

    @property
    def cell_size(self) -> float:
        return self.grid.voxel_size[0]

    def __eq__(self, other) -> bool:
        if not isinstance(other, SpatialFeatureMap):
            return NotImplemented
        return (
            self.grid == other.grid
            and self.pose == other.pose
            and self.channels == other.channels
            and np.array_equal(self.data, other.data)
        )

    __hash__ = None

    def zero_fraction(self) -> float:
        """Fraction of BEV cells whose feature vector is entirely zero."""
        return float(np.mean(~np.any(self.data != 0, axis=0)))


def _dihedral_mean(w: np.ndarray) -> np.ndarray:
    """Average a (..., H, W) kernel over the 8 symmetries of the square."""
    acc = np.zeros_like(w)
    for k in range(4):
        r = np.rot90(w, k, axes=(-2, -1))
        acc += r + np.swapaxes(r, -1, -2)
    return acc / 8.0


def _relu(x):
    return np.maximum(x, 0, out=x)


def encode_voxels(
    spec: VoxelGridSpec, voxel_points: Mapping, weights: EncoderWeights
) -> VoxelFeatureStore:
    """Run the voxel feature encoder over every non-empty voxel.

    Per point the input is (x, y, z, r, x - mean_x, y - mean_y, z - mean_z),
    with the mean over the voxel's distinct points.
    A point-wise layer gives 64 features; their max over the voxel is
    appended to every point, a second layer maps the 128-vector to 128
    features and a final max over points yields the voxel feature.
    """
    if not voxel_points:
        return VoxelFeatureStore(spec)
    keys = list(voxel_points.keys())
    counts = np.array([len(voxel_points[k]) for k in keys])
    if np.any(counts == 0):
        raise ValueError("cannot encode an empty voxel")
    if np.any(counts > MAX_POINTS_PER_VOXEL):
        raise ValueError(f"voxel holds more than {MAX_POINTS_PER_VOXEL} points; sample first")
    n = len(keys)
    pts = np.zeros((n, MAX_POINTS_PER_VOXEL, 4), dtype=np.float32)
    for i, k in enumerate(keys):
        p = np.asarray(voxel_points[k], dtype=np.float32)[:, :4]
        if len(p) > 1:
            # a voxel's points are a set: repeats would skew the centroid
            p = np.unique(p, axis=0)
            counts[i] = len(p)
        pts[i, : len(p), : p.shape[1]] = p
    mask = np.arange(MAX_POINTS_PER_VOXEL)[None, :] < counts[:, None]

    centroid = pts[:, :, :3].sum(axis=1) / counts[:, None].astype(np.float32)
    x = np.concatenate([pts, pts[:, :, :3] - centroid[:, None, :]], axis=2)

    f = _relu(x @ weights.vfe1_w.T + weights.vfe1_b)
    f[~mask] = 0.0  # post-ReLU values are >= 0, so zero padding never wins a max
    g = f.max(axis=1)
    h = np.concatenate([f, np.broadcast_to(g[:, None, :], f.shape)], axis=2)
    out = _relu(h @ weights.vfe2_w.T + weights.vfe2_b)
    out[~mask] = 0.0
    return VoxelFeatureStore(spec, np.array(keys), out.max(axis=1))


def conv_output_shape(in_shape, stride, padding, kernel=(3, 3, 3)) -> tuple[int, int, int]:
    return tuple((n + 2 * p - k) // s + 1 for n, p, k, s in zip(in_shape, padding, kernel, stride))


def conv3d(x: np.ndarray, weight: np.ndarray, bias: np.ndarray, stride, padding) -> np.ndarray:
    """Dense 3D cross-correlation + bias + ReLU on a (Cin, D, H, W) tensor."""
    co, ci, kd, kh, kw = weight.shape
    if x.shape[0] != ci:
        raise ValueError(f"input has {x.shape[0]} channels, kernel expects {ci}")
    out_shape = conv_output_shape(x.shape[1:], stride, padding, (kd, kh, kw))
    if min(out_shape) < 1:
        raise ValueError(f"input {x.shape[1:]} too small for stride/padding plan")
    pd, ph, pw = padding
    xp = np.pad(x, ((0, 0), (pd, pd), (ph, ph), (pw, pw)))
    sd, sh, sw = stride
    od, oh, ow = out_shape
    out = np.zeros((co,) + out_shape, dtype=np.float32)
    flat = out.reshape(co, -1)
    # contiguous per-offset (Cout, Cin) slices keep BLAS on its fast path
    wk = np.ascontiguousarray(weight.transpose(2, 3, 4, 0, 1))
    for a in range(kd):
        for b in range(kh):
            for c in range(kw):
                patch = xp[:, a : a + sd * od : sd, b : b + sh * oh : sh, c : c + sw * ow : sw]
                flat += wk[a, b, c] @ patch.reshape(ci, -1)
    out += bias.reshape(-1, 1, 1, 1)
    return _relu(out)


def sparse_conv3d(coords, feats, in_shape, weight, bias, stride, padding):
    """Gather/scatter version of :func:`conv3d` for mostly-empty inputs.

    ``coords`` are (N, 3) integer (d, h, w) sites holding ``feats`` (N, Cin);
    every other site is zero.  Requires ``bias <= 0`` so empty regions stay
    empty.  Returns ``(out_coords, out_feats, out_shape)`` with all-zero
    output rows dropped.
    """
    if np.any(bias > 0):
        raise ValueError("sparse convolution needs non-positive biases")
    co, ci, kd, kh, kw = weight.shape
    out_shape = conv_output_shape(in_shape, stride, padding, (kd, kh, kw))
    if min(out_shape) < 1:
        raise ValueError(f"input {tuple(in_shape)} too small for stride/padding plan")
    coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
    feats = np.asarray(feats, dtype=np.float32)
    if len(coords) == 0:
        return np.zeros((0, 3), dtype=np.int64), np.zeros((0, co), dtype=np.float32), out_shape
    stride_a, pad_a, shape_a = np.array(stride), np.array(padding), np.array(out_shape)

    pairs = []
    for a in range(kd):
        for b in range(kh):
            for c in range(kw):
                num = coords + pad_a - np.array([a, b, c])
                ok = np.all(num % stride_a == 0, axis=1)
                o = num // stride_a
                ok &= np.all((o >= 0) & (o < shape_a), axis=1)
                idx = np.flatnonzero(ok)
                lin = (o[idx, 0] * out_shape[1] + o[idx, 1]) * out_shape[2] + o[idx, 2]
                pairs.append(((a, b, c), idx, lin))
    wk = np.ascontiguousarray(weight.transpose(2, 3, 4, 1, 0))
    all_lin = np.concatenate([p[2] for p in pairs])
    uniq, inverse = np.unique(all_lin, return_inverse=True)
    out = np.zeros((len(uniq), co), dtype=np.float32)
    pos = 0
    for (a, b, c), idx, lin in pairs:
        oi = inverse[pos : pos + len(idx)]
        pos += len(idx)
        if len(idx):
            out[oi] += feats[idx] @ wk[a, b, c]
    out += bias
    _relu(out)
    keep = np.any(out > 0, axis=1)
    uniq, out = uniq[keep], out[keep]
    d, rest = np.divmod(uniq, out_shape[1] * out_shape[2])
    h, w = np.divmod(rest, out_shape[2])
    return np.stack([d, h, w], axis=1), out, out_shape


def check_depth_plan(depth: int) -> int:
    """Return the output depth of the layer plan for an input depth, or raise."""
    d = depth
    for stride, padding in FLN_PLAN:
        d = (d + 2 * padding[0] - 3) // stride[0] + 1
        if d < 1:
            break
    if d != FLN_OUT_DEPTH:
        raise ValueError(
            f"grid depth D={depth} reduces to {d} (need {FLN_OUT_DEPTH}); "
            "the layer plan supports D in 9..12"
        )
    return d


def feature_volume(store: VoxelFeatureStore, weights: EncoderWeights, sparse: bool | None = None) -> np.ndarray:
    """Run the three 3D convolutions; returns the (64, 2, H, W) volume."""
    spec = store.spec
    check_depth_plan(spec.D)
    shape = (spec.D, spec.H, spec.W)
    if sparse is None:
        sparse = all(np.all(b <= 0) for b in weights.conv_b)
    if sparse:
        coords = store.keys_array[:, ::-1]  # (ix, iy, iz) -> (d, h, w)
        feats = store.features
        for (stride, padding), w, b in zip(FLN_PLAN, weights.conv_w, weights.conv_b):
            coords, feats, shape = sparse_conv3d(coords, feats, shape, w, b, stride, padding)
        vol = np.zeros((FLN_CHANNELS,) + tuple(shape), dtype=np.float32)
        if len(coords):
            vol[:, coords[:, 0], coords[:, 1], coords[:, 2]] = feats.T
        return vol
    x = np.zeros((FEATURE_DIM,) + shape, dtype=np.float32)
    k = store.keys_array
    if len(k):
        x[:, k[:, 2], k[:, 1], k[:, 0]] = store.features.T
    for (stride, padding), w, b in zip(FLN_PLAN, weights.conv_w, weights.conv_b):
        x = conv3d(x, w, b, stride, padding)
    return x


def spatial_features(
    store: VoxelFeatureStore, weights: EncoderWeights, pose: Pose | None = None, sparse: bool | None = None
) -> SpatialFeatureMap:
    """Voxel store -> 128 x H x W bird's-eye feature map.

    The (64, 2, H, W) convolution output is flattened channel-major, so map
    channel ``2 * c + d`` holds conv channel ``c`` at output depth ``d``.
    """
    vol = feature_volume(store, weights, sparse=sparse)
    c, d, h, w = vol.shape
    return SpatialFeatureMap(vol.reshape(c * d, h, w), store.spec, pose or Pose())
