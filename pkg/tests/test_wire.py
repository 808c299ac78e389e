from __future__ import annotations

import hashlib
import os
import pathlib
import sys

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fcooper import wire
from fcooper.encoder import SpatialFeatureMap
from fcooper.fusion import FULL, KEY, MIN, ChannelMask, select_channels
from fcooper.geom import Box3D, Pose
from fcooper.voxel import DESK_GRID, PAPER_GRID, VoxelFeatureStore

FIXTURES = pathlib.Path(__file__).parent / "fixtures"
sys.path.insert(0, str(FIXTURES))
import build as golden  # noqa: E402

# sha256 of the compressed file and of the uncompressed (logical) message
GOLDEN = {
    "voxel.fcm": ("503f7f6dd104ec7d3ecd76e6cb93e54fcc965dfa00f16b39a904a0483651c27f", 130 + 12 + 3 * 516),
    "spatial_min.fcm": ("c0a966780ceb5bf19806a77cc67dbf1dcf292b640f5c51b41db4fda6f539bce7", 130 + 8 + 5 * (8 + 4 * 4 * 4)),
    "detections.fcm": ("af786bcab5967ee6338b5015d1173b4cfb40ede226e6549be54ccc8ab8bff696", 130 + 2 * 32),
}


def test_header_layout():
    assert wire.HEADER_SIZE == 130
    h = wire.pack_header(wire.KIND_SPATIAL, Pose(1, 2, 3, 0.5), PAPER_GRID, KEY, 45)
    assert h[:4] == b"FCPR" and h[4] == 1 and h[5] == 2
    assert np.frombuffer(h[6:38], "<f8").tolist() == [1, 2, 3, 0.5]
    assert np.frombuffer(h[38:86], "<f8").tolist() == [0, 70.4, -40, 40, -3, 1]
    assert np.frombuffer(h[86:110], "<f8").tolist() == [0.2, 0.2, 0.4]
    assert int.from_bytes(h[110:126], "little") == sum(1 << c for c in range(55, 100))
    assert int.from_bytes(h[126:130], "little") == 45
    kind, pose, grid, mask, count = wire.unpack_header(h)
    assert (kind, pose, grid, mask, count) == (2, Pose(1, 2, 3, 0.5), PAPER_GRID, KEY, 45)


def test_header_rejects_garbage():
    h = bytearray(wire.pack_header(wire.KIND_VOXEL, Pose(), PAPER_GRID, FULL, 0))
    with pytest.raises(wire.CorruptMessageError):
        wire.unpack_header(bytes(h[:100]))
    bad = bytes(b"XXXX" + h[4:])
    with pytest.raises(wire.CorruptMessageError):
        wire.unpack_header(bad)
    h[4] = 9
    with pytest.raises(wire.WireError):
        wire.unpack_header(bytes(h))
    with pytest.raises(wire.WireError):
        wire.pack_header(7, Pose(), PAPER_GRID, FULL, 0)


def test_size_formulas():
    assert wire.voxel_body_size(0) == 12
    assert wire.voxel_body_size(2200) == 12 + 2200 * 516 == 1_135_212
    assert wire.spatial_body_size(128, 400, 352) == 72_090_632
    assert wire.spatial_body_size(45, 100, 88) == 8 + 45 * (8 + 100 * 88 * 4)


def random_store(rng, spec, n):
    lin = rng.choice(spec.num_voxels, size=n, replace=False)
    keys = np.stack([lin % spec.W, (lin // spec.W) % spec.H, lin // (spec.W * spec.H)], axis=1)
    return VoxelFeatureStore(spec, keys, rng.standard_normal((n, 128)).astype(np.float32))


def random_message(rng):
    kind = int(rng.integers(1, 4))
    pose = Pose(*rng.uniform(-100, 100, 3), rng.uniform(-np.pi, np.pi))
    if kind == wire.KIND_VOXEL:
        payload = random_store(rng, DESK_GRID, int(rng.integers(0, 40)))
        return kind, payload, pose, FULL
    if kind == wire.KIND_SPATIAL:
        chans = rng.choice(128, size=int(rng.integers(1, 6)), replace=False)
        mask = ChannelMask(chans)
        data = rng.standard_normal((128, DESK_GRID.H, DESK_GRID.W)).astype(np.float32)
        data[rng.random(data.shape) < 0.9] = 0
        m = SpatialFeatureMap(data, DESK_GRID, pose)
        return kind, select_channels(m, mask) if rng.random() < 0.5 else m, pose, mask
    dets = [(Box3D(*rng.uniform(-50, 50, 3), *rng.uniform(0.5, 5, 3), rng.uniform(-3, 3)), float(rng.random()))
            for _ in range(int(rng.integers(0, 8)))]
    return kind, dets, pose, FULL


def test_round_trip_1000_random_messages():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        kind, payload, pose, mask = random_message(rng)
        data = wire.encode_message(kind, payload, pose=pose, mask=mask)
        msg = wire.decode_message(data)
        assert (msg.kind, msg.pose, msg.mask) == (kind, pose, mask)
        if kind == wire.KIND_VOXEL:
            assert msg.payload == payload and msg.count == len(payload)
        elif kind == wire.KIND_SPATIAL:
            want = select_channels(payload, mask)
            assert msg.payload.channels == mask.indices
            assert np.array_equal(msg.payload.data, want.data)
        else:
            f32 = [np.float32(list(b.as_array()) + [s]) for b, s in payload]
            got = [np.float32(list(b.as_array()) + [s]) for b, s in msg.payload]
            assert all(np.array_equal(x, y) for x, y in zip(f32, got)) and len(got) == len(f32)
        # bit-exact: re-encoding the decoded message gives the same bytes
        assert wire.encode_message(kind, msg.payload, pose=msg.pose, mask=msg.mask, grid=msg.grid) == data


@given(st.integers(0, 60), st.integers(0, 2**32 - 1))
def test_voxel_logical_size_formula(n, seed):
    s = random_store(np.random.default_rng(seed), DESK_GRID, n)
    assert len(wire.encode_logical(wire.KIND_VOXEL, s)) == 130 + 12 + 516 * n


@given(st.sets(st.integers(0, 127), min_size=1, max_size=20))
def test_spatial_logical_size_formula(chans):
    m = SpatialFeatureMap(np.zeros((128, DESK_GRID.H, DESK_GRID.W)), DESK_GRID)
    mask = ChannelMask(chans)
    assert len(wire.encode_logical(wire.KIND_SPATIAL, m, mask=mask)) == 130 + wire.spatial_body_size(len(chans), 100, 88)


def test_pack_spatial_needs_masked_channels():
    m = select_channels(SpatialFeatureMap(np.zeros((128, 100, 88)), DESK_GRID), MIN)
    with pytest.raises(wire.WireError):
        wire.pack_spatial(m, KEY)
    with pytest.raises(wire.WireError):
        wire.pack_spatial(m, ChannelMask())


def test_corruption_detected():
    rng = np.random.default_rng(1)
    data = bytearray(wire.encode_message(wire.KIND_VOXEL, random_store(rng, DESK_GRID, 20)))
    for pos in (len(data) // 2, len(data) - 6, len(data) - 2):
        bad = bytearray(data)
        bad[pos] ^= 0x55
        with pytest.raises(wire.CorruptMessageError):
            wire.decode_message(bytes(bad))
    with pytest.raises(wire.CorruptMessageError):
        wire.decode_message(bytes(data[:-3]))
    logical = wire.encode_logical(wire.KIND_VOXEL, random_store(rng, DESK_GRID, 3))
    with pytest.raises(wire.CorruptMessageError):
        wire.decode_logical(logical[:-1])
    # header count disagreeing with the body
    tampered = logical[:126] + (5).to_bytes(4, "little") + logical[130:]
    with pytest.raises(wire.CorruptMessageError):
        wire.decode_logical(tampered)


def test_compression_bounds():
    zeros = bytes(1_000_000)
    assert len(wire.compress(zeros)) < 10_000
    noise = os.urandom(1_000_000)
    assert len(wire.compress(noise)) <= len(noise) * 1.001
    for body in (b"", zeros[:10], noise[:5000]):
        assert wire.decompress(wire.compress(body)) == body
    assert wire.compress(zeros) == wire.compress(zeros)  # mtime pinned


def test_size_report():
    assert wire.size_report(b"x" * 10, b"y" * 5, raw_points=125_000).raw_reference_bytes == 2_000_000
    empty = wire.encode_logical(wire.KIND_DETECTIONS, [])
    r = wire.size_report(empty)
    assert r.logical_bytes == wire.HEADER_SIZE and 0.1 < r.ratio < 1.5


def test_wire_size_monotone_in_mask_on_random_maps():
    rng = np.random.default_rng(2)
    for _ in range(100):
        data = rng.random((128, 20, 20)).astype(np.float32)
        data[:, rng.random((20, 20)) < 0.85] = 0
        from fcooper.voxel import VoxelGridSpec
        g = VoxelGridSpec((0, 16), (-8, 8), (-3, 1), (0.8, 0.8, 0.4))
        m = SpatialFeatureMap(data, g)
        sizes = [len(wire.encode_message(wire.KIND_SPATIAL, m, mask=k)) for k in (MIN, KEY, FULL)]
        assert sizes == sorted(sizes)


@pytest.mark.parametrize("name", sorted(GOLDEN))
def test_golden_fixtures(name):
    data = (FIXTURES / name).read_bytes()
    digest, logical_len = GOLDEN[name]
    assert hashlib.sha256(data).hexdigest() == digest
    logical = wire.decompress(data)
    assert len(logical) == logical_len
    # the fixture decodes to exactly the content it was built from
    assert logical == wire.decompress(golden.messages()[name])
    msg = wire.decode_logical(logical)
    if name == "voxel.fcm":
        assert msg.payload == golden.voxel_store() and msg.pose == golden.POSE
    elif name == "spatial_min.fcm":
        assert np.array_equal(msg.payload.data, golden.spatial_map().data[95:100])
    else:
        assert [s for _, s in msg.payload] == [0.75, 0.5]
