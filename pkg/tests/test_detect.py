from __future__ import annotations

import math

import numpy as np
import pytest

from fcooper.encoder import EncoderWeights, SpatialFeatureMap, encode_voxels, spatial_features
from fcooper.evalkit.detect import (
    AnchorGrid, Detection, anchor_box, anchor_scores, box_mean, nms, proxy_detect, target_score,
)
from fcooper.evalkit.scene import LidarConfig, SceneConfig, generate_scene
from fcooper.fusion import sff
from fcooper.geom import Box3D, Pose, bev_iou
from fcooper.voxel import DESK_GRID, PAPER_GRID, voxelize


def test_detection_validates_score():
    with pytest.raises(ValueError):
        Detection(Box3D(0, 0, 0, 1, 1, 1, 0), 1.5)


def test_anchor_grid():
    g = AnchorGrid()
    assert g.diagonal == pytest.approx(math.hypot(3.9, 1.6))
    # (0.8 + 0.8) / 0.2 = 8 cells each side across, (1.95 + 0.8) / 0.2 -> 13 along
    assert g.footprint(0.0, 0.2) == (17, 27)
    assert g.footprint(math.pi / 2, 0.2) == (27, 17)
    with pytest.raises(ValueError):
        AnchorGrid(stride=0)


def test_box_mean_matches_naive():
    rng = np.random.default_rng(0)
    e = rng.random((13, 17))
    got = box_mean(e, 5, 3)
    p = np.pad(e, ((2, 2), (1, 1)))
    naive = np.array([[p[r:r + 5, c:c + 3].mean() for c in range(17)] for r in range(13)])
    assert np.allclose(got, naive)


def test_zero_map_has_no_detections():
    m = SpatialFeatureMap(np.zeros((128, 100, 88)), DESK_GRID)
    assert proxy_detect(m) == []


def test_single_dense_object_is_detected():
    truth = Box3D(15.0, 2.0, 0.78, 3.9, 1.6, 1.56, 0.0)
    cfg = SceneConfig([Pose(0, 0, 1.73, 0), Pose(30, 2, 1.73, math.pi)], [truth], vehicle_bodies=False,
                      lidar=LidarConfig(beams=64, azimuth_res_deg=0.1))
    sc = generate_scene(cfg, 0)
    w = EncoderWeights.generate(0)
    maps = [spatial_features(encode_voxels(PAPER_GRID, voxelize(PAPER_GRID, c), w), w, p)
            for c, p in zip(sc.clouds, cfg.vehicles)]
    fused = sff(maps[0], maps[1])
    t0 = sc.truths_in(0)[0]
    dets = proxy_detect(fused)
    assert any(bev_iou(d.box, t0) >= 0.5 for d in dets)
    assert target_score(fused, t0) > 0.5


def test_nms():
    boxes = [Box3D(0, 0, 0, 4, 2, 1, 0), Box3D(0.2, 0, 0, 4, 2, 1, 0), Box3D(10, 0, 0, 4, 2, 1, 0)]
    assert nms(boxes, [0.5, 0.9, 0.1]) == [1, 2]
    assert nms(boxes, [0.5, 0.5, 0.5]) == [0, 2]
    rotated = [Box3D(0, 0, 0, 4, 2, 1, 0.3), Box3D(0.2, 0, 0, 4, 2, 1, 0.3)]
    assert nms(rotated, [0.4, 0.6]) == [1]
    assert nms([], []) == []
    arr = np.array([b.as_array() for b in boxes])
    assert nms(arr, [0.5, 0.9, 0.1]) == [1, 2]


def test_detections_above_threshold_and_in_order():
    rng = np.random.default_rng(2)
    data = np.zeros((128, 100, 88), dtype=np.float32)
    data[:, 40:45, 20:30] = rng.random((128, 5, 10))
    m = SpatialFeatureMap(data, DESK_GRID)
    dets = proxy_detect(m)
    assert dets and all(d.score > 0.5 for d in dets)
    assert [d.score for d in dets] == sorted((d.score for d in dets), reverse=True)
    s = anchor_scores(m)
    assert s.shape == (2, 100, 88) and np.all((s >= 0) & (s <= 1))
    b = anchor_box(m, AnchorGrid(), 0, 42, 25)
    assert (b.cx, b.cy) == pytest.approx((25.5 * 0.8, -40 + 42.5 * 0.8))
    strided = anchor_scores(m, AnchorGrid(stride=2))
    assert not strided[:, 1::2].any() and np.array_equal(strided[:, ::2, ::2], s[:, ::2, ::2])


def test_scores_monotone_under_maxout():
    rng = np.random.default_rng(3)
    for _ in range(20):
        a = rng.random((128, 100, 88)).astype(np.float32) * (rng.random((100, 88)) < 0.05)
        b = rng.random((128, 100, 88)).astype(np.float32) * (rng.random((100, 88)) < 0.05)
        sa, sb = anchor_scores(SpatialFeatureMap(a, DESK_GRID)), anchor_scores(SpatialFeatureMap(b, DESK_GRID))
        sf = anchor_scores(SpatialFeatureMap(np.maximum(a, b), DESK_GRID))
        assert np.all(sf >= np.maximum(sa, sb) - 1e-6)
