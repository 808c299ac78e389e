from __future__ import annotations

import math

import numpy as np
import pytest

from fcooper.evalkit.scene import (
    SCENARIOS, LidarConfig, SceneConfig, generate_scene, occlusion_scene, ray_box_distances, visible_fraction,
)
from fcooper.geom import Box3D, Pose
from fcooper.pipeline import bundled_scenes, load_scene
from fcooper.voxel import PAPER_GRID, voxelize

LIDAR = LidarConfig(beams=16, azimuth_res_deg=0.4)


def test_config_validation_and_json(tmp_path):
    with pytest.raises(ValueError):
        SceneConfig([Pose()], [])
    cfg = occlusion_scene(4)
    cfg.save(tmp_path / "s.json")
    again = SceneConfig.load(tmp_path / "s.json")
    assert again.to_dict() == cfg.to_dict()
    with pytest.raises(ValueError):
        SceneConfig.from_dict({"vehicles": []})
    with pytest.raises(ValueError):
        SceneConfig.from_dict({"objects": []})


def test_ray_box_distances():
    box = Box3D(10, 0, 0, 2, 2, 2, 0)
    d = ray_box_distances(np.array([[1.0, 0, 0], [-1.0, 0, 0], [0, 1.0, 0]]), np.zeros(3), box)
    assert d[0] == pytest.approx(9.0) and np.isinf(d[1]) and np.isinf(d[2])
    assert np.isinf(ray_box_distances(np.array([[1.0, 0, 0]]), np.array([10.0, 0, 0]), box)).all()


def test_single_box_seen_by_both():
    b = Box3D(15, 0, 0.78, 3.9, 1.6, 1.56, 0)
    cfg = SceneConfig([Pose(0, 0, 1.73, 0), Pose(15, 15, 1.73, -math.pi / 2)], [b], LIDAR, vehicle_bodies=False)
    sc = generate_scene(cfg, 0)
    for v in range(2):
        assert np.count_nonzero(sc.hit_ids[v] == 0) > 0
        # returns lie on the box surface (within the range noise)
        pts = sc.clouds[v][:, :3].astype(np.float64)
        inside = sc.truths_in(v)[0]
        grown = Box3D(inside.cx, inside.cy, inside.cz, inside.l + 0.1, inside.w + 0.1, inside.h + 0.1, inside.yaw)
        assert grown.contains(pts).all()


def test_occluded_box_hidden_from_one_car():
    a = Box3D(10, 0, 0.78, 3.9, 1.6, 1.56, 0)
    b = Box3D(18, 0, 0.78, 3.9, 1.6, 1.56, 0)  # straight behind a seen from the origin
    cfg = SceneConfig([Pose(0, 0, 1.0, 0), Pose(18, 15, 1.73, -math.pi / 2)], [a, b], LIDAR, vehicle_bodies=False)
    sc = generate_scene(cfg, 0)
    # counting oracle: b's points from car 1 are only those rays that miss a
    c1 = sc.clouds[0][:, :3]
    dirs = c1 / np.linalg.norm(c1, axis=1, keepdims=True)
    hits_b = sc.hit_ids[0] == 1
    a_local = sc.truths_in(0)[0]
    blocked = np.isfinite(ray_box_distances(dirs[hits_b].astype(np.float64), np.zeros(3), a_local))
    assert not blocked.any()
    assert np.count_nonzero(hits_b) < 0.1 * np.count_nonzero(sc.hit_ids[0] == 0)
    assert np.count_nonzero(sc.hit_ids[1] == 1) > 50


def test_same_seed_same_clouds():
    cfg = occlusion_scene(2)
    a, b = generate_scene(cfg, 5), generate_scene(cfg, 5)
    assert all(np.array_equal(x, y) for x, y in zip(a.clouds, b.clouds))
    assert occlusion_scene(2).to_dict() == cfg.to_dict()


def test_occlusion_scene_visibility_band():
    for seed in range(3):
        cfg = occlusion_scene(seed)
        target, blockers = cfg.objects[0], cfg.objects[1:]
        bodies = [cfg.body(0), cfg.body(1)]
        fr = visible_fraction(cfg.vehicles[0], target, blockers + bodies[1:], cfg.lidar)
        fs = visible_fraction(cfg.vehicles[1], target, blockers + bodies[:1], cfg.lidar)
        assert 0.35 <= fr <= 0.8 and 0.35 <= fs <= 0.8


def test_bundled_scenes_are_sparse():
    assert set(bundled_scenes()) == set(SCENARIOS)
    for name in bundled_scenes():
        cfg = load_scene(name)
        sc = generate_scene(cfg, 0)
        for cloud in sc.clouds:
            n = len(voxelize(PAPER_GRID, cloud))
            assert 0 < n / PAPER_GRID.num_voxels < 0.05
    with pytest.raises(FileNotFoundError):
        load_scene("no-such-scene")
