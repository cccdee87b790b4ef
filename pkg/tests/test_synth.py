import dataclasses
import filecmp
import math
import os

import numpy as np
import pytest

from fisheye_mod.errors import ConfigError, FmodError
from fisheye_mod.geometry import compose
from fisheye_mod.synth import (
    SceneConfig,
    SceneObject,
    desk_rectilinear,
    generate_frames,
    generate_layout,
    generate_scene,
    lidar_directions,
    render_frame,
)
from fisheye_mod.dataset import write_scene

from oracles import ray_hits_box_faces


@pytest.mark.parametrize(
    "kw",
    [dict(n_frames=1), dict(dt=0.0), dict(moving_fraction=1.5), dict(n_vehicles=-1), dict(stride=6), dict(lidar_rays=0)],
)
def test_invalid_config(kw):
    with pytest.raises(ConfigError):
        SceneConfig(**kw)


def test_config_dict_round_trip():
    cfg = SceneConfig(seed=9, camera=desk_rectilinear(), dt=0.1)
    assert SceneConfig.from_dict(cfg.to_dict()) == cfg
    assert SceneConfig.from_dict({"camera": "rectilinear"}).camera.model == "rectilinear"
    with pytest.raises(ConfigError):
        SceneConfig.from_dict({"colour": 3})


def test_static_scene_masks_are_empty():
    for i in range(3):
        for s in generate_scene(SceneConfig(moving_fraction=0.0, n_frames=3), i):
            assert s.gt_mask.count() == 0


def test_sample_pairing():
    cfg = SceneConfig(n_frames=5, stride=2)
    samples = generate_scene(cfg)
    assert [s.frame_index for s in samples] == [2, 3, 4]
    for s in samples:
        assert s.timestamp - s.prev_timestamp == pytest.approx(2 * cfg.dt)
        assert s.image_t.shape == s.image_t_minus_1.shape == (cfg.height, cfg.width, 3)
        assert s.gt_mask.data.shape == (cfg.height, cfg.width)


def test_same_seed_identical_files(tmp_path):
    cfg = SceneConfig(seed=5, n_frames=3)
    for d in ("a", "b"):
        write_scene(cfg, 2, "s", str(tmp_path / d), "train")
    names = sorted(os.listdir(tmp_path / "a" / "train" / "s"))
    assert len(names) == 12
    match, mismatch, errors = filecmp.cmpfiles(tmp_path / "a/train/s", tmp_path / "b/train/s", names, shallow=False)
    assert not mismatch and not errors


def test_seed_and_index_change_scene():
    a = generate_layout(SceneConfig(seed=1), 0)
    b = generate_layout(SceneConfig(seed=2), 0)
    c = generate_layout(SceneConfig(seed=1), 1)
    assert not np.array_equal(a.objects[0].center0, b.objects[0].center0)
    assert not np.array_equal(a.objects[0].center0, c.objects[0].center0)


def test_moving_count_follows_fraction():
    layout = generate_layout(SceneConfig(n_vehicles=3, n_pedestrians=2, moving_fraction=0.4))
    assert sum(o.moving for o in layout.objects) == 2


def _single_cube_scene(camera=None):
    kw = dict(n_frames=2, dt=0.2, n_vehicles=0, n_pedestrians=1, ego_speed=0.0, lidar_rays=180, lidar_channels=8)
    if camera is not None:
        kw["camera"] = camera
    cfg = SceneConfig(**kw)
    cube = SceneObject(
        "cube", "vehicle", np.array([6.0, 0.0, 0.75]), np.array([0.75, 0.75, 0.75]), 0.3, np.array([0.0, 1.0, 0.0]), np.array([200.0, 50, 50])
    )
    layout = dataclasses.replace(generate_layout(cfg), objects=(cube,))
    return cfg, layout, cube


@pytest.mark.parametrize("camera", [None, desk_rectilinear()], ids=["fisheye", "rectilinear"])
def test_gt_mask_matches_brute_force_ray_cast(camera):
    cfg, layout, cube = _single_cube_scene(camera)
    frame = render_frame(cfg, layout, 1)
    box = frame.boxes[0]
    cam = compose(frame.ego_pose, layout.camera_mount)
    expected = np.zeros((cfg.height, cfg.width), dtype=np.uint8)
    for v in range(cfg.height):
        for u in range(cfg.width):
            try:
                ray = cfg.camera.unproject((u + 0.5, v + 0.5))
            except FmodError:
                continue
            d = cam.rotation @ ray
            if ray_hits_box_faces(cam.translation, d, box.center, box.half_extents, box.yaw) is not None:
                expected[v, u] = 1
    assert expected.sum() > 20
    np.testing.assert_array_equal(frame.gt_mask.data, expected)


def test_hit_pixels_reproject_to_their_centres():
    cfg, layout, _ = _single_cube_scene()
    frame = render_frame(cfg, layout, 0)
    cam = compose(frame.ego_pose, layout.camera_mount)
    box = frame.boxes[0]
    vs, us = np.nonzero(frame.gt_mask.data)
    for u, v in zip(us, vs):
        ray = cfg.camera.unproject((u + 0.5, v + 0.5))
        t = ray_hits_box_faces(cam.translation, cam.rotation @ ray, box.center, box.half_extents, box.yaw)
        p_cam = ray * t
        np.testing.assert_allclose(cfg.camera.project(p_cam), (u + 0.5, v + 0.5), atol=1e-6)


def test_lidar_points_lie_on_surfaces():
    cfg = SceneConfig(seed=4, n_frames=2, lidar_rays=180, lidar_channels=12)
    _, frames = generate_frames(cfg)
    for fr in frames:
        pts = fr.lidar.world_points()
        assert len(pts) > 100
        gap = np.abs(pts[:, 2])
        for b in fr.boxes:
            q = np.abs((pts - b.center) @ b.rotation) - b.half_extents
            inside = np.all(q <= 1e-6, axis=1)
            surf = np.where(inside, np.abs(q.max(axis=1)), np.inf)
            gap = np.minimum(gap, surf)
        assert gap.max() < 1e-6


def test_lidar_fan_shape():
    cfg = SceneConfig(lidar_rays=36, lidar_channels=4)
    d = lidar_directions(cfg)
    assert d.shape == (144, 3)
    np.testing.assert_allclose(np.linalg.norm(d, axis=1), 1.0)
    el = np.degrees(np.arcsin(d[:, 2]))
    assert el.min() == pytest.approx(-30) and el.max() == pytest.approx(5)


def test_default_moving_pixel_fraction_small():
    fractions = [s.gt_mask.data.mean() for i in range(20) for s in generate_scene(SceneConfig(), i)]
    avg = float(np.mean(fractions))
    assert 0.0 < avg <= 0.05


def test_ego_arc_path():
    cfg = SceneConfig(ego_speed=2.0, ego_yaw_rate=0.5)
    layout = generate_layout(cfg)
    pose = layout.ego_pose(1.0, cfg)
    r = 2.0 / 0.5
    np.testing.assert_allclose(pose.translation, [r * math.sin(0.5), r * (1 - math.cos(0.5)), 0], atol=1e-12)
    # speed along the arc equals ego_speed
    p2 = layout.ego_pose(1.0 + 1e-6, cfg).translation
    assert np.linalg.norm(p2 - pose.translation) / 1e-6 == pytest.approx(2.0, rel=1e-5)
