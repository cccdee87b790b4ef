import dataclasses
import math

import numpy as np
import pytest

from fisheye_mod.annotation import (
    LidarScan,
    MotionConfig,
    MotionLabel,
    OrientedBox3,
    SegmentationMask,
    annotate_frame,
    classify_motion,
    convex_hull,
    extract_points_in_box,
    project_object_points,
    rasterize_hull,
)
from fisheye_mod.errors import DegenerateHull, InsufficientTrack, NonMonotonicTime
from fisheye_mod.geometry import Pose, camera_mount, compose, rot_z
from fisheye_mod.synth import (
    PEDESTRIAN_HALF,
    SceneConfig,
    SceneObject,
    desk_fisheye,
    generate_layout,
    generate_scene,
    render_frame,
    samples_from_frames,
)

from oracles import hull_brute_force, point_in_convex_polygon, rasterize_brute


def box(center=(0, 0, 0), half=(1, 1, 1), yaw=0.0, oid="a"):
    return OrientedBox3(np.array(center, float), np.array(half, float), yaw, oid, "pedestrian")


def scan(points, pose=None, t=0.0):
    return LidarScan(t, np.array(points, float).reshape(-1, 3), pose or Pose.identity())


class TestExtract:
    def test_axis_aligned(self):
        pts = extract_points_in_box(scan([(0, 0, 0), (0.5, 0.5, 0.5), (1.5, 0, 0)]), box(half=(0.5, 0.5, 0.5)))
        assert len(pts) == 2

    def test_boundary_inclusive(self):
        assert len(extract_points_in_box(scan([(1, 1, 1), (1, -1, 0)]), box())) == 2

    def test_yawed_box(self):
        b = box(half=(2, 1, 1), yaw=math.pi / 2)
        assert len(extract_points_in_box(scan([(0, 1.5, 0)]), b)) == 1
        assert len(extract_points_in_box(scan([(1.5, 0, 0)]), b)) == 0

    def test_sensor_pose_applied(self):
        s = scan([(0, 0, 0)], Pose(np.eye(3), np.array([10.0, 0, 0])))
        np.testing.assert_array_equal(extract_points_in_box(s, box(center=(10, 0, 0))), [[10, 0, 0]])

    def test_empty_scan(self):
        assert len(extract_points_in_box(scan(np.zeros((0, 3))), box())) == 0


class TestClassify:
    cfg = MotionConfig(v_min=0.3)

    def track(self, centers, times):
        return [(t, box(center=c)) for c, t in zip(centers, times)]

    def test_stationary(self):
        assert classify_motion(self.track([(0, 0, 0)] * 3, [0, 0.5, 1.0]), self.cfg) is MotionLabel.STATIC

    def test_one_metre_per_second(self):
        assert classify_motion(self.track([(0, 0, 0), (1, 0, 0)], [0, 1]), self.cfg) is MotionLabel.MOVING

    def test_small_drift_is_static(self):
        assert classify_motion(self.track([(0, 0, 0), (0.2, 0, 0)], [0, 1]), self.cfg) is MotionLabel.STATIC

    def test_errors(self):
        with pytest.raises(InsufficientTrack):
            classify_motion(self.track([(0, 0, 0)], [0]), self.cfg)
        with pytest.raises(NonMonotonicTime):
            classify_motion(self.track([(0, 0, 0)] * 2, [1, 1]), self.cfg)

    def test_invariant_under_rigid_motion(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            n = int(rng.integers(2, 6))
            times = np.cumsum(rng.uniform(0.05, 0.5, size=n))
            centers = np.cumsum(rng.normal(scale=0.2, size=(n, 3)), axis=0)
            yaw = rng.uniform(-np.pi, np.pi)
            shift = rng.normal(scale=10, size=3)
            moved = centers @ rot_z(yaw).T + shift
            a = classify_motion(self.track(centers, times), self.cfg)
            b = classify_motion(self.track(moved, times), self.cfg)
            assert a is b


class TestProject:
    def test_on_axis_and_behind(self):
        intr = desk_fisheye()
        cam = Pose.identity()
        np.testing.assert_allclose(project_object_points([(0, 0, 3)], cam, intr), [[intr.cx, intr.cy]])
        assert len(project_object_points([(0, 0, -3), (0.01, 0, -1)], cam, intr)) == 0

    def test_round_trip_known_depths(self):
        intr = desk_fisheye()
        cam = camera_mount([1.0, 2.0, 1.2], 0.3, 0.2)
        rng = np.random.default_rng(1)
        px = rng.uniform([20, 10], [76, 54], size=(50, 2))
        depths = rng.uniform(1, 20, size=50)
        rays = np.array([intr.unproject(p) for p in px])
        world = cam.apply(rays * depths[:, None])
        np.testing.assert_allclose(project_object_points(world, cam, intr), px, atol=1e-6)


class TestHull:
    def test_square_with_centre(self):
        hull = convex_hull([(0, 0), (2, 0), (2, 2), (0, 2), (1, 1)])
        assert len(hull) == 4
        assert (1.0, 1.0) not in {tuple(p) for p in hull}

    def test_collinear_raises(self):
        with pytest.raises(DegenerateHull):
            convex_hull([(0, 0), (1, 1), (2, 2)])
        with pytest.raises(DegenerateHull):
            convex_hull([(0, 0), (0, 0), (1, 1)])

    def test_drops_collinear_boundary_points(self):
        hull = convex_hull([(0, 0), (1, 0), (2, 0), (2, 2), (0, 2)])
        assert len(hull) == 4

    @pytest.mark.parametrize("seed", range(10))
    def test_matches_brute_force(self, seed):
        rng = np.random.default_rng(seed)
        r = np.sqrt(rng.uniform(size=100))
        phi = rng.uniform(0, 2 * np.pi, size=100)
        pts = np.stack([r * np.cos(phi), r * np.sin(phi)], axis=1)
        hull = convex_hull(pts)
        assert {tuple(p) for p in hull} == hull_brute_force(pts)

    def test_convex_orientation_and_containment(self):
        rng = np.random.default_rng(11)
        for _ in range(50):
            pts = rng.normal(size=(30, 2)) * rng.uniform(1, 20)
            hull = convex_hull(pts)
            m = len(hull)
            for i in range(m):
                a, b, c = hull[i], hull[(i + 1) % m], hull[(i + 2) % m]
                assert (b[0] - a[0]) * (c[1] - b[1]) - (b[1] - a[1]) * (c[0] - b[0]) > 0
                assert not np.array_equal(a, b)
            for p in pts:
                assert point_in_convex_polygon(p[0], p[1], hull, tol=1e-9)


class TestRasterize:
    def test_full_cover(self):
        m = rasterize_hull(np.array([(-1, -1), (20, -1), (20, 20), (-1, 20)], float), 8, 6)
        assert m.data.all()

    def test_triangle_matches_brute_force(self):
        tri = convex_hull([(0, 0), (4, 0), (0, 4)])
        m = rasterize_hull(tri, 8, 8)
        np.testing.assert_array_equal(m.data, rasterize_brute(tri, 8, 8))
        assert m.count() > 0

    def test_outside(self):
        hull = np.array([(100, 100), (110, 100), (110, 110)], float)
        assert rasterize_hull(convex_hull(hull), 8, 8).count() == 0

    def test_random_hulls_match_brute_force(self):
        rng = np.random.default_rng(12)
        for _ in range(50):
            pts = rng.uniform(-8, 40, size=(int(rng.integers(3, 12)), 2))
            hull = convex_hull(pts)
            np.testing.assert_array_equal(rasterize_hull(hull, 32, 32).data, rasterize_brute(hull, 32, 32))

    def test_pgm_round_trip(self, tmp_path):
        m = rasterize_hull(convex_hull([(1, 1), (6, 1), (3, 5)]), 8, 6)
        m.save_pgm(tmp_path / "m.pgm")
        raw = (tmp_path / "m.pgm").read_bytes()
        assert raw.startswith(b"P5") and set(raw[-48:]) <= {0, 255}
        np.testing.assert_array_equal(SegmentationMask.load_pgm(tmp_path / "m.pgm").data, m.data)


def _scene(seed, **kw):
    base = dict(seed=seed, n_frames=2, dt=0.2, lidar_rays=720, lidar_channels=32)
    base.update(kw)
    cfg = SceneConfig(**base)
    return cfg, generate_scene(cfg)[0]


class TestAnnotateFrame:
    def test_static_only_frame(self):
        cfg, smp = _scene(3, n_vehicles=2, n_pedestrians=2, moving_fraction=0.0)
        anns, mask = annotate_frame(smp, MotionConfig(), cfg.camera, smp.camera_mount)
        assert mask.count() == 0
        assert anns and all(a.label is MotionLabel.STATIC for a in anns)

    def test_moving_pedestrian_matches_silhouette(self):
        # a pedestrian crossing at 1.2 m/s, 4 m in front of the camera on a static ego
        cfg = SceneConfig(n_frames=2, dt=0.2, n_vehicles=0, n_pedestrians=1, ego_speed=0.0, lidar_rays=720, lidar_channels=32)
        layout = generate_layout(cfg)
        walker = SceneObject(
            "ped", "pedestrian", np.array([6.0, -0.5, 0.9]), PEDESTRIAN_HALF, math.pi / 2, np.array([0.0, 1.2, 0.0]), np.array([200.0, 60, 60])
        )
        layout = dataclasses.replace(layout, objects=(walker,))
        smp = samples_from_frames(cfg, layout, [render_frame(cfg, layout, k) for k in range(2)])[0]
        anns, mask = annotate_frame(smp, MotionConfig(), cfg.camera, smp.camera_mount)
        gt = smp.gt_mask.data
        iou = (mask.data & gt).sum() / (mask.data | gt).sum()
        assert iou >= 0.7
        assert anns[0].label is MotionLabel.MOVING

    def test_union_of_moving_hulls(self):
        for seed in range(40):
            cfg, smp = _scene(seed, n_vehicles=2, n_pedestrians=2, moving_fraction=1.0)
            anns, mask = annotate_frame(smp, MotionConfig(), cfg.camera, smp.camera_mount)
            if len(anns) < 2:
                continue
            parts = [rasterize_hull(a.hull, cfg.width, cfg.height) for a in anns]
            union = np.zeros_like(mask.data)
            for p in parts:
                union |= p.data
            np.testing.assert_array_equal(mask.data, union)
            assert mask.count() <= sum(p.count() for p in parts)
            if (parts[0].data & parts[1].data).any():
                break

    def test_missing_track_and_sparse_points_are_skipped(self):
        cfg, smp = _scene(5, n_vehicles=1, n_pedestrians=1, moving_fraction=1.0)
        smp.prev_boxes = smp.prev_boxes[:1]
        skipped = []
        annotate_frame(smp, MotionConfig(min_points=10**6), cfg.camera, smp.camera_mount, skipped)
        reasons = {s.object_id: s.reason for s in skipped}
        assert len(reasons) == 2
        assert any("track" in r for r in reasons.values())
        assert any("min_points" in r for r in reasons.values())

    def test_deterministic(self):
        cfg, smp = _scene(7, moving_fraction=1.0)
        a = annotate_frame(smp, MotionConfig(), cfg.camera, smp.camera_mount)[1]
        b = annotate_frame(smp, MotionConfig(), cfg.camera, smp.camera_mount)[1]
        assert a.data.tobytes() == b.data.tobytes()

    def test_camera_follows_ego(self):
        cfg, smp = _scene(8, ego_speed=2.0, moving_fraction=1.0)
        cam = compose(smp.ego_pose, smp.camera_mount)
        assert cam.translation[0] == pytest.approx(smp.ego_pose.translation[0] + 2.0)
