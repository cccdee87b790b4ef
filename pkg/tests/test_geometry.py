import math

import numpy as np
import pytest

from fisheye_mod.errors import AngleOutOfFov, BehindCamera, ConfigError, DegeneratePoint, OutsideImageCircle
from fisheye_mod.geometry import (
    FisheyeIntrinsics,
    Pose,
    RectilinearIntrinsics,
    compose,
    invert,
    project_fisheye,
    project_rectilinear,
    rot_x,
    rot_y,
    rot_z,
    transform,
    unproject_fisheye,
    unproject_rectilinear,
)


@pytest.fixture
def linear_fisheye():
    return FisheyeIntrinsics(1000, 1000, 500, 500, 400.0, 0.0, 0.0, 0.0, math.pi / 2)


@pytest.fixture
def desk_fisheye():
    return FisheyeIntrinsics(96, 64, 48.0, 32.0, 30.0, 0.0, -1.0, 0.0, 1.658)


def random_pose(rng):
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    R = np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )
    return Pose(R, rng.normal(scale=5.0, size=3))


def test_on_axis_projects_to_principal_point(desk_fisheye):
    np.testing.assert_array_equal(project_fisheye(desk_fisheye, (0, 0, 5)), [48.0, 32.0])


def test_linear_fisheye_45_degrees(linear_fisheye):
    # independent scalar evaluation: theta = atan(1) = pi/4, rho = 400 * pi/4
    px = project_fisheye(linear_fisheye, (1, 0, 1))
    assert px[0] == pytest.approx(814.1592653589793, abs=1e-9)
    assert px[1] == pytest.approx(500.0, abs=1e-12)


def test_fov_and_degenerate_errors(linear_fisheye):
    project_fisheye(linear_fisheye, (0, 0, 5))
    with pytest.raises(AngleOutOfFov):
        project_fisheye(linear_fisheye, (1, 0, -0.1))
    with pytest.raises(DegeneratePoint):
        project_fisheye(linear_fisheye, (0, 0, 0))


def test_unproject_principal_point(desk_fisheye):
    np.testing.assert_array_equal(unproject_fisheye(desk_fisheye, (48.0, 32.0)), [0, 0, 1])


def test_unproject_linear_45(linear_fisheye):
    ray = unproject_fisheye(linear_fisheye, (500 + 400 * math.pi / 4, 500))
    np.testing.assert_allclose(ray, [math.sqrt(0.5), 0, math.sqrt(0.5)], atol=1e-9)
    with pytest.raises(OutsideImageCircle):
        unproject_fisheye(linear_fisheye, (500 + 400 * math.pi / 2 + 1, 500))


def test_round_trip_random_pixels(desk_fisheye):
    rng = np.random.default_rng(0)
    r = desk_fisheye.radius_max * np.sqrt(rng.uniform(size=1000))
    phi = rng.uniform(0, 2 * np.pi, size=1000)
    for ri, ph in zip(r, phi):
        px = np.array([48 + ri * math.cos(ph), 32 + ri * math.sin(ph)])
        back = project_fisheye(desk_fisheye, unproject_fisheye(desk_fisheye, px))
        assert np.linalg.norm(back - px) < 1e-9


def test_round_trip_exhaustive_grid(desk_fisheye):
    """Newton converges for every in-circle pixel of a 64x64 grid."""
    us = np.linspace(0, 95, 64)
    vs = np.linspace(0, 63, 64)
    grid = np.stack(np.meshgrid(us, vs), axis=-1).reshape(-1, 2)
    rays, valid = desk_fisheye.unproject_many(grid)
    assert valid.sum() > 2000
    back, ok = desk_fisheye.project_many(rays[valid])
    assert ok.all()
    assert np.max(np.linalg.norm(back - grid[valid], axis=1)) < 1e-9


def test_vector_and_scalar_paths_agree(desk_fisheye):
    rng = np.random.default_rng(1)
    pts = rng.normal(size=(200, 3)) + [0, 0, 2]
    px, valid = desk_fisheye.project_many(pts)
    for p, q, ok in zip(pts, px, valid):
        if ok:
            np.testing.assert_allclose(project_fisheye(desk_fisheye, p), q, atol=1e-12)
        else:
            with pytest.raises(AngleOutOfFov):
                project_fisheye(desk_fisheye, p)


def test_radial_symmetry(desk_fisheye):
    rng = np.random.default_rng(2)
    for _ in range(100):
        p = rng.normal(size=3) + [0, 0, 1.5]
        phi = rng.uniform(-np.pi, np.pi)
        try:
            px = project_fisheye(desk_fisheye, p)
        except AngleOutOfFov:
            continue
        px_rot = project_fisheye(desk_fisheye, rot_z(phi) @ p)
        c = np.array([48.0, 32.0])
        expected = c + rot_z(phi)[:2, :2] @ (px - c)
        np.testing.assert_allclose(px_rot, expected, atol=1e-9)


def test_non_monotone_rho_rejected():
    with pytest.raises(ConfigError):
        FisheyeIntrinsics(96, 64, 48, 32, 30.0, 0.0, -10.0, 0.0, 1.6)
    with pytest.raises(ConfigError):
        FisheyeIntrinsics(96, 64, 96, 32, 30.0, 0.0, 0.0, 0.0, 1.6)


def test_rectilinear_projection():
    intr = RectilinearIntrinsics(100, 200, 100.0, 100.0, 50.0, 50.0)
    np.testing.assert_array_equal(project_rectilinear(intr, (0, 0, 10)), [50, 50])
    np.testing.assert_allclose(project_rectilinear(intr, (1, 2, 4)), [75, 100], atol=1e-12)
    with pytest.raises(BehindCamera):
        project_rectilinear(intr, (1, 1, 0))


def test_rectilinear_round_trip_grid():
    intr = RectilinearIntrinsics(96, 64, 48.0, 48.0, 48.0, 32.0)
    for u in np.linspace(0, 95, 64):
        for v in np.linspace(0, 63, 64):
            back = project_rectilinear(intr, unproject_rectilinear(intr, (u, v)))
            assert abs(back[0] - u) < 1e-9 and abs(back[1] - v) < 1e-9


def test_pose_inverse_identity():
    rng = np.random.default_rng(3)
    for _ in range(100):
        P = random_pose(rng)
        I = compose(P, invert(P))
        np.testing.assert_allclose(I.rotation, np.eye(3), atol=1e-9)
        np.testing.assert_allclose(I.translation, 0, atol=1e-9)


def test_pose_group_laws():
    rng = np.random.default_rng(4)
    ident = Pose.identity()
    for _ in range(100):
        a, b, c = random_pose(rng), random_pose(rng), random_pose(rng)
        left = compose(compose(a, b), c)
        right = compose(a, compose(b, c))
        np.testing.assert_allclose(left.rotation, right.rotation, atol=1e-9)
        np.testing.assert_allclose(left.translation, right.translation, atol=1e-9)
        for P in (compose(a, ident), compose(ident, a)):
            np.testing.assert_allclose(P.rotation, a.rotation, atol=1e-9)
            np.testing.assert_allclose(P.translation, a.translation, atol=1e-9)


def test_transform_examples():
    p = np.array([0.3, -1.0, 2.0])
    np.testing.assert_array_equal(transform(Pose.identity(), p), p)
    np.testing.assert_allclose(transform(Pose(rot_y(math.pi / 2)), (0, 0, 1)), [1, 0, 0], atol=1e-12)


def test_pose_rejects_non_rotation():
    with pytest.raises(ConfigError):
        Pose(np.diag([1.0, 1.0, -1.0]))
    with pytest.raises(ConfigError):
        Pose(rot_x(0.1) * 1.01)
