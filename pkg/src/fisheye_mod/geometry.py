"""Camera models and rigid-motion algebra.

Conventions used everywhere in the package:

* camera frame: z forward, x right, y down;
* world frame: z up, ground plane at z = 0;
* a :class:`Pose` maps points from its local frame into the world frame.

Points and pixels are plain ``float64`` numpy arrays of shape ``(3,)`` and
``(2,)``.  The ``*_many`` variants take ``(N, 3)`` / ``(N, 2)`` arrays and
return a validity mask instead of raising, which is what the renderer needs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .errors import (
    AngleOutOfFov,
    BehindCamera,
    ConfigError,
    DegeneratePoint,
    NoConvergence,
    OutsideImageCircle,
)

NEWTON_MAX_ITER = 50
NEWTON_TOL = 1e-12
_MONOTONE_GRID = 1024


def _as_vec(p, n: int) -> np.ndarray:
    a = np.asarray(p, dtype=np.float64).reshape(-1)
    if a.shape != (n,):
        raise ValueError(f"expected a {n}-vector, got shape {np.shape(p)}")
    if not np.all(np.isfinite(a)):
        raise ValueError("non-finite coordinates")
    return a


@dataclass(frozen=True)
class FisheyeIntrinsics:
    """Radially symmetric fisheye with ``rho(theta) = k1 t + k2 t^2 + k3 t^3 + k4 t^4``."""

    width: int
    height: int
    cx: float
    cy: float
    k1: float
    k2: float
    k3: float
    k4: float
    theta_max: float

    model = "fisheye"

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise ConfigError("image size must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ConfigError("principal point outside image")
        if not (0 < self.theta_max <= math.pi):
            raise ConfigError("theta_max must lie in (0, pi]")
        grid = np.linspace(0.0, self.theta_max, _MONOTONE_GRID)
        if not np.all(self.drho(grid) > 0):
            raise ConfigError("rho(theta) is not strictly increasing on [0, theta_max]")

    def rho(self, theta):
        t = np.asarray(theta, dtype=np.float64)
        return ((self.k4 * t + self.k3) * t + self.k2) * t * t + self.k1 * t

    def drho(self, theta):
        t = np.asarray(theta, dtype=np.float64)
        return ((4 * self.k4 * t + 3 * self.k3) * t + 2 * self.k2) * t + self.k1

    @property
    def radius_max(self) -> float:
        return float(self.rho(self.theta_max))

    def project(self, p) -> np.ndarray:
        return project_fisheye(self, p)

    def unproject(self, px) -> np.ndarray:
        return unproject_fisheye(self, px)

    def project_many(self, pts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Project ``(N, 3)`` camera-frame points; invalid rows are NaN."""
        pts = np.asarray(pts, dtype=np.float64).reshape(-1, 3)
        x, y, z = pts[:, 0], pts[:, 1], pts[:, 2]
        r_xy = np.hypot(x, y)
        norm = np.sqrt(r_xy**2 + z**2)
        theta = np.arctan2(r_xy, z)
        valid = (norm >= 1e-12) & (theta <= self.theta_max)
        rho = self.rho(theta)
        with np.errstate(invalid="ignore", divide="ignore"):
            scale = np.where(r_xy > 0, rho / np.where(r_xy > 0, r_xy, 1.0), 0.0)
        out = np.stack([self.cx + scale * x, self.cy + scale * y], axis=1)
        out[~valid] = np.nan
        return out, valid

    def unproject_many(self, px: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Unit rays for ``(N, 2)`` pixels; rows outside the image circle are NaN."""
        px = np.asarray(px, dtype=np.float64).reshape(-1, 2)
        du = px[:, 0] - self.cx
        dv = px[:, 1] - self.cy
        r = np.hypot(du, dv)
        valid = r <= self.radius_max
        theta = _solve_theta(self, np.where(valid, r, 0.0))
        s = np.sin(theta)
        with np.errstate(invalid="ignore", divide="ignore"):
            cu = np.where(r > 0, du / np.where(r > 0, r, 1.0), 0.0)
            cv = np.where(r > 0, dv / np.where(r > 0, r, 1.0), 0.0)
        rays = np.stack([s * cu, s * cv, np.cos(theta)], axis=1)
        rays[~valid] = np.nan
        return rays, valid

    def to_dict(self) -> dict[str, Any]:
        return {"model": self.model, **{k: getattr(self, k) for k in _FISHEYE_FIELDS}}


_FISHEYE_FIELDS = ("width", "height", "cx", "cy", "k1", "k2", "k3", "k4", "theta_max")


@dataclass(frozen=True)
class RectilinearIntrinsics:
    width: int
    height: int
    fx: float
    fy: float
    cx: float
    cy: float

    model = "rectilinear"

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise ConfigError("image size must be positive")
        if self.fx <= 0 or self.fy <= 0:
            raise ConfigError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ConfigError("principal point outside image")

    def project(self, p) -> np.ndarray:
        return project_rectilinear(self, p)

    def unproject(self, px) -> np.ndarray:
        return unproject_rectilinear(self, px)

    def project_many(self, pts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        pts = np.asarray(pts, dtype=np.float64).reshape(-1, 3)
        valid = pts[:, 2] > 1e-6
        z = np.where(valid, pts[:, 2], 1.0)
        out = np.stack([self.cx + self.fx * pts[:, 0] / z, self.cy + self.fy * pts[:, 1] / z], axis=1)
        out[~valid] = np.nan
        return out, valid

    def unproject_many(self, px: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        px = np.asarray(px, dtype=np.float64).reshape(-1, 2)
        d = np.stack(
            [(px[:, 0] - self.cx) / self.fx, (px[:, 1] - self.cy) / self.fy, np.ones(len(px))], axis=1
        )
        return d / np.linalg.norm(d, axis=1, keepdims=True), np.ones(len(px), dtype=bool)

    def to_dict(self) -> dict[str, Any]:
        return {"model": self.model, **{k: getattr(self, k) for k in _RECT_FIELDS}}


_RECT_FIELDS = ("width", "height", "fx", "fy", "cx", "cy")

CameraIntrinsics = FisheyeIntrinsics | RectilinearIntrinsics


def intrinsics_from_dict(d: dict[str, Any]) -> CameraIntrinsics:
    model = d.get("model", "fisheye")
    if model == "fisheye":
        return FisheyeIntrinsics(**{k: d[k] for k in _FISHEYE_FIELDS})
    if model == "rectilinear":
        return RectilinearIntrinsics(**{k: d[k] for k in _RECT_FIELDS})
    raise ConfigError(f"unknown camera model {model!r}")


def _solve_theta(intr: FisheyeIntrinsics, r: np.ndarray) -> np.ndarray:
    """Vectorised Newton solve of ``rho(theta) = r`` on ``[0, theta_max]``."""
    theta = np.clip(r / intr.k1, 0.0, intr.theta_max)
    for _ in range(NEWTON_MAX_ITER):
        f = intr.rho(theta) - r
        if np.all(np.abs(f) < NEWTON_TOL):
            return theta
        theta = np.clip(theta - f / intr.drho(theta), 0.0, intr.theta_max)
    # one last check after the final update
    if np.all(np.abs(intr.rho(theta) - r) < NEWTON_TOL):
        return theta
    raise NoConvergence("Newton iteration on rho(theta) = r did not converge")


def project_fisheye(intr: FisheyeIntrinsics, p) -> np.ndarray:
    x, y, z = _as_vec(p, 3)
    r_xy = math.hypot(x, y)
    if math.hypot(r_xy, z) < 1e-12:
        raise DegeneratePoint("cannot project a point at the camera centre")
    theta = math.atan2(r_xy, z)
    if theta > intr.theta_max:
        raise AngleOutOfFov(f"incidence angle {theta:.6g} exceeds theta_max {intr.theta_max:.6g}")
    if r_xy == 0.0:
        return np.array([intr.cx, intr.cy])
    s = float(intr.rho(theta)) / r_xy
    return np.array([intr.cx + s * x, intr.cy + s * y])


def unproject_fisheye(intr: FisheyeIntrinsics, px) -> np.ndarray:
    u, v = _as_vec(px, 2)
    du, dv = u - intr.cx, v - intr.cy
    r = math.hypot(du, dv)
    if r > intr.radius_max:
        raise OutsideImageCircle(f"radius {r:.6g} beyond image circle {intr.radius_max:.6g}")
    theta = float(_solve_theta(intr, np.array([r]))[0])
    if r == 0.0:
        return np.array([0.0, 0.0, 1.0])
    s = math.sin(theta)
    return np.array([s * du / r, s * dv / r, math.cos(theta)])


def project_rectilinear(intr: RectilinearIntrinsics, p) -> np.ndarray:
    x, y, z = _as_vec(p, 3)
    if z <= 1e-6:
        raise BehindCamera(f"z = {z:.6g} is not in front of the camera")
    return np.array([intr.cx + intr.fx * x / z, intr.cy + intr.fy * y / z])


def unproject_rectilinear(intr: RectilinearIntrinsics, px) -> np.ndarray:
    rays, _ = intr.unproject_many(_as_vec(px, 2)[None])
    return rays[0]


@dataclass(frozen=True)
class Pose:
    """Rigid transform ``p_world = rotation @ p_local + translation``."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        if not np.allclose(R.T @ R, np.eye(3), rtol=0, atol=1e-9):
            raise ConfigError("rotation is not orthonormal")
        if abs(np.linalg.det(R) - 1.0) > 1e-9:
            raise ConfigError("rotation has det != +1")
        if not np.all(np.isfinite(t)):
            raise ConfigError("translation not finite")
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> Pose:
        return cls()

    def apply(self, pts: np.ndarray) -> np.ndarray:
        """Transform ``(N, 3)`` points."""
        return np.asarray(pts, dtype=np.float64) @ self.rotation.T + self.translation

    def to_dict(self) -> dict[str, Any]:
        return {"rotation": self.rotation.tolist(), "translation": self.translation.tolist()}

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> Pose:
        return cls(np.array(d["rotation"]), np.array(d["translation"]))


def compose(a: Pose, b: Pose) -> Pose:
    return Pose(a.rotation @ b.rotation, a.rotation @ b.translation + a.translation)


def invert(a: Pose) -> Pose:
    Rt = a.rotation.T
    return Pose(Rt, -Rt @ a.translation)


def transform(a: Pose, p) -> np.ndarray:
    return a.rotation @ _as_vec(p, 3) + a.translation


def rot_x(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[1, 0, 0], [0, c, -s], [0, s, c]], dtype=np.float64)


def rot_y(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]], dtype=np.float64)


def rot_z(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]], dtype=np.float64)


# camera axes (x right, y down, z forward) expressed in a z-up body frame
# (x forward, y left, z up)
CAMERA_TO_BODY = np.array([[0.0, 0.0, 1.0], [-1.0, 0.0, 0.0], [0.0, -1.0, 0.0]])


def camera_mount(position, yaw: float = 0.0, pitch_down: float = 0.0) -> Pose:
    """Pose of a camera on a z-up body, looking along body +x rotated by ``yaw``
    and tilted towards the ground by ``pitch_down``."""
    R = rot_z(yaw) @ rot_y(pitch_down) @ CAMERA_TO_BODY
    return Pose(R, np.asarray(position, dtype=np.float64))
