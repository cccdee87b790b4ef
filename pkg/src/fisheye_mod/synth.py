"""Deterministic synthetic parking scenes.

A scene is an ego vehicle driving slowly through a lot populated with
box-shaped vehicles and pedestrians, some of which move at constant
velocity.  Frames are rendered by casting one ray per pixel centre through
the camera model; LiDAR is a fixed azimuth/elevation fan cast against the
same geometry.  The ground-truth mask of a frame is the exact set of pixels
whose nearest hit is a moving object.

Everything is driven by ``np.random.SeedSequence([seed, scene_index])`` so a
scene renders bit-identically no matter which process or order produced it.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Any

import numpy as np

from .annotation import LidarScan, OrientedBox3, SegmentationMask
from .errors import ConfigError
from .geometry import (
    CameraIntrinsics,
    FisheyeIntrinsics,
    Pose,
    RectilinearIntrinsics,
    camera_mount,
    compose,
    intrinsics_from_dict,
    rot_z,
)

SKY = np.array([170.0, 200.0, 235.0])
FACE_SHADE = np.array([0.8, 0.65, 1.0])  # box faces hit along local x, y, z
LIDAR_MAX_RANGE = 40.0
GROUND_MAX_RANGE = 1000.0  # beyond this the ground counts as horizon/sky

PEDESTRIAN_HALF = np.array([0.3, 0.3, 0.9])
VEHICLE_HALF = np.array([2.2, 0.9, 0.75])


def desk_fisheye(width: int = 96, height: int = 64) -> FisheyeIntrinsics:
    """Default ~190 degree fisheye whose image circle roughly spans the width."""
    s = width / 96.0
    return FisheyeIntrinsics(width, height, width / 2, height / 2, 30.0 * s, 0.0, -1.0 * s, 0.0, 1.658)


def desk_rectilinear(width: int = 96, height: int = 64) -> RectilinearIntrinsics:
    """Pinhole camera with a 90 degree horizontal field of view."""
    f = width / 2
    return RectilinearIntrinsics(width, height, f, f, width / 2, height / 2)


@dataclass(frozen=True)
class SceneConfig:
    seed: int = 0
    n_frames: int = 6
    dt: float = 1 / 30
    n_vehicles: int = 2
    n_pedestrians: int = 2
    moving_fraction: float = 0.4
    camera: CameraIntrinsics = field(default_factory=desk_fisheye)
    ego_speed: float = 1.0
    ego_yaw_rate: float = 0.0
    lidar_rays: int = 360  # azimuth steps per channel
    lidar_channels: int = 16
    stride: int = 1  # frame gap between the two images of a sample
    camera_height: float = 1.0
    camera_pitch: float = math.radians(15)

    def __post_init__(self):
        if self.n_frames < 2:
            raise ConfigError("n_frames must be at least 2")
        if self.dt <= 0:
            raise ConfigError("dt must be positive")
        if not 0.0 <= self.moving_fraction <= 1.0:
            raise ConfigError("moving_fraction must lie in [0, 1]")
        if self.n_vehicles < 0 or self.n_pedestrians < 0:
            raise ConfigError("object counts must be non-negative")
        if not 1 <= self.stride < self.n_frames:
            raise ConfigError("stride must be in [1, n_frames)")
        if self.lidar_rays < 1 or self.lidar_channels < 1:
            raise ConfigError("LiDAR needs at least one ray and one channel")

    @property
    def width(self) -> int:
        return self.camera.width

    @property
    def height(self) -> int:
        return self.camera.height

    def to_dict(self) -> dict[str, Any]:
        d = dataclasses.asdict(self)
        d["camera"] = self.camera.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> SceneConfig:
        d = dict(d)
        if "camera" in d:
            cam = d["camera"]
            if isinstance(cam, str):
                size = (d.pop("width", 96), d.pop("height", 64))
                cam = {"fisheye": desk_fisheye, "rectilinear": desk_rectilinear}[cam](*size)
            else:
                cam = intrinsics_from_dict(cam)
            d["camera"] = cam
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown SceneConfig fields: {sorted(unknown)}")
        return cls(**d)

    def content_hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


@dataclass(frozen=True)
class SceneObject:
    object_id: str
    class_tag: str
    center0: np.ndarray
    half_extents: np.ndarray
    yaw: float
    velocity: np.ndarray
    albedo: np.ndarray

    @property
    def moving(self) -> bool:
        return bool(np.any(self.velocity != 0))

    def box_at(self, t: float) -> OrientedBox3:
        return OrientedBox3(self.center0 + self.velocity * t, self.half_extents, self.yaw, self.object_id, self.class_tag, self.velocity)


@dataclass(frozen=True)
class SceneLayout:
    scene_id: str
    objects: tuple[SceneObject, ...]
    camera_mount: Pose  # camera -> ego body
    lidar_mount: Pose  # LiDAR sensor -> ego body
    texture_key: int

    def ego_pose(self, t: float, cfg: SceneConfig) -> Pose:
        w = cfg.ego_yaw_rate
        if abs(w) < 1e-12:
            pos = np.array([cfg.ego_speed * t, 0.0, 0.0])
        else:
            radius = cfg.ego_speed / w
            pos = np.array([radius * math.sin(w * t), radius * (1 - math.cos(w * t)), 0.0])
        return Pose(rot_z(w * t), pos)


@dataclass
class Frame:
    frame_index: int
    timestamp: float
    image: np.ndarray  # H x W x 3 uint8
    gt_mask: SegmentationMask
    lidar: LidarScan
    ego_pose: Pose
    boxes: list[OrientedBox3]
    hit_ids: np.ndarray  # per-pixel index into layout.objects, -1 ground, -2 sky, -3 outside


@dataclass
class SceneSample:
    """A frame pair (t, t - stride) plus everything the annotator needs."""

    scene_id: str
    frame_index: int
    timestamp: float
    prev_timestamp: float
    image_t: np.ndarray
    image_t_minus_1: np.ndarray
    lidar: LidarScan
    ego_pose: Pose
    boxes: list[OrientedBox3]
    prev_boxes: list[OrientedBox3]
    gt_mask: SegmentationMask
    camera_mount: Pose


def scene_rng(seed: int, scene_index: int, stream: int = 0) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, scene_index, stream]))


def generate_layout(cfg: SceneConfig, scene_index: int = 0, scene_id: str | None = None) -> SceneLayout:
    rng = scene_rng(cfg.seed, scene_index)
    classes = ["vehicle"] * cfg.n_vehicles + ["pedestrian"] * cfg.n_pedestrians
    n = len(classes)
    n_moving = int(round(cfg.moving_fraction * n))
    moving = set(rng.permutation(n)[:n_moving].tolist()) if n else set()

    objects: list[SceneObject] = []
    placed: list[tuple[np.ndarray, float]] = []
    for i, cls in enumerate(classes):
        half = (VEHICLE_HALF if cls == "vehicle" else PEDESTRIAN_HALF) * rng.uniform(0.85, 1.15, size=3)
        radius = float(np.hypot(half[0], half[1]))
        for _ in range(200):
            xy = np.array([rng.uniform(5.0, 15.0), rng.uniform(-8.0, 8.0)])
            if all(np.linalg.norm(xy - q) > radius + r + 0.3 for q, r in placed):
                break
        placed.append((xy, radius))
        if i in moving:
            speed = rng.uniform(0.8, 1.6) if cls == "pedestrian" else rng.uniform(1.5, 3.0)
            heading = rng.uniform(-math.pi, math.pi)
            velocity = speed * np.array([math.cos(heading), math.sin(heading), 0.0])
            yaw = heading
        else:
            velocity = np.zeros(3)
            yaw = rng.uniform(-math.pi, math.pi)
        albedo = rng.uniform(40, 235, size=3)
        center = np.array([xy[0], xy[1], half[2]])
        objects.append(SceneObject(f"obj{i:02d}", cls, center, half, float(yaw), velocity, albedo))

    mount = camera_mount([2.0, 0.0, cfg.camera_height], 0.0, cfg.camera_pitch)
    lidar = Pose(np.eye(3), np.array([0.5, 0.0, 1.8]))
    return SceneLayout(
        scene_id or f"scene_{scene_index:04d}",
        tuple(objects),
        mount,
        lidar,
        int(rng.integers(0, 2**31 - 1)),
    )


@lru_cache(maxsize=8)
def _pixel_rays(camera: CameraIntrinsics) -> tuple[np.ndarray, np.ndarray]:
    """Camera-frame unit rays through every pixel centre, row-major."""
    u, v = np.meshgrid(np.arange(camera.width) + 0.5, np.arange(camera.height) + 0.5)
    rays, valid = camera.unproject_many(np.stack([u.ravel(), v.ravel()], axis=1))
    rays.setflags(write=False)
    valid.setflags(write=False)
    return rays, valid


def ray_box_hits(origin: np.ndarray, dirs: np.ndarray, box: OrientedBox3) -> tuple[np.ndarray, np.ndarray]:
    """Slab test. Returns (entry distance or inf, local axis of the entry face)."""
    R = box.rotation
    o = R.T @ (origin - box.center)
    d = dirs @ R
    h = box.half_extents
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (-h - o) / d
        t2 = (h - o) / d
    near = np.fmin(t1, t2)
    far = np.fmax(t1, t2)
    # rays parallel to a slab: inside it -> unconstrained, outside -> miss
    parallel = d == 0
    outside_slab = parallel & (np.abs(o) > h)
    near = np.where(parallel, -np.inf, near)
    far = np.where(parallel, np.inf, far)
    t_near = near.max(axis=1)
    t_far = far.min(axis=1)
    hit = (t_near <= t_far) & (t_near > 1e-9) & ~outside_slab.any(axis=1)
    return np.where(hit, t_near, np.inf), near.argmax(axis=1)


def cast(origin: np.ndarray, dirs: np.ndarray, boxes: list[OrientedBox3]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Nearest hit along each ray against the ground plane and ``boxes``.

    Returns (distance, hit id, face axis); hit id is the box index, -1 for
    ground and -2 for a miss (distance inf).
    """
    n = len(dirs)
    best = np.full(n, np.inf)
    ids = np.full(n, -2, dtype=np.int64)
    faces = np.zeros(n, dtype=np.int64)
    dz = dirs[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        tg = np.where(dz < 0, -origin[2] / dz, np.inf)
    ground = (tg > 1e-9) & (tg < GROUND_MAX_RANGE)
    best[ground] = tg[ground]
    ids[ground] = -1
    for i, box in enumerate(boxes):
        t, ax = ray_box_hits(origin, dirs, box)
        closer = t < best
        best[closer] = t[closer]
        ids[closer] = i
        faces[closer] = ax[closer]
    return best, ids, faces


def _ground_color(xy: np.ndarray, key: int) -> np.ndarray:
    ix = np.floor(xy[:, 0]).astype(np.int64)
    iy = np.floor(xy[:, 1]).astype(np.int64)
    h = (ix * 73856093) ^ (iy * 19349663) ^ key
    h = (h ^ (h >> 13)) * 1274126177
    tint = ((h >> 8) & 0x3F).astype(np.float64)  # 0..63
    base = np.where((ix + iy) % 2 == 0, 70.0, 120.0) + tint
    return np.stack([base, base * 0.95, base * 0.85], axis=1)


def render_frame(cfg: SceneConfig, layout: SceneLayout, k: int) -> Frame:
    t = k * cfg.dt
    ego = layout.ego_pose(t, cfg)
    boxes = [obj.box_at(t) for obj in layout.objects]
    cam = compose(ego, layout.camera_mount)

    rays, valid = _pixel_rays(cfg.camera)
    dirs = rays[valid] @ cam.rotation.T
    dist, ids, faces = cast(cam.translation, dirs, boxes)

    n_pix = cfg.width * cfg.height
    rgb = np.zeros((n_pix, 3))
    hit_ids = np.full(n_pix, -3, dtype=np.int64)
    hit_ids[valid] = ids
    vis = rgb[valid]
    vis[ids == -2] = SKY
    gsel = ids == -1
    pts = cam.translation + dirs[gsel] * dist[gsel, None]
    vis[gsel] = _ground_color(pts[:, :2], layout.texture_key)
    for i, obj in enumerate(layout.objects):
        sel = ids == i
        vis[sel] = obj.albedo * FACE_SHADE[faces[sel]][:, None]
    rgb[valid] = vis
    image = np.clip(np.round(rgb), 0, 255).astype(np.uint8).reshape(cfg.height, cfg.width, 3)

    moving_idx = [i for i, o in enumerate(layout.objects) if o.moving]
    gt = np.isin(hit_ids, moving_idx).reshape(cfg.height, cfg.width).astype(np.uint8)

    return Frame(
        frame_index=k,
        timestamp=t,
        image=image,
        gt_mask=SegmentationMask(cfg.width, cfg.height, gt),
        lidar=lidar_scan(cfg, layout, ego, boxes, t),
        ego_pose=ego,
        boxes=boxes,
        hit_ids=hit_ids.reshape(cfg.height, cfg.width),
    )


def lidar_directions(cfg: SceneConfig) -> np.ndarray:
    """Fixed fan in the sensor frame (x forward, y left, z up)."""
    az = -math.pi + 2 * math.pi * np.arange(cfg.lidar_rays) / cfg.lidar_rays
    el = np.radians(np.linspace(-30.0, 5.0, cfg.lidar_channels))
    A, E = np.meshgrid(az, el)
    A, E = A.ravel(), E.ravel()
    return np.stack([np.cos(E) * np.cos(A), np.cos(E) * np.sin(A), np.sin(E)], axis=1)


def lidar_scan(cfg: SceneConfig, layout: SceneLayout, ego: Pose, boxes: list[OrientedBox3], t: float) -> LidarScan:
    sensor = compose(ego, layout.lidar_mount)
    dirs_s = lidar_directions(cfg)
    dist, ids, _ = cast(sensor.translation, dirs_s @ sensor.rotation.T, boxes)
    keep = (ids != -2) & (dist <= LIDAR_MAX_RANGE)
    return LidarScan(t, dirs_s[keep] * dist[keep, None], sensor)


def generate_frames(cfg: SceneConfig, scene_index: int = 0, scene_id: str | None = None) -> tuple[SceneLayout, list[Frame]]:
    layout = generate_layout(cfg, scene_index, scene_id)
    return layout, [render_frame(cfg, layout, k) for k in range(cfg.n_frames)]


def samples_from_frames(cfg: SceneConfig, layout: SceneLayout, frames: list[Frame]) -> list[SceneSample]:
    out = []
    for k in range(cfg.stride, len(frames)):
        cur, prev = frames[k], frames[k - cfg.stride]
        out.append(
            SceneSample(
                scene_id=layout.scene_id,
                frame_index=k,
                timestamp=cur.timestamp,
                prev_timestamp=prev.timestamp,
                image_t=cur.image,
                image_t_minus_1=prev.image,
                lidar=cur.lidar,
                ego_pose=cur.ego_pose,
                boxes=cur.boxes,
                prev_boxes=prev.boxes,
                gt_mask=cur.gt_mask,
                camera_mount=layout.camera_mount,
            )
        )
    return out


def generate_scene(cfg: SceneConfig, scene_index: int = 0, scene_id: str | None = None) -> list[SceneSample]:
    """Render a scene and return its ``n_frames - stride`` image-pair samples."""
    layout, frames = generate_frames(cfg, scene_index, scene_id)
    return samples_from_frames(cfg, layout, frames)
