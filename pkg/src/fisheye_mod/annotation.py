"""Semi-automatic moving-object annotation from LiDAR and 3D boxes.

Per object: gather the LiDAR returns inside its box, decide moving/static
from the box track, project the returns into the camera, take their convex
hull and rasterise it.  The frame mask is the union of moving-object hulls.
"""

from __future__ import annotations

import enum
import json
import logging
import math
import os
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np

from . import netpbm
from .errors import DegenerateHull, FmodError, InsufficientTrack, NonMonotonicTime
from .geometry import CameraIntrinsics, Pose, compose, invert, rot_z

log = logging.getLogger(__name__)


class MotionLabel(str, enum.Enum):
    MOVING = "moving"
    STATIC = "static"


@dataclass(frozen=True)
class OrientedBox3:
    center: np.ndarray
    half_extents: np.ndarray
    yaw: float
    object_id: str
    class_tag: str = "vehicle"
    # generator-side truth, not used by the annotation pipeline
    velocity: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        c = np.asarray(self.center, dtype=np.float64).reshape(3)
        h = np.asarray(self.half_extents, dtype=np.float64).reshape(3)
        v = np.asarray(self.velocity, dtype=np.float64).reshape(3)
        if np.any(h <= 0):
            raise ValueError("half extents must be positive")
        if not -math.pi <= self.yaw <= math.pi:
            raise ValueError("yaw must lie in [-pi, pi]")
        if self.class_tag not in ("pedestrian", "vehicle"):
            raise ValueError(f"unknown class tag {self.class_tag!r}")
        object.__setattr__(self, "center", c)
        object.__setattr__(self, "half_extents", h)
        object.__setattr__(self, "velocity", v)

    @property
    def rotation(self) -> np.ndarray:
        return rot_z(self.yaw)

    def to_dict(self) -> dict[str, Any]:
        return {
            "object_id": self.object_id,
            "class_tag": self.class_tag,
            "center": self.center.tolist(),
            "half_extents": self.half_extents.tolist(),
            "yaw": self.yaw,
            "velocity": self.velocity.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> OrientedBox3:
        return cls(
            np.array(d["center"]),
            np.array(d["half_extents"]),
            float(d["yaw"]),
            str(d["object_id"]),
            d.get("class_tag", "vehicle"),
            np.array(d.get("velocity", [0.0, 0.0, 0.0])),
        )


@dataclass(frozen=True)
class LidarScan:
    timestamp: float
    points: np.ndarray  # (N, 3), sensor frame
    sensor_pose: Pose

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(pts)):
            raise ValueError("LiDAR points must be finite")
        object.__setattr__(self, "points", pts)

    def world_points(self) -> np.ndarray:
        return self.sensor_pose.apply(self.points)


@dataclass(frozen=True)
class MotionConfig:
    v_min: float = 0.3
    min_points: int = 5

    def __post_init__(self):
        if self.v_min <= 0:
            raise ValueError("v_min must be positive")
        if self.min_points < 1:
            raise ValueError("min_points must be at least 1")


@dataclass(frozen=True)
class MotionAnnotation:
    object_id: str
    label: MotionLabel
    hull: np.ndarray  # (M, 2), positive orientation in (u, v)
    frame_index: int

    def to_dict(self) -> dict[str, Any]:
        return {"object_id": self.object_id, "label": self.label.value, "hull": self.hull.tolist()}


@dataclass
class SegmentationMask:
    """Per-pixel labels, 0 = static/background, 1 = moving."""

    width: int
    height: int
    data: np.ndarray  # (height, width) uint8

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.uint8)
        if self.data.shape != (self.height, self.width):
            raise ValueError(f"mask data shape {self.data.shape} != ({self.height}, {self.width})")

    @classmethod
    def zeros(cls, width: int, height: int) -> SegmentationMask:
        return cls(width, height, np.zeros((height, width), dtype=np.uint8))

    def __or__(self, other: SegmentationMask) -> SegmentationMask:
        return SegmentationMask(self.width, self.height, self.data | other.data)

    def count(self) -> int:
        return int(self.data.sum())

    def save_pgm(self, path: str | os.PathLike) -> None:
        netpbm.write_pgm(path, (self.data * 255).astype(np.uint8))

    @classmethod
    def load_pgm(cls, path: str | os.PathLike) -> SegmentationMask:
        gray = netpbm.read_pgm(path)
        return cls(gray.shape[1], gray.shape[0], (gray >= 128).astype(np.uint8))


def extract_points_in_box(scan: LidarScan, box: OrientedBox3) -> np.ndarray:
    """World-frame returns inside ``box`` (faces included)."""
    pts = scan.world_points()
    if len(pts) == 0:
        return pts
    q = (pts - box.center) @ box.rotation  # rows are R^T (p - c)
    inside = np.all(np.abs(q) <= box.half_extents, axis=1)
    return pts[inside]


def classify_motion(track: Sequence[tuple[float, OrientedBox3]], cfg: MotionConfig) -> MotionLabel:
    """Moving iff mean centre speed over the track exceeds ``cfg.v_min``."""
    if len(track) < 2:
        raise InsufficientTrack(f"need at least 2 track entries, got {len(track)}")
    times = [t for t, _ in track]
    if any(b <= a for a, b in zip(times, times[1:])):
        raise NonMonotonicTime("track timestamps must be strictly increasing")
    path = sum(
        float(np.linalg.norm(b1.center - b0.center)) for (_, b0), (_, b1) in zip(track, track[1:])
    )
    speed = path / (times[-1] - times[0])
    return MotionLabel.MOVING if speed > cfg.v_min else MotionLabel.STATIC


def project_object_points(points: np.ndarray, cam_pose: Pose, intr: CameraIntrinsics) -> np.ndarray:
    """Project world points; points outside the field of view are dropped."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0:
        return np.zeros((0, 2))
    cam = invert(cam_pose).apply(pts)
    px, valid = intr.project_many(cam)
    return px[valid]


def _cross(o, a, b) -> float:
    return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])


def convex_hull(pixels) -> np.ndarray:
    """Andrew's monotone chain.

    Vertices come back with positive orientation in raw (u, v) coordinates
    (every consecutive edge cross product > 0); because v points down, that
    is clockwise as seen on screen.  Collinear boundary points are dropped.
    """
    pts = sorted({(float(u), float(v)) for u, v in np.asarray(pixels, dtype=np.float64).reshape(-1, 2)})
    if len(pts) < 3:
        raise DegenerateHull(f"need 3 distinct points, got {len(pts)}")

    def chain(seq):
        out: list[tuple[float, float]] = []
        for p in seq:
            while len(out) >= 2 and _cross(out[-2], out[-1], p) <= 0:
                out.pop()
            out.append(p)
        return out

    lower = chain(pts)
    upper = chain(reversed(pts))
    hull = lower[:-1] + upper[:-1]
    if len(hull) < 3:
        raise DegenerateHull("all points are collinear")
    return np.array(hull)


def rasterize_hull(hull: np.ndarray, width: int, height: int) -> SegmentationMask:
    """Mark every pixel whose centre lies inside or on the hull."""
    hull = np.asarray(hull, dtype=np.float64)
    mask = SegmentationMask.zeros(width, height)
    u0 = max(int(math.floor(hull[:, 0].min() - 0.5)), 0)
    u1 = min(int(math.ceil(hull[:, 0].max() - 0.5)), width - 1)
    v0 = max(int(math.floor(hull[:, 1].min() - 0.5)), 0)
    v1 = min(int(math.ceil(hull[:, 1].max() - 0.5)), height - 1)
    if u0 > u1 or v0 > v1:
        return mask
    pu, pv = np.meshgrid(np.arange(u0, u1 + 1) + 0.5, np.arange(v0, v1 + 1) + 0.5)
    inside = np.ones(pu.shape, dtype=bool)
    nxt = np.roll(hull, -1, axis=0)
    for (x0, y0), (x1, y1) in zip(hull, nxt):
        inside &= (x1 - x0) * (pv - y0) - (y1 - y0) * (pu - x0) >= 0
    mask.data[v0 : v1 + 1, u0 : u1 + 1] = inside
    return mask


@dataclass(frozen=True)
class SkippedObject:
    frame_index: int
    object_id: str
    reason: str


def annotate_frame(
    frame,
    cfg: MotionConfig,
    intr: CameraIntrinsics,
    cam_mount: Pose,
    skipped: list[SkippedObject] | None = None,
) -> tuple[list[MotionAnnotation], SegmentationMask]:
    """Annotate one frame pair.

    ``frame`` needs ``frame_index``, ``timestamp``, ``prev_timestamp``,
    ``boxes``, ``prev_boxes``, ``lidar`` and ``ego_pose`` (a
    :class:`~fisheye_mod.synth.SceneSample` has all of them).  ``cam_mount``
    is the camera pose on the ego vehicle; the world pose of the camera is
    ``ego_pose * cam_mount``.  Objects that cannot be annotated are skipped
    and appended to ``skipped``.
    """
    cam_pose = compose(frame.ego_pose, cam_mount)
    prev_by_id = {b.object_id: b for b in frame.prev_boxes}
    annotations: list[MotionAnnotation] = []
    mask = SegmentationMask.zeros(intr.width, intr.height)

    def skip(box: OrientedBox3, reason: str) -> None:
        log.info("frame %d object %s skipped: %s", frame.frame_index, box.object_id, reason)
        if skipped is not None:
            skipped.append(SkippedObject(frame.frame_index, box.object_id, reason))

    for box in frame.boxes:
        prev = prev_by_id.get(box.object_id)
        if prev is None:
            skip(box, "no two-frame track")
            continue
        try:
            pts = extract_points_in_box(frame.lidar, box)
            if len(pts) < cfg.min_points:
                skip(box, f"{len(pts)} LiDAR points < min_points={cfg.min_points}")
                continue
            label = classify_motion([(frame.prev_timestamp, prev), (frame.timestamp, box)], cfg)
            hull = convex_hull(project_object_points(pts, cam_pose, intr))
        except FmodError as exc:
            skip(box, f"{type(exc).__name__}: {exc}")
            continue
        annotations.append(MotionAnnotation(box.object_id, label, hull, frame.frame_index))
        if label is MotionLabel.MOVING:
            mask = mask | rasterize_hull(hull, intr.width, intr.height)
    return annotations, mask


def write_annotation(out_dir: str | os.PathLike, scene_id: str, frame_index: int, annotations, mask) -> tuple[str, str]:
    """Write ``<scene>/<frame:06>_mask.pgm`` and its JSON sidecar; returns both paths."""
    scene_dir = os.path.join(out_dir, scene_id)
    os.makedirs(scene_dir, exist_ok=True)
    mask_path = os.path.join(scene_dir, f"{frame_index:06d}_mask.pgm")
    side_path = os.path.join(scene_dir, f"{frame_index:06d}_annotations.json")
    mask.save_pgm(mask_path)
    with open(side_path, "w") as f:
        json.dump([a.to_dict() for a in annotations], f)
    return mask_path, side_path
