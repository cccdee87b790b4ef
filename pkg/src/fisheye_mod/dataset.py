"""On-disk datasets: scene writing, manifests, splitting and static augmentation.

Layout under a dataset root::

    manifest.json                          both splits
    <split>/<scene_id>/frame_<k>.ppm       RGB image
    <split>/<scene_id>/frame_<k>.txt       LiDAR, "x y z" per line, sensor frame
    <split>/<scene_id>/frame_<k>.json      poses, camera, boxes
    <split>/<scene_id>/frame_<k>_gt.pgm    analytic ground-truth mask

Record paths are relative to the manifest's ``root`` directory.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import math
import os
from dataclasses import dataclass, field
from typing import Any, Iterable, Sequence

import numpy as np

from . import netpbm
from .annotation import LidarScan, MotionConfig, OrientedBox3, SegmentationMask, annotate_frame, write_annotation
from .errors import ConfigError, DataError, EmptyManifest
from .geometry import Pose, intrinsics_from_dict
from .synth import SceneConfig, SceneSample, generate_frames

log = logging.getLogger(__name__)

MANIFEST_VERSION = 1
STATIC_TEST_OFFSET = 10_000
AUGMENT_OFFSET = 20_000


@dataclass
class DatasetManifest:
    split: str
    camera_model: str
    records: list[dict[str, Any]] = field(default_factory=list)
    scenes: list[dict[str, Any]] = field(default_factory=list)
    version: int = MANIFEST_VERSION
    root: str = "."

    def path(self, rec: dict[str, Any], key: str) -> str:
        return os.path.join(self.root, rec[key])

    def scene_ids(self) -> list[str]:
        return list(dict.fromkeys(r["scene_id"] for r in self.records))

    def static_scene_ids(self) -> set[str]:
        return {s["scene_id"] for s in self.scenes if s.get("static_only")}

    def __len__(self) -> int:
        return len(self.records)

    def to_dict(self) -> dict[str, Any]:
        return {
            "version": self.version,
            "split": self.split,
            "camera_model": self.camera_model,
            "scenes": self.scenes,
            "records": self.records,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any], root: str) -> DatasetManifest:
        if d.get("version") != MANIFEST_VERSION:
            raise DataError(f"unsupported manifest version {d.get('version')!r}")
        return cls(d["split"], d["camera_model"], list(d["records"]), list(d.get("scenes", [])), d["version"], root)

    def content_hash(self) -> str:
        """Git-style blob hash of the canonical JSON serialisation."""
        body = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha1(b"blob %d\0" % len(body) + body).hexdigest()

    def rebased(self, new_root: str) -> DatasetManifest:
        """Same records with file paths re-expressed relative to ``new_root``."""
        out = dataclasses.replace(self, records=[], root=new_root)
        for rec in self.records:
            rec2 = dict(rec)
            for key in PATH_KEYS:
                if key in rec2:
                    rec2[key] = os.path.relpath(os.path.join(self.root, rec[key]), new_root)
            out.records.append(rec2)
        return out


PATH_KEYS = ("image_t", "image_t_minus_1", "lidar", "meta", "meta_prev", "gt_mask", "mask", "annotations")


def save_manifest(path: str | os.PathLike, manifest: DatasetManifest) -> None:
    with open(path, "w") as f:
        json.dump(manifest.to_dict(), f, indent=1)


def save_split_manifests(root: str, splits: dict[str, DatasetManifest], name: str = "manifest.json") -> str:
    path = os.path.join(root, name)
    body = {"version": MANIFEST_VERSION, "splits": {k: m.rebased(root).to_dict() for k, m in splits.items()}}
    with open(path, "w") as f:
        json.dump(body, f, indent=1)
    return path


def load_manifest(path: str | os.PathLike, split: str | None = None) -> DatasetManifest:
    """Load a single-split manifest, or one split of a root ``manifest.json``.

    For a root manifest ``split`` defaults to ``"test"`` when present.
    """
    path = os.fspath(path)
    if os.path.isdir(path):
        path = os.path.join(path, "manifest.json")
    try:
        with open(path) as f:
            d = json.load(f)
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read manifest {path}: {exc}") from exc
    root = os.path.dirname(os.path.abspath(path))
    if "splits" in d:
        splits = d["splits"]
        key = split or ("test" if "test" in splits else next(iter(splits)))
        if key not in splits:
            raise DataError(f"{path} has no split {key!r}")
        return DatasetManifest.from_dict(splits[key], root)
    m = DatasetManifest.from_dict(d, root)
    if split is not None and m.split != split:
        raise DataError(f"{path} holds split {m.split!r}, not {split!r}")
    return m


def load_splits(path: str | os.PathLike) -> dict[str, DatasetManifest]:
    path = os.fspath(path)
    if os.path.isdir(path):
        path = os.path.join(path, "manifest.json")
    with open(path) as f:
        d = json.load(f)
    root = os.path.dirname(os.path.abspath(path))
    if "splits" not in d:
        m = DatasetManifest.from_dict(d, root)
        return {m.split: m}
    return {k: DatasetManifest.from_dict(v, root) for k, v in d["splits"].items()}


def _frame_meta(cfg: SceneConfig, layout, frame) -> dict[str, Any]:
    return {
        "scene_id": layout.scene_id,
        "frame_index": frame.frame_index,
        "timestamp": frame.timestamp,
        "ego_pose": frame.ego_pose.to_dict(),
        "camera": cfg.camera.to_dict(),
        "camera_mount": layout.camera_mount.to_dict(),
        "lidar_pose": frame.lidar.sensor_pose.to_dict(),
        "boxes": [b.to_dict() for b in frame.boxes],
    }


def write_scene(
    cfg: SceneConfig,
    scene_index: int,
    scene_id: str,
    root: str,
    split: str,
    augmented: bool = False,
) -> tuple[list[dict[str, Any]], dict[str, Any]]:
    """Render one scene under ``root/split/scene_id``; returns (records, scene entry)."""
    layout, frames = generate_frames(cfg, scene_index, scene_id)
    rel_dir = os.path.join(split, scene_id)
    os.makedirs(os.path.join(root, rel_dir), exist_ok=True)
    names = []
    for fr in frames:
        stem = os.path.join(rel_dir, f"frame_{fr.frame_index}")
        netpbm.write_ppm(os.path.join(root, stem + ".ppm"), fr.image)
        np.savetxt(os.path.join(root, stem + ".txt"), fr.lidar.points, fmt="%.17g")
        fr.gt_mask.save_pgm(os.path.join(root, stem + "_gt.pgm"))
        with open(os.path.join(root, stem + ".json"), "w") as f:
            json.dump(_frame_meta(cfg, layout, fr), f)
        names.append(stem)
    static_only = not any(o.moving for o in layout.objects)
    records = []
    for k in range(cfg.stride, cfg.n_frames):
        cur, prev = names[k], names[k - cfg.stride]
        records.append(
            {
                "scene_id": scene_id,
                "frame_index": k,
                "timestamp": frames[k].timestamp,
                "image_t": cur + ".ppm",
                "image_t_minus_1": prev + ".ppm",
                "lidar": cur + ".txt",
                "meta": cur + ".json",
                "meta_prev": prev + ".json",
                "gt_mask": cur + "_gt.pgm",
                "static_only": static_only,
                "augmented": augmented,
            }
        )
    entry = {
        "scene_id": scene_id,
        "scene_index": scene_index,
        "seed": cfg.seed,
        "config_hash": cfg.content_hash(),
        "static_only": static_only,
        "augmented": augmented,
        "n_moving_objects": sum(o.moving for o in layout.objects),
    }
    return records, entry


def split_scenes(scene_ids: Sequence[Any], train_fraction: float, seed: int) -> tuple[list[Any], list[Any]]:
    """Seeded scene-level shuffle; the first ceil(f * n) scenes go to train."""
    if not 0.0 < train_fraction < 1.0:
        raise ConfigError("train_fraction must lie in (0, 1)")
    n = len(scene_ids)
    if n < 2:
        raise ConfigError("need at least two scenes to split")
    n_train = math.ceil(train_fraction * n - 1e-9)
    if n_train >= n or n_train == 0:
        raise ConfigError(f"split of {n} scenes at {train_fraction} leaves an empty split")
    perm = np.random.default_rng(seed).permutation(n)
    train = [scene_ids[i] for i in perm[:n_train]]
    test = [scene_ids[i] for i in perm[n_train:]]
    return train, test


def split_dataset(manifest: DatasetManifest, train_fraction: float, seed: int) -> tuple[DatasetManifest, DatasetManifest]:
    """Split an already-written manifest by scene (records are not moved on disk)."""
    train_ids, test_ids = split_scenes(manifest.scene_ids(), train_fraction, seed)
    out = []
    for name, ids in (("train", train_ids), ("test", test_ids)):
        keep = set(ids)
        out.append(
            dataclasses.replace(
                manifest,
                split=name,
                records=[r for r in manifest.records if r["scene_id"] in keep],
                scenes=[s for s in manifest.scenes if s["scene_id"] in keep],
            )
        )
    return out[0], out[1]


def build_dataset(
    cfg: SceneConfig,
    n_scenes: int,
    root: str,
    train_fraction: float = 0.7,
    split_seed: int | None = None,
    n_static_test: int = 0,
    test_cfg: SceneConfig | None = None,
) -> tuple[DatasetManifest, DatasetManifest]:
    """Generate ``n_scenes`` scenes, split them by scene and write both splits.

    ``test_cfg`` (default ``cfg``) renders the test scenes, e.g. with a
    different camera for domain-gap studies.  ``n_static_test`` extra
    static-only scenes are appended to the test split for false-positive
    analysis.
    """
    test_cfg = test_cfg or cfg
    ids = [f"scene_{i:04d}" for i in range(n_scenes)]
    train_ids, test_ids = split_scenes(ids, train_fraction, cfg.seed if split_seed is None else split_seed)
    os.makedirs(root, exist_ok=True)
    splits = {}
    for name, chosen, scfg in (("train", train_ids, cfg), ("test", test_ids, test_cfg)):
        m = DatasetManifest(name, scfg.camera.model, root=root)
        for sid in sorted(chosen):
            recs, entry = write_scene(scfg, int(sid.split("_")[1]), sid, root, name)
            m.records.extend(recs)
            m.scenes.append(entry)
        splits[name] = m
    static_cfg = dataclasses.replace(test_cfg, moving_fraction=0.0)
    for i in range(n_static_test):
        sid = f"static_{i:04d}"
        recs, entry = write_scene(static_cfg, STATIC_TEST_OFFSET + i, sid, root, "test")
        splits["test"].records.extend(recs)
        splits["test"].scenes.append(entry)
    save_split_manifests(root, splits)
    return splits["train"], splits["test"]


def augment_static_scenes(
    manifest: DatasetManifest,
    n_extra: int,
    seed: int,
    template: SceneConfig | None = None,
) -> DatasetManifest:
    """Append ``n_extra`` static-only scenes to a train manifest.

    The new scenes are rendered from ``template`` (``moving_fraction`` forced
    to 0) under ``<root>/train/aug_<i>``; their masks are all-zero, so no
    annotation step is needed.
    """
    if n_extra < 0:
        raise ConfigError("n_extra must be non-negative")
    if manifest.split != "train":
        raise ConfigError("static augmentation only applies to the train split")
    if n_extra == 0:
        return manifest
    if template is None:
        raise ConfigError("a template SceneConfig is required to synthesise scenes")
    cfg = dataclasses.replace(template, seed=seed, moving_fraction=0.0)
    out = dataclasses.replace(manifest, records=list(manifest.records), scenes=list(manifest.scenes))
    for i in range(n_extra):
        sid = f"aug_{seed}_{i:05d}"
        recs, entry = write_scene(cfg, AUGMENT_OFFSET + i, sid, manifest.root, "train", augmented=True)
        for r in recs:
            # augmented scenes need no annotation: the ground-truth mask is the label
            r["mask"] = r["gt_mask"]
        out.records.extend(recs)
        out.scenes.append(entry)
    return out


# ----------------------------------------------------------------- reading ---


def _read_json(path: str) -> dict[str, Any]:
    try:
        with open(path) as f:
            return json.load(f)
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc


def load_lidar(path: str, sensor_pose: Pose, timestamp: float) -> LidarScan:
    try:
        pts = np.loadtxt(path, dtype=np.float64, ndmin=2).reshape(-1, 3)
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read LiDAR file {path}: {exc}") from exc
    return LidarScan(timestamp, pts, sensor_pose)


def load_sample(manifest: DatasetManifest, rec: dict[str, Any]):
    """Reconstruct a :class:`SceneSample` (plus camera intrinsics) from disk."""
    meta = _read_json(manifest.path(rec, "meta"))
    prev = _read_json(manifest.path(rec, "meta_prev"))
    lidar = load_lidar(manifest.path(rec, "lidar"), Pose.from_dict(meta["lidar_pose"]), meta["timestamp"])
    sample = SceneSample(
        scene_id=rec["scene_id"],
        frame_index=rec["frame_index"],
        timestamp=meta["timestamp"],
        prev_timestamp=prev["timestamp"],
        image_t=netpbm.read_ppm(manifest.path(rec, "image_t")),
        image_t_minus_1=netpbm.read_ppm(manifest.path(rec, "image_t_minus_1")),
        lidar=lidar,
        ego_pose=Pose.from_dict(meta["ego_pose"]),
        boxes=[OrientedBox3.from_dict(b) for b in meta["boxes"]],
        prev_boxes=[OrientedBox3.from_dict(b) for b in prev["boxes"]],
        gt_mask=SegmentationMask.load_pgm(manifest.path(rec, "gt_mask")),
        camera_mount=Pose.from_dict(meta["camera_mount"]),
    )
    return sample, intrinsics_from_dict(meta["camera"])


def label_key(rec: dict[str, Any], source: str) -> str:
    """Which record field holds the label mask for ``source`` ('annotation' or 'gt')."""
    if source == "gt":
        return "gt_mask"
    if source == "annotation":
        if "mask" not in rec:
            raise DataError(f"record {rec['scene_id']}/{rec['frame_index']} has no annotation mask")
        return "mask"
    raise ConfigError(f"unknown label source {source!r}")


def load_mask(manifest: DatasetManifest, rec: dict[str, Any], source: str = "gt") -> SegmentationMask:
    try:
        return SegmentationMask.load_pgm(manifest.path(rec, label_key(rec, source)))
    except OSError as exc:
        raise DataError(f"cannot read mask for {rec['scene_id']}/{rec['frame_index']}: {exc}") from exc


def load_pair(manifest: DatasetManifest, rec: dict[str, Any]) -> tuple[np.ndarray, np.ndarray]:
    """Both images of a record as float ``[3, H, W]`` arrays scaled to [0, 1]."""
    try:
        a = netpbm.read_ppm(manifest.path(rec, "image_t"))
        b = netpbm.read_ppm(manifest.path(rec, "image_t_minus_1"))
    except OSError as exc:
        raise DataError(f"cannot read images for {rec['scene_id']}/{rec['frame_index']}: {exc}") from exc
    return to_chw(a), to_chw(b)


def to_chw(rgb: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(rgb.transpose(2, 0, 1), dtype=np.float64) / 255.0


def annotate_dataset(manifest: DatasetManifest, out_dir: str, cfg: MotionConfig = MotionConfig()) -> tuple[DatasetManifest, list]:
    """Run the annotator over every record; masks and sidecars land in ``out_dir``.

    Augmented (static-only) records keep their all-zero ground-truth mask.
    Returns the rebased manifest with ``mask``/``annotations`` filled in, and
    the list of skipped objects.
    """
    if not manifest.records:
        raise EmptyManifest("nothing to annotate")
    os.makedirs(out_dir, exist_ok=True)
    out = manifest.rebased(out_dir)
    skipped: list = []
    for rec_in, rec in zip(manifest.records, out.records):
        if rec_in.get("augmented"):
            rec["mask"] = rec["gt_mask"]
            continue
        sample, intr = load_sample(manifest, rec_in)
        anns, mask = annotate_frame(sample, cfg, intr, sample.camera_mount, skipped)
        mask_path, side_path = write_annotation(out_dir, rec["scene_id"], rec["frame_index"], anns, mask)
        rec["mask"] = os.path.relpath(mask_path, out_dir)
        rec["annotations"] = os.path.relpath(side_path, out_dir)
    return out, skipped


def iter_records(manifests: Iterable[DatasetManifest]):
    for m in manifests:
        for rec in m.records:
            yield m, rec
