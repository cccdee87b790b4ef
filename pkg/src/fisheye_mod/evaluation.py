"""Pixel confusion counts, IoU metrics, static-scene false positives and dataset statistics."""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import dataclass, field
from typing import Any, Iterable

import numpy as np

from .annotation import SegmentationMask
from .dataset import DatasetManifest, load_mask, load_pair
from .errors import DataError, EmptyManifest, ShapeError


def fmt(x: float | None) -> str:
    """Six significant digits, the format of every numeric output file."""
    return "" if x is None else f"{x:.6g}"


def _round6(obj: Any) -> Any:
    if isinstance(obj, float):
        return float(fmt(obj)) if math.isfinite(obj) else obj
    if isinstance(obj, dict):
        return {k: _round6(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_round6(v) for v in obj]
    return obj


def write_json(path: str | os.PathLike, obj: dict[str, Any]) -> None:
    with open(path, "w") as f:
        json.dump(_round6(obj), f, indent=1, sort_keys=True)
        f.write("\n")


@dataclass(frozen=True)
class ConfusionMatrix2:
    """Pixel counts for the moving class; static is the complement."""

    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    def __post_init__(self):
        if min(self.tp, self.fp, self.fn, self.tn) < 0:
            raise ValueError("confusion counts must be non-negative")

    def __add__(self, other: ConfusionMatrix2) -> ConfusionMatrix2:
        return ConfusionMatrix2(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn)

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def flipped(self) -> ConfusionMatrix2:
        """The same tally with the roles of the two classes exchanged."""
        return ConfusionMatrix2(self.tn, self.fn, self.fp, self.tp)

    def to_dict(self) -> dict[str, int]:
        return {"tp": self.tp, "fp": self.fp, "fn": self.fn, "tn": self.tn}


def _as_array(m) -> np.ndarray:
    return m.data if isinstance(m, SegmentationMask) else np.asarray(m)


def confusion(pred, gt) -> ConfusionMatrix2:
    p = _as_array(pred).astype(bool)
    g = _as_array(gt).astype(bool)
    if p.shape != g.shape:
        raise ShapeError(f"prediction shape {p.shape} != ground truth shape {g.shape}")
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    return ConfusionMatrix2(tp, fp, fn, p.size - tp - fp - fn)


def _iou(inter: int, union: int) -> float:
    return 1.0 if union == 0 else inter / union


def iou_from_confusion(cm: ConfusionMatrix2) -> tuple[float, float, float]:
    """(moving IoU, static IoU, mean); an empty denominator counts as perfect agreement."""
    moving = _iou(cm.tp, cm.tp + cm.fp + cm.fn)
    static = _iou(cm.tn, cm.tn + cm.fp + cm.fn)
    return moving, static, (moving + static) / 2


@dataclass
class EvalReport:
    iou_moving: float
    iou_static: float
    miou: float
    per_frame: list[dict[str, Any]]
    fp_rate_static_scenes: float | None
    confusion: ConfusionMatrix2
    n_frames: int

    def to_dict(self) -> dict[str, Any]:
        return {
            "iou_moving": self.iou_moving,
            "iou_static": self.iou_static,
            "miou": self.miou,
            "fp_rate_static_scenes": self.fp_rate_static_scenes,
            "confusion": self.confusion.to_dict(),
            "n_frames": self.n_frames,
        }

    def save(self, path: str | os.PathLike, per_frame_csv: str | os.PathLike | None = None) -> None:
        write_json(path, self.to_dict())
        if per_frame_csv is not None:
            with open(per_frame_csv, "w", newline="") as f:
                w = csv.writer(f, lineterminator="\n")
                w.writerow(["scene_id", "frame_index", "iou_moving", "iou_static", "miou"])
                for r in self.per_frame:
                    w.writerow([r["scene_id"], r["frame_index"], fmt(r["iou_moving"]), fmt(r["iou_static"]), fmt(r["miou"])])


def report_from_frames(frames: Iterable[tuple[dict[str, Any], Any, Any]], static_scenes: set[str] = frozenset()) -> EvalReport:
    """Micro-averaged report from ``(record, prediction, ground truth)`` triples."""
    total = ConfusionMatrix2()
    static_fp = static_px = 0
    per_frame = []
    for rec, pred, gt in frames:
        cm = confusion(pred, gt)
        total = total + cm
        m, s, mi = iou_from_confusion(cm)
        per_frame.append({"scene_id": rec["scene_id"], "frame_index": rec["frame_index"], "iou_moving": m, "iou_static": s, "miou": mi})
        if rec["scene_id"] in static_scenes or rec.get("static_only"):
            static_fp += int(np.count_nonzero(_as_array(pred)))
            static_px += cm.total
    m, s, mi = iou_from_confusion(total)
    fp_rate = static_fp / static_px if static_px else None
    return EvalReport(m, s, mi, per_frame, fp_rate, total, len(per_frame))


def evaluate(weights, cfg, manifest: DatasetManifest, label_source: str = "gt", batch_size: int = 8) -> EvalReport:
    """Evaluate a model over every record of ``manifest`` in eval mode."""
    from .modnet import predict

    if not manifest.records:
        raise EmptyManifest("nothing to evaluate")
    weights.check(cfg)

    def frames():
        recs = manifest.records
        for i in range(0, len(recs), batch_size):
            chunk = recs[i : i + batch_size]
            pairs = [load_pair(manifest, r) for r in chunk]
            xa = np.stack([p[0] for p in pairs])
            xb = np.stack([p[1] for p in pairs])
            if xa.shape[2:] != (cfg.height, cfg.width):
                raise DataError(f"{chunk[0]['scene_id']}/{chunk[0]['frame_index']}: image {xa.shape[2:]} != model input {(cfg.height, cfg.width)}")
            preds = predict(weights, cfg, xa, xb)
            for rec, pred in zip(chunk, preds):
                yield rec, pred, load_mask(manifest, rec, label_source)

    return report_from_frames(frames(), manifest.static_scene_ids())


@dataclass
class DatasetStats:
    n_frames: int
    n_scenes: int
    n_moving_annotations: int
    avg_moving_objects_per_frame: float
    pct_moving_pixels: float
    pct_static_pixels: float
    extra: dict[str, Any] = field(default_factory=dict)

    @classmethod
    def from_tallies(cls, tallies: Iterable[tuple[str, int, int, int]]) -> DatasetStats:
        """Build from per-frame ``(scene_id, moving annotations, moving pixels, total pixels)``."""
        scenes: set[str] = set()
        n = ann = mov = tot = 0
        for scene_id, a, m, t in tallies:
            scenes.add(scene_id)
            n += 1
            ann += a
            mov += m
            tot += t
        if n == 0:
            raise EmptyManifest("no frames to summarise")
        pct = 100.0 * mov / tot if tot else 0.0
        return cls(n, len(scenes), ann, ann / n, pct, 100.0 - pct)

    def to_dict(self) -> dict[str, Any]:
        return {
            "n_frames": self.n_frames,
            "n_scenes": self.n_scenes,
            "n_moving_annotations": self.n_moving_annotations,
            "avg_moving_objects_per_frame": self.avg_moving_objects_per_frame,
            "pct_moving_pixels": self.pct_moving_pixels,
            "pct_static_pixels": self.pct_static_pixels,
            **self.extra,
        }


def _moving_annotations(manifest: DatasetManifest, rec: dict[str, Any]) -> int:
    if "annotations" in rec:
        path = manifest.path(rec, "annotations")
        try:
            with open(path) as f:
                anns = json.load(f)
        except (OSError, json.JSONDecodeError) as exc:
            raise DataError(f"cannot read annotation sidecar {path}: {exc}") from exc
        return sum(a["label"] == "moving" for a in anns)
    if "meta" in rec:
        # no sidecar: fall back to the generator's per-object velocities
        path = manifest.path(rec, "meta")
        try:
            with open(path) as f:
                meta = json.load(f)
        except (OSError, json.JSONDecodeError) as exc:
            raise DataError(f"cannot read frame metadata {path}: {exc}") from exc
        return sum(any(v != 0 for v in b.get("velocity", [0])) for b in meta["boxes"])
    return 0


def dataset_stats(manifest: DatasetManifest, label_source: str | None = None) -> DatasetStats:
    """Frame, annotation and pixel tallies.

    Masks come from ``label_source``; by default the annotation mask when a
    record has one and the ground-truth mask otherwise.
    """
    if not manifest.records:
        raise EmptyManifest("manifest has no frames")

    def tallies():
        for rec in manifest.records:
            source = label_source or ("annotation" if "mask" in rec else "gt")
            mask = load_mask(manifest, rec, source)
            yield rec["scene_id"], _moving_annotations(manifest, rec), mask.count(), mask.width * mask.height

    return DatasetStats.from_tallies(tallies())
