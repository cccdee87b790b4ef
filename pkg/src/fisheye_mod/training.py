"""Deterministic training loop: class weights, Adam + L2, augmentation, checkpoints, logs."""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
import os
import time
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .dataset import DatasetManifest, augment_static_scenes, load_manifest, load_mask, load_pair
from .errors import ConfigError, DataError, EmptyManifest, NumericalError
from .evaluation import EvalReport, evaluate, fmt
from .modnet import ModelConfig, ModelWeights, forward, init_weights, save_weights
from .synth import SceneConfig
from .tensor import AdamState, GradTape, adam_step, weighted_cross_entropy

log = logging.getLogger(__name__)

W_MAX = 100.0


@dataclass(frozen=True)
class TrainConfig:
    seed: int = 0
    epochs: int = 30
    batch_size: int = 4
    lr: float = 1e-4
    weight_decay: float = 5e-4
    class_weight_mode: str = "inverse_frequency"
    manual_weights: tuple[float, float] | None = None
    share_encoders: bool = False
    train_manifest: str | None = None
    test_manifest: str | None = None
    eval_every: int = 1
    checkpoint: str | None = None
    label_source: str = "annotation"
    eval_label_source: str = "gt"
    # static-scene augmentation: extra samples as a fraction of the train set
    augment_ratio: float = 0.0
    augment_template: dict[str, Any] | None = None
    model: dict[str, Any] = field(default_factory=dict)
    record_wall_time: bool = False

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be at least 1")
        if self.lr < 0 or self.weight_decay < 0:
            raise ConfigError("lr and weight_decay must be non-negative")
        if self.eval_every < 1:
            raise ConfigError("eval_every must be at least 1")
        if self.class_weight_mode not in ("inverse_frequency", "uniform", "manual"):
            raise ConfigError(f"unknown class_weight_mode {self.class_weight_mode!r}")
        if self.class_weight_mode == "manual":
            if self.manual_weights is None or len(self.manual_weights) != 2 or min(self.manual_weights) <= 0:
                raise ConfigError("manual class weights need two positive numbers")
            object.__setattr__(self, "manual_weights", tuple(float(w) for w in self.manual_weights))
        if self.label_source not in ("annotation", "gt") or self.eval_label_source not in ("annotation", "gt"):
            raise ConfigError("label sources must be 'annotation' or 'gt'")
        if self.augment_ratio < 0:
            raise ConfigError("augment_ratio must be non-negative")

    def model_config(self) -> ModelConfig:
        return ModelConfig.from_dict({**self.model, "share_encoders": self.share_encoders})

    def to_dict(self) -> dict[str, Any]:
        d = dataclasses.asdict(self)
        if d["manual_weights"] is not None:
            d["manual_weights"] = list(d["manual_weights"])
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> TrainConfig:
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown TrainConfig fields: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path: str | os.PathLike) -> TrainConfig:
        try:
            with open(path) as f:
                return cls.from_dict(json.load(f))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read train config {path}: {exc}") from exc


# --------------------------------------------------------- class weights ---


def class_weights_from_counts(n_static: int, n_moving: int, w_max: float = W_MAX) -> tuple[float, float]:
    """Inverse-frequency weights ``T / (2 n_c)``, clamped to ``w_max``.

    The mean per-pixel weight is 1 and ``w1 / w0 = n0 / n1`` whenever no
    clamping happens.
    """
    total = n_static + n_moving
    if total <= 0:
        raise EmptyManifest("no pixels to weight")
    out = []
    for name, n in (("static", n_static), ("moving", n_moving)):
        w = total / (2.0 * n) if n else math.inf
        if w > w_max:
            log.warning("%s class %s; weight clamped to %g", name, "absent" if n == 0 else "very rare", w_max)
            w = w_max
        out.append(w)
    return out[0], out[1]


def compute_class_weights(
    manifest: DatasetManifest, label_source: str = "annotation", mode: str = "inverse_frequency", manual=None
) -> tuple[float, float]:
    if not manifest.records:
        raise EmptyManifest("cannot compute class weights of an empty manifest")
    if mode == "uniform":
        return 1.0, 1.0
    if mode == "manual":
        return float(manual[0]), float(manual[1])
    moving = total = 0
    for rec in manifest.records:
        m = load_mask(manifest, rec, label_source)
        moving += m.count()
        total += m.width * m.height
    return class_weights_from_counts(total - moving, moving)


# -------------------------------------------------------- augmentation ---


def augmentation_scene_count(n_samples: int, ratio: float, samples_per_scene: int) -> int:
    """Scenes needed to add ``round(ratio * n_samples)`` static samples."""
    return math.ceil(round(ratio * n_samples) / samples_per_scene)


def apply_augmentation(cfg: TrainConfig, manifest: DatasetManifest) -> DatasetManifest:
    """Append static-only scenes to the train manifest according to ``cfg.augment_ratio``."""
    if cfg.augment_ratio == 0:
        return manifest
    if cfg.augment_template is None:
        raise ConfigError("augmentation needs augment_template (a scene config)")
    template = SceneConfig.from_dict(cfg.augment_template)
    n_extra = augmentation_scene_count(len(manifest), cfg.augment_ratio, template.n_frames - template.stride)
    out = augment_static_scenes(manifest, n_extra, cfg.seed, template)
    for s in out.scenes[len(manifest.scenes) :]:
        s["provenance"] = {"augment_ratio": cfg.augment_ratio, "augment_seed": cfg.seed, "base_samples": len(manifest)}
    return out


# --------------------------------------------------------------- logging ---


@dataclass
class RunLog:
    records: list[dict[str, float]] = field(default_factory=list)

    COLUMNS = ("epoch", "train_loss", "miou", "moving_iou", "seconds")

    def append(self, epoch: int, train_loss: float, miou: float, moving_iou: float, seconds: float) -> None:
        if self.records and epoch <= self.records[-1]["epoch"]:
            raise ValueError("RunLog epochs must increase")
        vals = (train_loss, miou, moving_iou, seconds)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError("RunLog values must be finite")
        self.records.append(dict(zip(self.COLUMNS, (epoch, *vals))))

    def save_csv(self, path: str | os.PathLike) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(self.COLUMNS)
            for r in self.records:
                w.writerow([r["epoch"]] + [fmt(r[k]) for k in self.COLUMNS[1:]])

    @classmethod
    def load_csv(cls, path: str | os.PathLike) -> RunLog:
        out = cls()
        with open(path) as f:
            for row in csv.DictReader(f):
                out.append(int(row["epoch"]), *(float(row[k]) for k in cls.COLUMNS[1:]))
        return out


# ------------------------------------------------------------------ data ---


@dataclass
class TrainData:
    frames_t: np.ndarray  # [N, 3, H, W]
    frames_t1: np.ndarray
    labels: np.ndarray  # [N, H, W] int
    records: list[dict[str, Any]]


def load_training_data(manifest: DatasetManifest, label_source: str) -> TrainData:
    if not manifest.records:
        raise EmptyManifest("training manifest has no frames")
    xa, xb, ys = [], [], []
    for rec in manifest.records:
        try:
            a, b = load_pair(manifest, rec)
            y = load_mask(manifest, rec, label_source).data
        except DataError as exc:
            raise DataError(f"frame {rec.get('scene_id')}/{rec.get('frame_index')}: {exc}") from exc
        if y.shape != a.shape[1:]:
            raise DataError(f"frame {rec['scene_id']}/{rec['frame_index']}: mask {y.shape} != image {a.shape[1:]}")
        xa.append(a)
        xb.append(b)
        ys.append(y.astype(np.int64))
    return TrainData(np.stack(xa), np.stack(xb), np.stack(ys), list(manifest.records))


# ------------------------------------------------------------------ loop ---


def train_step(weights: ModelWeights, mcfg: ModelConfig, state: AdamState, xa, xb, y, class_weights) -> float:
    weights.zero_grad()
    with GradTape() as tape:
        logits = forward(weights, mcfg, xa, xb, train=True)
        loss = weighted_cross_entropy(logits, y, class_weights)
    tape.backward(loss)
    adam_step(weights.arrays(), weights.grads(), state)
    return loss.item()


def train(
    cfg: TrainConfig,
    train_manifest: DatasetManifest | None = None,
    test_manifest: DatasetManifest | None = None,
    out_dir: str | None = None,
) -> tuple[ModelWeights, RunLog, EvalReport | None]:
    """Train from scratch; returns final weights, the run log and the last eval report.

    Manifests default to the paths in ``cfg``.  With ``out_dir`` (or
    ``cfg.checkpoint``) the final weights are checkpointed in FMOD format
    alongside ``runlog.csv``.
    """
    mcfg = cfg.model_config()
    if train_manifest is None:
        if not cfg.train_manifest:
            raise ConfigError("no train manifest given")
        train_manifest = load_manifest(cfg.train_manifest, "train")
    if test_manifest is None and cfg.test_manifest:
        test_manifest = load_manifest(cfg.test_manifest, "test")
    # class weights come from the annotated frames only, so that switching
    # augmentation on changes the data seen and nothing else
    cw = compute_class_weights(train_manifest, cfg.label_source, cfg.class_weight_mode, cfg.manual_weights)
    train_manifest = apply_augmentation(cfg, train_manifest)

    data = load_training_data(train_manifest, cfg.label_source)
    if data.frames_t.shape[2:] != (mcfg.height, mcfg.width):
        raise ConfigError(f"images are {data.frames_t.shape[2:]}, model expects {(mcfg.height, mcfg.width)}")
    log.info("training on %d pairs, class weights %.4g / %.4g", len(data.labels), *cw)

    weights = init_weights(mcfg, cfg.seed)
    state = AdamState(lr=cfg.lr, weight_decay=cfg.weight_decay)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1]))
    runlog = RunLog()
    report = None
    n = len(data.labels)
    start = time.perf_counter()
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n)
        losses, sizes = [], []
        for i in range(0, n, cfg.batch_size):
            idx = order[i : i + cfg.batch_size]
            loss = train_step(weights, mcfg, state, data.frames_t[idx], data.frames_t1[idx], data.labels[idx], cw)
            if not math.isfinite(loss):
                raise NumericalError(f"non-finite loss {loss} at epoch {epoch}, step {i // cfg.batch_size}")
            losses.append(loss)
            sizes.append(len(idx))
        epoch_loss = float(np.average(losses, weights=sizes))
        if epoch % cfg.eval_every == 0 or epoch == cfg.epochs:
            if test_manifest is not None:
                report = evaluate(weights, mcfg, test_manifest, cfg.eval_label_source)
                miou, mov = report.miou, report.iou_moving
            else:
                miou = mov = 0.0
            secs = time.perf_counter() - start if cfg.record_wall_time else 0.0
            runlog.append(epoch, epoch_loss, miou, mov, secs)
            log.info("epoch %d loss %.5f miou %.4f moving %.4f", epoch, epoch_loss, miou, mov)

    ckpt = cfg.checkpoint or (os.path.join(out_dir, "weights.fmod") if out_dir else None)
    if ckpt:
        os.makedirs(os.path.dirname(os.path.abspath(ckpt)), exist_ok=True)
        save_weights(
            ckpt,
            weights,
            mcfg,
            {"epoch": cfg.epochs, "manifest_hash": train_manifest.content_hash(), "train_config": cfg.to_dict(), "class_weights": list(cw)},
        )
        runlog.save_csv(os.path.join(os.path.dirname(os.path.abspath(ckpt)), "runlog.csv"))
    return weights, runlog, report
