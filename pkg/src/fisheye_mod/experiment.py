"""End-to-end presets: synthesise, annotate, train and evaluate in one go.

A preset is a JSON document::

    {"name": ..., "seed": ...,
     "scene": SceneConfig fields (camera as "fisheye"/"rectilinear" or a dict),
     "test_camera": camera used to render the test split,
     "dataset": {"n_scenes", "train_fraction", "n_static_test"},
     "annotation": {"v_min", "min_points"},
     "train": TrainConfig fields}

The four bundled presets differ only in the training camera, encoder
sharing and static-scene augmentation.
"""

from __future__ import annotations

import copy
import json
import logging
import os
from importlib import resources
from typing import Any

from . import __version__
from .annotation import MotionConfig
from .dataset import annotate_dataset, build_dataset, save_manifest
from .errors import ConfigError
from .evaluation import write_json
from .synth import SceneConfig
from .training import TrainConfig, train

log = logging.getLogger(__name__)

PRESETS = ("rect_baseline", "fisheye_base", "fisheye_shared", "fisheye_shared_aug")


def load_preset(name_or_path: str) -> dict[str, Any]:
    """A bundled preset by name, or any preset JSON file by path."""
    try:
        if name_or_path in PRESETS:
            text = resources.files("fisheye_mod.presets").joinpath(f"{name_or_path}.json").read_text()
        else:
            with open(name_or_path) as f:
                text = f.read()
        return json.loads(text)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot load preset {name_or_path!r}: {exc}") from exc


def resolve(preset: dict[str, Any], seed: int | None = None) -> dict[str, Any]:
    """Copy of ``preset`` with one seed pushed into every seeded section."""
    p = copy.deepcopy(preset)
    s = int(p.get("seed", 0) if seed is None else seed)
    p["seed"] = s
    p.setdefault("scene", {})["seed"] = s
    p.setdefault("train", {})["seed"] = s
    return p


def scene_configs(p: dict[str, Any]) -> tuple[SceneConfig, SceneConfig]:
    train_cfg = SceneConfig.from_dict(p["scene"])
    test_cfg = SceneConfig.from_dict({**p["scene"], "camera": p.get("test_camera", p["scene"].get("camera", "fisheye"))})
    return train_cfg, test_cfg


def run_experiment(preset: dict[str, Any], out_dir: str, seed: int | None = None) -> dict[str, Any]:
    """synth -> annotate -> train -> eval; writes a provenance bundle to ``out_dir``.

    Output layout::

        preset.json           resolved preset (seed applied)
        dataset/              rendered scenes + manifest.json
        annotations/          annotated train split
        model/weights.fmod    final weights (+ .json metadata, runlog.csv)
        eval_report.json      test-set report, per_frame.csv alongside
        provenance.json       manifest and config hashes
    """
    p = resolve(preset, seed)
    os.makedirs(out_dir, exist_ok=True)
    write_json(os.path.join(out_dir, "preset.json"), p)

    scene_cfg, test_cfg = scene_configs(p)
    ds = p.get("dataset", {})
    train_m, test_m = build_dataset(
        scene_cfg,
        int(ds.get("n_scenes", 10)),
        os.path.join(out_dir, "dataset"),
        float(ds.get("train_fraction", 0.7)),
        split_seed=p["seed"],
        n_static_test=int(ds.get("n_static_test", 0)),
        test_cfg=test_cfg,
    )
    log.info("dataset: %d train / %d test pairs", len(train_m), len(test_m))

    ann_dir = os.path.join(out_dir, "annotations")
    ann_m, skipped = annotate_dataset(train_m, ann_dir, MotionConfig(**p.get("annotation", {})))
    save_manifest(os.path.join(ann_dir, "manifest.json"), ann_m)
    log.info("annotated %d pairs, %d objects skipped", len(ann_m), len(skipped))

    tdict = dict(p.get("train", {}))
    if tdict.get("augment_ratio"):
        tdict.setdefault("augment_template", {**scene_cfg.to_dict(), "seed": p["seed"]})
    tcfg = TrainConfig.from_dict(tdict)
    model_dir = os.path.join(out_dir, "model")
    weights, runlog, report = train(tcfg, ann_m, test_m, out_dir=model_dir)

    report.save(os.path.join(out_dir, "eval_report.json"), os.path.join(out_dir, "per_frame.csv"))
    provenance = {
        "package_version": __version__,
        "preset": p.get("name"),
        "seed": p["seed"],
        "scene_config_hash": scene_cfg.content_hash(),
        "test_scene_config_hash": test_cfg.content_hash(),
        "model_config_hash": tcfg.model_config().content_hash(),
        "train_manifest_hash": train_m.content_hash(),
        "annotated_manifest_hash": ann_m.content_hash(),
        "test_manifest_hash": test_m.content_hash(),
        "n_train_pairs": len(ann_m),
        "n_test_pairs": len(test_m),
        "n_skipped_objects": len(skipped),
    }
    write_json(os.path.join(out_dir, "provenance.json"), provenance)
    return {"report": report, "runlog": runlog, "weights": weights, "provenance": provenance, "train_config": tcfg}
