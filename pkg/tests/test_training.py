import dataclasses
import logging
import math

import numpy as np
import pytest

from fisheye_mod.annotation import SegmentationMask
from fisheye_mod.dataset import DatasetManifest, build_dataset
from fisheye_mod.errors import ConfigError, EmptyManifest, NumericalError
from fisheye_mod.evaluation import evaluate
from fisheye_mod import training
from fisheye_mod.modnet import MICRO, forward, init_weights, load_weights
from fisheye_mod.synth import SceneConfig, desk_fisheye
from fisheye_mod.tensor import Tensor, weighted_cross_entropy
from fisheye_mod.training import (
    RunLog,
    TrainConfig,
    apply_augmentation,
    augmentation_scene_count,
    class_weights_from_counts,
    compute_class_weights,
    train,
)

MICRO_SCENE = SceneConfig(n_frames=3, dt=0.5, camera=desk_fisheye(24, 16), lidar_rays=90, lidar_channels=8, moving_fraction=0.5)
MICRO_MODEL = MICRO.to_dict()


def tc(**kw):
    base = dict(seed=0, epochs=2, batch_size=2, lr=1e-3, label_source="gt", model=MICRO_MODEL)
    return TrainConfig(**{**base, **kw})


@pytest.fixture(scope="module")
def micro_data(tmp_path_factory):
    root = str(tmp_path_factory.mktemp("micro"))
    return build_dataset(MICRO_SCENE, 4, root, n_static_test=1)


def mask_manifest(tmp_path, counts, size=(100, 100)):
    """Manifest whose gt masks have the given moving-pixel counts."""
    recs = []
    for i, n in enumerate(counts):
        data = np.zeros(size[0] * size[1], dtype=np.uint8)
        data[:n] = 1
        name = f"m{i}.pgm"
        SegmentationMask(size[1], size[0], data.reshape(size)).save_pgm(tmp_path / name)
        recs.append({"scene_id": f"s{i}", "frame_index": 1, "gt_mask": name, "mask": name})
    return DatasetManifest("train", "fisheye", recs, root=str(tmp_path))


class TestClassWeights:
    def test_balanced(self):
        assert class_weights_from_counts(50, 50) == (1.0, 1.0)

    def test_rare_moving_regime(self, tmp_path):
        m = mask_manifest(tmp_path, [54, 54])
        w0, w1 = compute_class_weights(m, "gt")
        assert w0 == pytest.approx(10000 / (2 * 9946), abs=1e-12)
        assert w1 == pytest.approx(10000 / 108, abs=1e-12)
        assert abs(w1 / w0 - 99.46 / 0.54) < 1e-9
        assert round(w0, 4) == 0.5027 and round(w1, 2) == 92.59

    def test_mean_weight_is_one(self):
        n0, n1 = 9000, 1000
        w0, w1 = class_weights_from_counts(n0, n1)
        assert (w0 * n0 + w1 * n1) / (n0 + n1) == pytest.approx(1.0)

    def test_absent_class_clamped(self, caplog):
        with caplog.at_level(logging.WARNING, logger="fisheye_mod.training"):
            w0, w1 = class_weights_from_counts(1000, 0)
        assert (w0, w1) == (0.5, training.W_MAX)
        assert "clamped" in caplog.text

    def test_modes(self, tmp_path):
        m = mask_manifest(tmp_path, [10])
        assert compute_class_weights(m, "gt", "uniform") == (1.0, 1.0)
        assert compute_class_weights(m, "gt", "manual", (0.3, 7.0)) == (0.3, 7.0)

    def test_empty(self):
        with pytest.raises(EmptyManifest):
            compute_class_weights(DatasetManifest("train", "fisheye"))

    def test_reweighting_penalises_majority_collapse(self):
        target = np.zeros((1, 10, 10), dtype=int)
        target[0, 0, 0] = 1  # 99/1 batch
        logits = Tensor(np.stack([np.full((10, 10), 2.0), np.zeros((10, 10))])[None])
        w = class_weights_from_counts(99, 1)
        assert weighted_cross_entropy(logits, target, w).item() > weighted_cross_entropy(logits, target, (1, 1)).item()


class TestConfig:
    @pytest.mark.parametrize(
        "kw",
        [{"epochs": 0}, {"batch_size": 0}, {"lr": -1}, {"weight_decay": -1e-3}, {"eval_every": 0},
         {"class_weight_mode": "sqrt"}, {"class_weight_mode": "manual"}, {"label_source": "lidar"}, {"augment_ratio": -0.5}],
    )
    def test_invalid(self, kw):
        with pytest.raises(ConfigError):
            TrainConfig(**kw)

    def test_defaults(self):
        cfg = TrainConfig()
        assert cfg.lr == 1e-4 and cfg.weight_decay == 5e-4

    def test_json_round_trip(self, tmp_path):
        cfg = tc(class_weight_mode="manual", manual_weights=(1, 5))
        path = tmp_path / "t.json"
        import json

        path.write_text(json.dumps(cfg.to_dict()))
        assert TrainConfig.load(path) == cfg
        with pytest.raises(ConfigError):
            TrainConfig.from_dict({"epochs": 1, "learning_rate": 1})


class TestAugmentation:
    def test_reference_sample_growth(self):
        assert augmentation_scene_count(3638, 2211 / 3638, 1) == 2211
        assert 3638 + augmentation_scene_count(3638, 0.6, 1) == 5821

    def test_disabled_is_identity(self, micro_data):
        train_m, _ = micro_data
        assert apply_augmentation(tc(), train_m) is train_m

    def test_needs_template(self, micro_data):
        with pytest.raises(ConfigError):
            apply_augmentation(tc(augment_ratio=0.5), micro_data[0])

    def test_appended_scenes_train_only(self, micro_data):
        train_m, test_m = micro_data
        cfg = tc(augment_ratio=0.5, augment_template=MICRO_SCENE.to_dict())
        aug = apply_augmentation(cfg, train_m)
        n_new = len(aug) - len(train_m)
        assert n_new == augmentation_scene_count(len(train_m), 0.5, 2) * 2
        new_scenes = aug.scenes[len(train_m.scenes):]
        assert all(s["provenance"]["augment_ratio"] == 0.5 for s in new_scenes)
        assert not {s["scene_id"] for s in new_scenes} & set(test_m.scene_ids())


class TestRunLog:
    def test_validation(self):
        log = RunLog()
        log.append(1, 0.5, 0.4, 0.3, 0.0)
        with pytest.raises(ValueError):
            log.append(1, 0.5, 0.4, 0.3, 0.0)
        with pytest.raises(ValueError):
            log.append(2, math.nan, 0.4, 0.3, 0.0)

    def test_csv_round_trip(self, tmp_path):
        log = RunLog()
        log.append(2, 0.123456789, 0.5, 0.25, 0.0)
        log.append(4, 0.1, 0.6, 0.3, 1.5)
        log.save_csv(tmp_path / "r.csv")
        text = (tmp_path / "r.csv").read_text()
        assert text.splitlines()[0] == "epoch,train_loss,miou,moving_iou,seconds"
        assert "0.123457" in text
        back = RunLog.load_csv(tmp_path / "r.csv")
        assert [r["epoch"] for r in back.records] == [2, 4]


class TestLoop:
    def test_step0_loss_near_ln2(self, micro_data):
        cfg = tc(epochs=1, lr=0.0, class_weight_mode="uniform")
        _, log, _ = train(cfg, micro_data[0])
        assert abs(log.records[0]["train_loss"] - math.log(2)) < 0.2

    def test_zero_lr_keeps_weights(self, micro_data):
        cfg = tc(epochs=2, lr=0.0, weight_decay=0.0)
        w, _, _ = train(cfg, micro_data[0])
        init = init_weights(cfg.model_config(), cfg.seed)
        assert all(np.array_equal(w.params[k].data, init.params[k].data) for k in init.params)
        assert not all(np.array_equal(w.buffers[k], init.buffers[k]) for k in init.buffers)

    def test_deterministic(self, micro_data):
        cfg = tc(epochs=2)
        a = train(cfg, *micro_data)
        b = train(cfg, *micro_data)
        assert a[1].records == b[1].records
        assert all(np.array_equal(a[0].params[k].data, b[0].params[k].data) for k in a[0].params)

    def test_loss_decreases(self, micro_data):
        _, log, _ = train(tc(epochs=30, eval_every=29, lr=3e-3), micro_data[0])
        assert log.records[-1]["train_loss"] < log.records[0]["train_loss"]
        assert [r["epoch"] for r in log.records] == [29, 30]

    def test_eval_rows(self, micro_data):
        _, log, report = train(tc(epochs=3, eval_every=2), *micro_data)
        assert [r["epoch"] for r in log.records] == [2, 3]
        assert report.n_frames == len(micro_data[1])
        assert log.records[-1]["moving_iou"] == report.iou_moving
        assert all(r["seconds"] == 0.0 for r in log.records)

    def test_checkpoint_round_trip(self, micro_data, tmp_path):
        cfg = tc(epochs=2)
        w, log, report = train(cfg, *micro_data, out_dir=str(tmp_path))
        back, mcfg = load_weights(tmp_path / "weights.fmod")
        assert back.meta["epoch"] == 2 and back.meta["manifest_hash"] == micro_data[0].content_hash()
        again = evaluate(back, mcfg, micro_data[1])
        assert again.to_dict() == report.to_dict()
        assert RunLog.load_csv(tmp_path / "runlog.csv").records == [
            {k: float(f"{v:.6g}") for k, v in r.items()} for r in log.records
        ]

    def test_size_mismatch(self, micro_data):
        cfg = tc(model={**MICRO_MODEL, "height": 32})
        with pytest.raises(ConfigError):
            train(cfg, micro_data[0])

    def test_non_finite_loss_aborts(self, micro_data, monkeypatch):
        monkeypatch.setattr(training, "train_step", lambda *a, **k: math.nan)
        with pytest.raises(NumericalError, match="epoch 1, step 0"):
            train(tc(epochs=1), micro_data[0])

    def test_missing_manifest(self):
        with pytest.raises(ConfigError):
            train(tc())

    def test_shared_flag_reaches_model(self):
        assert tc(share_encoders=True).model_config().share_encoders
        assert dataclasses.replace(tc(), share_encoders=False).model_config() == MICRO
