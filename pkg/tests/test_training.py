import json
from collections import Counter

import numpy as np
import pytest
import torch
from safetensors.numpy import save_file

from conftest import toy_config
from gesturegen.data import GestureDataset
from gesturegen.masking import POSE_PROBS, SPEECH_PROBS, TEXT_PROBS, PoseMode, SpeechMode, TextMode
from gesturegen.model import GestureModel
from gesturegen.training import (
    CheckpointError,
    StageConfig,
    StageOrderError,
    TrainLog,
    generate_for_dataset,
    load_checkpoint,
    model_from_checkpoint,
    save_checkpoint,
    train_stage1,
    train_stage2,
    train_stage3,
)


def _group(ckpt, prefix):
    return {k: v for k, v in ckpt.params.items() if k.startswith(prefix + ".")}


def _assert_bitwise_equal(a, b):
    assert a.keys() == b.keys() and a
    for k in a:
        assert a[k].tobytes() == b[k].tobytes(), k


def _strip_wall(records):
    return [{k: v for k, v in r.items() if k != "wall_s"} for r in records]


class TestStageConfig:
    @pytest.mark.parametrize("stage, batch, epochs", [(1, 64, 50), (2, 64, 100), (3, 32, 360)])
    def test_defaults(self, stage, batch, epochs):
        cfg = StageConfig(stage)
        assert (cfg.learning_rate, cfg.batch_size, cfg.epochs) == (0.005, batch, epochs)
        assert cfg.betas == (0.9, 0.999) and not cfg.unfreeze

    def test_mapping_sections(self):
        cfg = StageConfig.from_mapping(2, {"seed": 3, "stage2": {"epochs": 7}, "stage3": {"epochs": 9},
                                           "model": {"d_model": 64}})
        assert (cfg.seed, cfg.epochs) == (3, 7)
        with pytest.raises(ValueError, match="unknown config keys"):
            StageConfig.from_mapping(1, {"learnin_rate": 0.1})

    def test_invalid_stage(self):
        with pytest.raises(ValueError):
            StageConfig(4)


class TestStage1:
    def test_improves(self, pipeline):
        totals = [r["total"] for r in pipeline["logs"][1].records]
        assert len(totals) == 50 and min(totals[1:]) < totals[0] and totals[-1] < totals[0]

    def test_deterministic(self, dataset):
        logs = [TrainLog(), TrainLog()]
        ckpts = [train_stage1(dataset, StageConfig(1, epochs=3, seed=5), log_to=lg) for lg in logs]
        assert _strip_wall(logs[0].records) == _strip_wall(logs[1].records)
        _assert_bitwise_equal(ckpts[0].params, ckpts[1].params)

    def test_encoder_decoder_untouched(self, dataset):
        ckpt = train_stage1(dataset, StageConfig(1, epochs=2, seed=4))
        torch.manual_seed(4)
        init = GestureModel(ckpt.model_config).state_dict()
        for name, value in ckpt.params.items():
            if name.startswith(("encoder.", "decoder.")):
                assert init[name].numpy().tobytes() == value.tobytes(), name
        assert any(not np.array_equal(init[k].numpy(), v) for k, v in _group(ckpt, "embedder").items())

    def test_empty_dataset(self, dataset):
        with pytest.raises(ValueError, match="empty"):
            train_stage1(GestureDataset([], dataset.vocab), StageConfig(1, epochs=1))


class TestStage2:
    def test_frozen_groups(self, pipeline):
        ck1, ck2 = pipeline["ckpt"][1], pipeline["ckpt"][2]
        for group in ("embedder", "generator"):
            _assert_bitwise_equal(_group(ck1, group), _group(ck2, group))
        assert any(not np.array_equal(ck1.params[k], v) for k, v in _group(ck2, "encoder").items())

    def test_masked_pose_error_improves(self, pipeline, dataset):
        log = TrainLog()
        train_stage2(dataset, pipeline["ckpt"][1], StageConfig(2, epochs=100), log_to=log)
        rec = log.records
        assert len(rec) == 100 and rec[-1]["masked_pose_l1"] < rec[0]["masked_pose_l1"]

    def test_logged_mask_frequencies(self, dataset):
        toy_cfg = toy_config(len(dataset.vocab))
        ckpt1 = train_stage1(dataset, StageConfig(1, epochs=0), model_cfg=toy_cfg)
        big = GestureDataset(dataset.clips * 625, dataset.vocab)  # 5,000 samples per epoch
        log = TrainLog()
        train_stage2(big, ckpt1, StageConfig(2, epochs=1, batch_size=1000), log_to=log)
        freq, n = log.records[0]["mask_freq"], log.records[0]["n_samples"]
        assert n == 5000
        for prefix, modes, probs in (("text", TextMode, TEXT_PROBS), ("speech", SpeechMode, SPEECH_PROBS),
                                     ("pose", PoseMode, POSE_PROBS)):
            for mode in modes:
                assert freq[f"{prefix}.{mode.name}"] == pytest.approx(probs[mode], abs=0.02)

    def test_stage_order(self, pipeline, dataset):
        with pytest.raises(StageOrderError):
            train_stage2(dataset, pipeline["ckpt"][3], StageConfig(2, epochs=1))


class TestStage3:
    def test_recon_terms_logged(self, pipeline):
        rec = pipeline["logs"][3].records
        assert len(rec) == 200
        for r in rec:
            assert np.isfinite(r["ce_text"]) and np.isfinite(r["l1_speech"])

    def test_rejects_stage1_checkpoint(self, pipeline, dataset):
        with pytest.raises(StageOrderError, match="stage-2 checkpoint"):
            train_stage3(dataset, pipeline["ckpt"][1], StageConfig(3, epochs=1))

    def test_override_allows_skip(self, pipeline, dataset):
        ckpt = train_stage3(dataset, pipeline["ckpt"][1], StageConfig(3, epochs=1, allow_stage_skip=True))
        assert ckpt.stage == 3

    def test_generated_motion_alive(self, pipeline, dataset):
        gen = generate_for_dataset(model_from_checkpoint(pipeline["ckpt"][3]), dataset)
        assert np.abs(np.diff(gen[:, 10:], axis=1)).mean() > 0

    @pytest.mark.slow
    def test_velocity_reward_ablation(self, pipeline, dataset):
        """A positive velocity weight yields livelier output than beta = 0."""
        vel = {}
        for beta in (0.0, 0.1):
            ckpt = train_stage3(dataset, pipeline["ckpt"][2], StageConfig(3, epochs=60, pose_beta=beta))
            gen = generate_for_dataset(model_from_checkpoint(ckpt), dataset)
            vel[beta] = np.abs(np.diff(gen[:, 10:], axis=1)).mean()
        assert vel[0.1] >= vel[0.0]


class TestCheckpoint:
    def test_round_trip(self, pipeline, tmp_path):
        ckpt = pipeline["ckpt"][3]
        save_checkpoint(ckpt, tmp_path / "a.ckpt")
        loaded = load_checkpoint(tmp_path / "a.ckpt")
        _assert_bitwise_equal(ckpt.params, loaded.params)
        assert loaded.metadata() == json.loads(json.dumps(ckpt.metadata()))
        save_checkpoint(loaded, tmp_path / "b.ckpt")
        assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()

    def test_model_round_trip(self, pipeline):
        ckpt = pipeline["ckpt"][2]
        model = model_from_checkpoint(ckpt)
        for k, v in model.state_dict().items():
            assert v.numpy().tobytes() == ckpt.params[k].tobytes()

    def test_missing(self, tmp_path):
        with pytest.raises(CheckpointError, match="not found"):
            load_checkpoint(tmp_path / "nope.ckpt")

    def test_corrupt(self, pipeline, tmp_path):
        save_checkpoint(pipeline["ckpt"][1], tmp_path / "a.ckpt")
        data = (tmp_path / "a.ckpt").read_bytes()
        (tmp_path / "a.ckpt").write_bytes(data[: len(data) // 2])
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "a.ckpt")
        (tmp_path / "b.ckpt").write_bytes(b"not a checkpoint")
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "b.ckpt")

    def test_version_absent(self, tmp_path):
        meta = {"stage": 1, "epoch": 0, "seed": 0, "config": {}}
        save_file({"w": np.zeros(2, np.float32)}, str(tmp_path / "v.ckpt"),
                  metadata={"gesturegen": json.dumps(meta)})
        with pytest.raises(CheckpointError, match="no version"):
            load_checkpoint(tmp_path / "v.ckpt")

    def test_version_mismatch(self, tmp_path):
        meta = {"version": "999", "stage": 1, "epoch": 0, "seed": 0, "config": {}}
        save_file({"w": np.zeros(2, np.float32)}, str(tmp_path / "v.ckpt"),
                  metadata={"gesturegen": json.dumps(meta)})
        with pytest.raises(CheckpointError, match="version"):
            load_checkpoint(tmp_path / "v.ckpt")


def test_train_log_jsonl(tmp_path):
    log = TrainLog()
    log.append({"epoch": 1, "total": 0.5})
    log.append({"epoch": 2, "total": 0.25, "mask_freq": dict(Counter(a=1))})
    log.write_jsonl(tmp_path / "x.log")
    assert TrainLog.read_jsonl(tmp_path / "x.log") == log.records
