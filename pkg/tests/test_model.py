import math

import numpy as np
import pytest
import torch

from conftest import random_clip, toy_config
from gesturegen.data import TextSequence
from gesturegen.masking import MASK_SENTINEL, full_ignore_frames
from gesturegen.model import (
    GestureModel,
    ModelConfig,
    generate_gesture,
    parameter_groups,
    sinusoidal_positional_encoding,
)


def _inputs(rng, batch=2):
    clips = [random_clip(rng) for _ in range(batch)]
    ids = torch.as_tensor(np.stack([c.text.token_ids for c in clips]))
    speech = torch.as_tensor(np.stack([c.speech for c in clips]))
    pose = torch.as_tensor(np.stack([c.pose for c in clips]))
    return ids, speech, pose


class TestEmbedder:
    def test_shapes(self, toy_model):
        e_t, e_s, e_p = toy_model.embedder(*_inputs(np.random.default_rng(0)))
        assert e_t.shape == (2, 32, 8) and e_s.shape == (2, 45, 8) and e_p.shape == (2, 40, 8)

    def test_pose_permutation_equivariance(self, toy_model):
        _, _, pose = _inputs(np.random.default_rng(1))
        perm = torch.randperm(40, generator=torch.Generator().manual_seed(0))
        a = toy_model.embedder.embed_pose(pose)[:, perm]
        b = toy_model.embedder.embed_pose(pose[:, perm])
        torch.testing.assert_close(a, b, rtol=0, atol=0)

    def test_path_independence(self, toy_model):
        ids, speech, pose = _inputs(np.random.default_rng(2))
        e1 = toy_model.embedder(ids, speech, pose)
        e2 = toy_model.embedder(ids, speech + 1.0, pose)
        assert torch.equal(e1[0], e2[0]) and torch.equal(e1[2], e2[2])
        assert not torch.equal(e1[1], e2[1])

    def test_token_out_of_range(self, toy_model):
        ids, speech, pose = _inputs(np.random.default_rng(3))
        ids[0, 0] = 9
        with pytest.raises(ValueError):
            toy_model.embedder(ids, speech, pose)

    def test_sentinel_rows_use_mask_vector(self, toy_model):
        _, speech, _ = _inputs(np.random.default_rng(4))
        speech[0, 5] = MASK_SENTINEL
        out = toy_model.embedder.embed_speech(speech)
        torch.testing.assert_close(out[0, 5], toy_model.embedder.speech_mask, rtol=0, atol=0)
        speech[0, 6, 0] = MASK_SENTINEL  # partial row is an ordinary frame
        assert not torch.equal(toy_model.embedder.embed_speech(speech)[0, 6], toy_model.embedder.speech_mask)


class TestPositionalEncoding:
    def test_values(self):
        pe = sinusoidal_positional_encoding(117, 8)
        assert torch.all(pe[0, 0::2] == 0) and torch.all(pe[0, 1::2] == 1)
        assert pe[1, 0].item() == pytest.approx(math.sin(1.0), abs=1e-12)
        assert pe[1, 0].item() == pytest.approx(0.8415, abs=1e-4)
        assert pe[7, 3].item() == pytest.approx(math.cos(7 / 10000 ** (2 / 8)), abs=1e-12)
        assert pe.abs().max() <= 1.0

    def test_odd_dim(self):
        with pytest.raises(ValueError):
            sinusoidal_positional_encoding(4, 3)


class TestEncoder:
    def test_shape(self, toy_model):
        e = toy_model.embedder(*_inputs(np.random.default_rng(0)))
        assert toy_model.encoder(*e).shape == (2, 117, 8)

    def test_residual_identity(self, toy_model):
        with torch.no_grad():
            for block in toy_model.encoder.blocks:
                for mod in (block.attn, block.ff):
                    for p in mod.parameters():
                        p.zero_()
        e = toy_model.embedder(*_inputs(np.random.default_rng(0)))
        out = toy_model.encoder(*e)
        expected = torch.cat(e, dim=1) + sinusoidal_positional_encoding(117, 8).float().double()
        torch.testing.assert_close(out, expected, rtol=0, atol=0)

    def test_attention_rows_sum_to_one(self, toy_model):
        x = torch.randn(2, 117, 8, dtype=torch.float64)
        _, w = toy_model.encoder.blocks[0].attn(x, x, x, return_weights=True)
        assert w.shape == (2, 2, 117, 117)
        torch.testing.assert_close(w.sum(-1), torch.ones(2, 2, 117, dtype=torch.float64))

    def test_no_causal_mask(self, toy_model):
        e_t, e_s, e_p = toy_model.embedder(*_inputs(np.random.default_rng(5)))
        base = toy_model.encoder(e_t, e_s, e_p)
        e_p2 = e_p.clone()
        e_p2[:, -1] += 1.0
        # the last pose row influences the very first text row
        assert not torch.equal(base[:, 0], toy_model.encoder(e_t, e_s, e_p2)[:, 0])


class TestDecoder:
    def test_zero_queries(self, toy_model):
        with pytest.raises(ValueError, match="decoder requires at least one query frame"):
            toy_model.decoder(torch.randn(1, 117, 8, dtype=torch.float64),
                              torch.empty(1, 0, 8, dtype=torch.float64))

    def test_key_permutation_invariance(self, toy_model):
        g = torch.Generator().manual_seed(1)
        hidden = torch.randn(1, 117, 8, generator=g, dtype=torch.float64)
        prev = torch.randn(1, 12, 8, generator=g, dtype=torch.float64)
        perm = torch.randperm(117, generator=g)
        a = toy_model.decoder(hidden, prev)
        b = toy_model.decoder(hidden[:, perm], prev)
        torch.testing.assert_close(a, b, rtol=1e-12, atol=1e-12)

    def test_weights_and_determinism(self, toy_model):
        hidden = torch.randn(1, 117, 8, dtype=torch.float64)
        prev = torch.randn(1, 3, 8, dtype=torch.float64)
        out, weights = toy_model.decoder(hidden, prev, return_weights=True)
        assert out.shape == (1, 8)
        torch.testing.assert_close(weights[0].sum(-1), torch.ones(1, 2, 3, dtype=torch.float64))
        assert torch.equal(out, toy_model.decoder(hidden, prev))


class TestGenerator:
    def test_shapes_and_framewise(self, toy_model):
        f = [torch.randn(1, n, 8, dtype=torch.float64) for n in (32, 45, 40)]
        logits, speech, pose = toy_model.generator(*f)
        assert logits.shape == (1, 32, 9) and speech.shape == (1, 45, 128) and pose.shape == (1, 40, 165)
        f2 = [x.clone() for x in f]
        f2[2][0, 7] += 1.0
        pose2 = toy_model.generator(*f2)[2]
        changed = (pose2 != pose).any(-1)[0]
        assert changed.nonzero().flatten().tolist() == [7]
        assert torch.isfinite(pose).all()


class TestGenerateGesture:
    def setup_method(self):
        torch.manual_seed(0)
        self.model = GestureModel(toy_config()).double()
        rng = np.random.default_rng(0)
        self.clip = random_clip(rng)
        self.pre = rng.uniform(-1, 1, (10, 165))

    @pytest.mark.parametrize("use_text, use_speech", [(True, False), (False, True), (True, True)])
    def test_conditions(self, use_text, use_speech):
        out = generate_gesture(self.model, self.clip.text if use_text else None,
                               self.clip.speech if use_speech else None, self.pre)
        assert out.shape == (40, 165) and np.isfinite(out).all() and np.abs(out).max() <= 1.0
        np.testing.assert_array_equal(out[:10], self.pre)

    def test_no_modality(self):
        with pytest.raises(ValueError, match="no conditioning modality"):
            generate_gesture(self.model, None, None, self.pre)

    def test_bit_identical_reruns(self):
        a = generate_gesture(self.model, self.clip.text, self.clip.speech, self.pre)
        b = generate_gesture(self.model, self.clip.text, self.clip.speech, self.pre)
        assert a.tobytes() == b.tobytes()

    def test_missing_speech_equals_full_ignore(self):
        a = generate_gesture(self.model, self.clip.text, None, self.pre)
        b = generate_gesture(self.model, self.clip.text, full_ignore_frames(45, 128), self.pre)
        np.testing.assert_array_equal(a, b)

    def test_float32_model(self):
        torch.manual_seed(0)
        model = GestureModel(toy_config())
        pre = self.pre.astype(np.float32).astype(np.float64)
        out = generate_gesture(model, TextSequence(self.clip.text.token_ids, 3), None, pre)
        np.testing.assert_array_equal(out[:10], pre)


def test_rollout_causality(toy_model):
    """Generated frame n depends only on frames before it, never on later ground truth."""
    rng = np.random.default_rng(6)
    hidden = torch.as_tensor(rng.normal(size=(1, 117, 8)))
    pre = torch.as_tensor(rng.uniform(-1, 1, (1, 10, 165)))
    full = toy_model.rollout(hidden, pre)
    for n in (11, 20, 39):
        prefix = toy_model.rollout(hidden, pre, n_frames=n + 1)
        torch.testing.assert_close(prefix, full[:, : n + 1], rtol=0, atol=0)


def test_rollout_ignores_future_ground_truth(toy_model):
    ids, speech, pose = _inputs(np.random.default_rng(7), batch=1)
    from gesturegen.losses import PoseLossWeights
    from gesturegen.training import stage3_forward

    a = stage3_forward(toy_model, ids, speech, pose, PoseLossWeights())["generated"]
    pose2 = pose.clone()
    pose2[:, 25:] = torch.as_tensor(np.random.default_rng(8).uniform(-1, 1, (1, 15, 165)))
    b = stage3_forward(toy_model, ids, speech, pose2, PoseLossWeights())["generated"]
    torch.testing.assert_close(a, b, rtol=0, atol=0)


def test_parameter_groups_partition(toy_model):
    groups = parameter_groups(toy_model)
    assert set(groups) == {"embedder", "encoder", "decoder", "generator"}
    ids = [id(p) for ps in groups.values() for p in ps]
    assert len(ids) == len(set(ids)) == len(list(toy_model.parameters()))


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(vocab_size=9, d_model=10, n_heads=4)
    cfg = toy_config()
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg
    assert cfg.total_len == 117
