"""Training objectives.

Reductions: the joint-embedding losses sum over aligned tokens and average over
channels; reconstruction terms are means. Batch losses are means over clips.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

JOINT_WEIGHT = 0.01


def window_bounds(n_frames: int, valid_len: int) -> list[tuple[int, int]]:
    """Frame window [lo, hi) aligned with each of the ``valid_len`` tokens."""
    return [((n * n_frames) // valid_len, ((n + 1) * n_frames) // valid_len) for n in range(valid_len)]


def window_average_matrix(n_tokens: int, n_frames: int, valid_len: torch.Tensor, dtype=torch.float64) -> torch.Tensor:
    """[b, n_tokens, n_frames] matrix mapping frames to per-token window means.

    Rows for padded tokens are zero.
    """
    vl = valid_len.to(torch.long).clamp(min=1)[:, None, None]
    tok = torch.arange(n_tokens)[None, :, None]
    frame = torch.arange(n_frames)[None, None, :]
    lo = (tok * n_frames) // vl
    hi = ((tok + 1) * n_frames) // vl
    inside = (frame >= lo) & (frame < hi) & (tok < valid_len[:, None, None])
    w = inside.to(dtype)
    return w / w.sum(-1, keepdim=True).clamp(min=1)


def _aligned_l1(e_text, e_other, valid_len):
    w = window_average_matrix(e_text.shape[1], e_other.shape[1], valid_len, e_text.dtype)
    target = w @ e_other
    token_mask = (torch.arange(e_text.shape[1])[None, :] < valid_len[:, None]).to(e_text.dtype)
    per_token = (e_text - target).abs().mean(-1)
    return (per_token * token_mask).sum(-1)


def joint_embedding_loss(e_text, e_speech, e_pose, valid_len):
    """Text-speech and text-pose alignment losses, averaged over the batch.

    Shapes: e_text [b, 32, d], e_speech [b, 45, d], e_pose [b, 40, d], valid_len [b].
    Clips with no tokens contribute zero.
    """
    valid_len = torch.as_tensor(valid_len)
    return _aligned_l1(e_text, e_speech, valid_len).mean(), _aligned_l1(e_text, e_pose, valid_len).mean()


def text_cross_entropy(logits, target_ids, pad_id: int = 0):
    """Per-clip mean CE over non-PAD tokens, then mean over clips; empty clips give 0."""
    ce = F.cross_entropy(logits.transpose(1, 2), target_ids, reduction="none")
    keep = (target_ids != pad_id).to(ce.dtype)
    per_clip = (ce * keep).sum(-1) / keep.sum(-1).clamp(min=1)
    return per_clip.mean()


@dataclass
class ReconTerms:
    ce_text: torch.Tensor
    l1_speech: torch.Tensor
    l1_pose: torch.Tensor

    @property
    def total(self) -> torch.Tensor:
        return self.ce_text + self.l1_speech + self.l1_pose


def reconstruction_loss(pred_text, pred_speech, pred_pose, target_ids, target_speech, target_pose) -> ReconTerms:
    return ReconTerms(
        text_cross_entropy(pred_text, target_ids),
        (pred_speech - target_speech).abs().mean(),
        (pred_pose - target_pose).abs().mean(),
    )


@dataclass
class PoseLossWeights:
    alpha: float = 1.0
    beta: float = 0.01
    gamma: float = 0.01
    velocity_cap: float = 1.0


@dataclass
class PoseTerms:
    l1: torch.Tensor
    velocity: torch.Tensor
    variance_gap: torch.Tensor
    total: torch.Tensor


def temporal_variance(x):
    """Per-dimension variance over frames, averaged over dimensions: [b, n, d] -> [b]."""
    return x.var(dim=1, unbiased=False).mean(-1)


def pose_loss(pred, gt, weights: PoseLossWeights = PoseLossWeights()) -> PoseTerms:
    """L1 + variance matching, minus a capped velocity reward.

    pred, gt: [b, n, 165] (the generated frames only). Velocity is the mean
    absolute frame difference of the prediction; subtracting it pushes the
    model towards livelier motion.
    """
    l1 = (pred - gt).abs().mean(dim=(1, 2))
    vel = (pred[:, 1:] - pred[:, :-1]).abs().mean(dim=(1, 2))
    vel_capped = torch.clamp(vel, max=weights.velocity_cap)
    var_gap = (temporal_variance(pred) - temporal_variance(gt)).abs()
    total = weights.alpha * l1 - weights.beta * vel_capped + weights.gamma * var_gap
    return PoseTerms(l1.mean(), vel.mean(), var_gap.mean(), total.mean())


def stage1_total(l_js, l_jp, recon: ReconTerms, joint_weight: float = JOINT_WEIGHT):
    return joint_weight * (l_js + l_jp) + recon.total
