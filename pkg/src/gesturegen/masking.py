"""Per-modality corruption plans for masked multimodal pre-training."""
from __future__ import annotations

import enum
from dataclasses import dataclass, replace

import numpy as np

from .data import (
    MASK_ID,
    MEL_EPS,
    POSE_LEN,
    SPEECH_LEN,
    TEXT_LEN,
    Clip,
    TextSequence,
    Vocabulary,
)

# Stand-in value for a masked speech/pose frame before embedding. A frame is
# treated as masked only when every entry equals this value.
MASK_SENTINEL = -10.0
SPAN = 5
N_PRE_POSES = 10


class TextMode(enum.IntEnum):
    FULL_IGNORE = 0
    MASK_ONE_WORD = 1
    RANDOM_ONE_WORD = 2
    NONE = 3


class SpeechMode(enum.IntEnum):
    FULL_IGNORE = 0
    MASK_SPAN5 = 1
    RANDOM_SPAN5 = 2
    NONE = 3


class PoseMode(enum.IntEnum):
    FULL_IGNORE = 0
    MASK_SPAN5 = 1
    RANDOM_SPAN5 = 2
    MASK_LAST30 = 3
    NONE = 4


TEXT_PROBS = np.array([0.10, 0.72, 0.09, 0.09])
SPEECH_PROBS = np.array([0.10, 0.72, 0.09, 0.09])
POSE_PROBS = np.array([0.10, 0.09, 0.09, 0.63, 0.09])

_TEXT_CDF = np.cumsum(TEXT_PROBS)
_SPEECH_CDF = np.cumsum(SPEECH_PROBS)
_POSE_CDF = np.cumsum(POSE_PROBS)


def _draw(rng: np.random.Generator, cdf: np.ndarray) -> int:
    return min(int(np.searchsorted(cdf, rng.random(), side="right")), len(cdf) - 1)


@dataclass(frozen=True)
class MaskPlan:
    text_mode: TextMode = TextMode.NONE
    text_pos: int = 0
    speech_mode: SpeechMode = SpeechMode.NONE
    speech_start: int = 0
    pose_mode: PoseMode = PoseMode.NONE
    pose_start: int = 0
    seed: int | None = None


def sample_mask_plan(rng: np.random.Generator, valid_len: int) -> MaskPlan:
    """Draw one corruption plan; modalities are sampled independently.

    One-word text modes fall back to NONE when the transcript is empty.
    """
    seed = int(rng.integers(0, 2**63 - 1))
    text_mode = TextMode(_draw(rng, _TEXT_CDF))
    text_pos = 0
    if text_mode in (TextMode.MASK_ONE_WORD, TextMode.RANDOM_ONE_WORD):
        if valid_len > 0:
            text_pos = int(rng.integers(0, valid_len))
        else:
            text_mode = TextMode.NONE
    speech_mode = SpeechMode(_draw(rng, _SPEECH_CDF))
    speech_start = int(rng.integers(0, SPEECH_LEN - SPAN + 1))
    pose_mode = PoseMode(_draw(rng, _POSE_CDF))
    pose_start = int(rng.integers(0, POSE_LEN - SPAN + 1))
    return MaskPlan(text_mode, text_pos, speech_mode, speech_start, pose_mode, pose_start, seed)


@dataclass
class MaskedClip:
    clip: Clip
    text_target: np.ndarray  # bool [32]
    speech_target: np.ndarray  # bool [45]
    pose_target: np.ndarray  # bool [40]


def _corrupt_frames(x: np.ndarray, mode, start: int, lo: float, hi: float, rng) -> tuple[np.ndarray, np.ndarray]:
    x = np.array(x, dtype=np.float64, copy=True)
    target = np.zeros(len(x), dtype=bool)
    name = mode.name
    if name == "FULL_IGNORE":
        target[:] = True
    elif name == "MASK_SPAN5" or name == "RANDOM_SPAN5":
        target[start : start + SPAN] = True
    elif name == "MASK_LAST30":
        target[N_PRE_POSES:] = True
    if name == "RANDOM_SPAN5":
        x[target] = rng.uniform(lo, hi, size=(int(target.sum()), x.shape[1]))
    elif name != "NONE":
        x[target] = MASK_SENTINEL
    return x, target


def apply_mask_plan(clip: Clip, plan: MaskPlan, vocab: Vocabulary, rng: np.random.Generator) -> MaskedClip:
    """Corrupted copy of ``clip`` plus the positions scored as reconstruction targets.

    For text FULL_IGNORE all 32 positions become MASK tokens; only the non-PAD
    positions are flagged as targets since PAD carries nothing to reconstruct.
    """
    ids = clip.text.token_ids.copy()
    vl = clip.text.valid_len
    text_target = np.zeros(TEXT_LEN, dtype=bool)
    if plan.text_mode == TextMode.FULL_IGNORE:
        ids[:] = MASK_ID
        text_target[:vl] = True
    elif plan.text_mode == TextMode.MASK_ONE_WORD and vl > 0:
        ids[plan.text_pos] = MASK_ID
        text_target[plan.text_pos] = True
    elif plan.text_mode == TextMode.RANDOM_ONE_WORD and vl > 0:
        n_reserved = 3
        ids[plan.text_pos] = int(rng.integers(n_reserved, max(len(vocab), n_reserved + 1)))
        text_target[plan.text_pos] = True

    speech_lo = float(np.log(MEL_EPS))
    speech_hi = float(max(np.max(clip.speech), speech_lo + 1.0))
    speech, speech_target = _corrupt_frames(clip.speech, plan.speech_mode, plan.speech_start,
                                            speech_lo, speech_hi, rng)
    pose, pose_target = _corrupt_frames(clip.pose, plan.pose_mode, plan.pose_start, -1.0, 1.0, rng)
    corrupted = replace(clip, text=TextSequence(ids, vl), speech=speech, pose=pose)
    return MaskedClip(corrupted, text_target, speech_target, pose_target)


def full_ignore_text() -> TextSequence:
    return TextSequence(np.full(TEXT_LEN, MASK_ID, dtype=np.int64), 0)


def full_ignore_frames(n_frames: int, dim: int) -> np.ndarray:
    return np.full((n_frames, dim), MASK_SENTINEL)


def mask_future_pose(pre_poses: np.ndarray) -> np.ndarray:
    """Encoder pose input at generation time: known pre-poses, then masked frames."""
    pose = np.full((POSE_LEN, pre_poses.shape[1]), MASK_SENTINEL)
    pose[:N_PRE_POSES] = pre_poses[:N_PRE_POSES]
    return pose
