"""Frame-wise embedder, self-attention encoder, cross-attention decoder and generator."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

import numpy as np
import torch
import torch.nn as nn

from .data import N_MELS, POSE_DIM, POSE_LEN, SPEECH_LEN, TEXT_LEN
from .masking import MASK_SENTINEL, N_PRE_POSES


@dataclass
class ModelConfig:
    vocab_size: int
    d_model: int = 128
    n_heads: int = 4
    n_encoder_blocks: int = 4
    n_decoder_blocks: int = 1
    d_ff: int = 256
    word_embed_dim: int = 64
    n_pre_poses: int = N_PRE_POSES
    text_len: int = TEXT_LEN
    speech_len: int = SPEECH_LEN
    pose_len: int = POSE_LEN
    n_mels: int = N_MELS
    pose_dim: int = POSE_DIM

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if self.d_model % 2:
            raise ValueError("d_model must be even for sinusoidal positional encoding")
        if self.n_encoder_blocks != 4 or self.n_decoder_blocks != 1:
            raise ValueError("the encoder has 4 blocks and the decoder 1")
        if self.n_pre_poses != N_PRE_POSES:
            raise ValueError(f"n_pre_poses must be {N_PRE_POSES}")
        if (self.text_len, self.speech_len, self.pose_len) != (TEXT_LEN, SPEECH_LEN, POSE_LEN):
            raise ValueError("sequence lengths are fixed at 32/45/40")
        if self.vocab_size < 4:
            raise ValueError("vocab_size must cover the reserved ids plus at least one word")

    @property
    def total_len(self) -> int:
        return self.text_len + self.speech_len + self.pose_len

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


def sinusoidal_positional_encoding(length: int, dim: int) -> torch.Tensor:
    if dim % 2:
        raise ValueError("dim must be even")
    pos = torch.arange(length, dtype=torch.float64)[:, None]
    div = torch.pow(10000.0, torch.arange(0, dim, 2, dtype=torch.float64) / dim)
    pe = torch.zeros(length, dim, dtype=torch.float64)
    pe[:, 0::2] = torch.sin(pos / div)
    pe[:, 1::2] = torch.cos(pos / div)
    return pe


class MLP3(nn.Sequential):
    """Three fully-connected layers with GELU between them, applied per frame."""

    def __init__(self, d_in: int, d_hidden: int, d_out: int):
        super().__init__(
            nn.Linear(d_in, d_hidden), nn.GELU(),
            nn.Linear(d_hidden, d_hidden), nn.GELU(),
            nn.Linear(d_hidden, d_out),
        )


class MultiHeadAttention(nn.Module):
    def __init__(self, d_model: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.d_head = d_model // n_heads
        self.q = nn.Linear(d_model, d_model)
        self.k = nn.Linear(d_model, d_model)
        self.v = nn.Linear(d_model, d_model)
        self.out = nn.Linear(d_model, d_model)
        for lin in (self.q, self.k, self.v, self.out):
            nn.init.xavier_uniform_(lin.weight)
            nn.init.zeros_(lin.bias)

    def _split(self, x: torch.Tensor) -> torch.Tensor:
        b, n, _ = x.shape
        return x.view(b, n, self.n_heads, self.d_head).transpose(1, 2)

    def forward(self, query, key, value, return_weights: bool = False):
        q, k, v = self._split(self.q(query)), self._split(self.k(key)), self._split(self.v(value))
        scores = q @ k.transpose(-2, -1) / math.sqrt(self.d_head)
        weights = torch.softmax(scores, dim=-1)  # [b, heads, n_q, n_k]
        ctx = (weights @ v).transpose(1, 2).reshape(query.shape[0], query.shape[1], -1)
        out = self.out(ctx)
        return (out, weights) if return_weights else out


class FeedForward(nn.Sequential):
    def __init__(self, d_model: int, d_ff: int):
        super().__init__(nn.Linear(d_model, d_ff), nn.GELU(), nn.Linear(d_ff, d_model))


class EncoderBlock(nn.Module):
    # Pre-norm residual layout: with attention/FF weights at zero the block is the identity.
    def __init__(self, d_model: int, n_heads: int, d_ff: int):
        super().__init__()
        self.norm_attn = nn.LayerNorm(d_model)
        self.attn = MultiHeadAttention(d_model, n_heads)
        self.norm_ff = nn.LayerNorm(d_model)
        self.ff = FeedForward(d_model, d_ff)

    def forward(self, x):
        h = self.norm_attn(x)
        x = x + self.attn(h, h, h)
        return x + self.ff(self.norm_ff(x))


class DecoderBlock(nn.Module):
    def __init__(self, d_model: int, n_heads: int, d_ff: int):
        super().__init__()
        self.norm_q = nn.LayerNorm(d_model)
        self.norm_kv = nn.LayerNorm(d_model)
        self.attn = MultiHeadAttention(d_model, n_heads)
        self.norm_ff = nn.LayerNorm(d_model)
        self.ff = FeedForward(d_model, d_ff)

    def forward(self, queries, memory, return_weights: bool = False):
        kv = self.norm_kv(memory)
        a, w = self.attn(self.norm_q(queries), kv, kv, return_weights=True)
        x = queries + a
        x = x + self.ff(self.norm_ff(x))
        return (x, w) if return_weights else x


class Embedder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.vocab_size = cfg.vocab_size
        self.word_table = nn.Embedding(cfg.vocab_size, cfg.word_embed_dim)
        nn.init.uniform_(self.word_table.weight, -0.05, 0.05)
        self.text = MLP3(cfg.word_embed_dim, cfg.d_model, cfg.d_model)
        self.speech = MLP3(cfg.n_mels, cfg.d_model, cfg.d_model)
        self.pose = MLP3(cfg.pose_dim, cfg.d_model, cfg.d_model)
        self.speech_mask = nn.Parameter(torch.randn(cfg.d_model) * 0.02)
        self.pose_mask = nn.Parameter(torch.randn(cfg.d_model) * 0.02)

    def embed_text(self, token_ids: torch.Tensor) -> torch.Tensor:
        if token_ids.numel() and (int(token_ids.max()) >= self.vocab_size or int(token_ids.min()) < 0):
            raise ValueError(f"token id out of range for vocabulary of size {self.vocab_size}")
        return self.text(self.word_table(token_ids))

    @staticmethod
    def _masked_frames(x, proj, mask_vec):
        masked = (x == MASK_SENTINEL).all(dim=-1, keepdim=True)
        return torch.where(masked, mask_vec.to(x.dtype), proj(x))

    def embed_speech(self, speech: torch.Tensor) -> torch.Tensor:
        return self._masked_frames(speech, self.speech, self.speech_mask)

    def embed_pose(self, pose: torch.Tensor) -> torch.Tensor:
        return self._masked_frames(pose, self.pose, self.pose_mask)

    def forward(self, token_ids, speech, pose):
        return self.embed_text(token_ids), self.embed_speech(speech), self.embed_pose(pose)


class Encoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.register_buffer("pos", sinusoidal_positional_encoding(cfg.total_len, cfg.d_model).float(),
                             persistent=False)
        self.blocks = nn.ModuleList(EncoderBlock(cfg.d_model, cfg.n_heads, cfg.d_ff)
                                    for _ in range(cfg.n_encoder_blocks))

    def forward(self, e_text, e_speech, e_pose):
        x = torch.cat([e_text, e_speech, e_pose], dim=1)
        x = x + self.pos.to(x.dtype)
        for block in self.blocks:
            x = block(x)
        return x


class Decoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.register_buffer("pos", sinusoidal_positional_encoding(cfg.pose_len, cfg.d_model).float(),
                             persistent=False)
        self.blocks = nn.ModuleList(DecoderBlock(cfg.d_model, cfg.n_heads, cfg.d_ff)
                                    for _ in range(cfg.n_decoder_blocks))

    def forward(self, hidden, prev_pose_embeds, return_weights: bool = False):
        """Representation of the next frame given embeddings of all previous frames.

        hidden: [b, 117, d] encoder output; prev_pose_embeds: [b, k, d], 1 <= k <= 40.
        """
        k = prev_pose_embeds.shape[1]
        if k == 0:
            raise ValueError("decoder requires at least one query frame")
        if k > self.pos.shape[0]:
            raise ValueError(f"at most {self.pos.shape[0]} query frames")
        x = prev_pose_embeds + self.pos[:k].to(prev_pose_embeds.dtype)
        weights = []
        for block in self.blocks:
            x, w = block(x, hidden, return_weights=True)
            weights.append(w)
        out = x[:, -1]
        return (out, weights) if return_weights else out


class Generator(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.text = MLP3(cfg.d_model, cfg.d_model, cfg.vocab_size)
        self.speech = MLP3(cfg.d_model, cfg.d_model, cfg.n_mels)
        self.pose = MLP3(cfg.d_model, cfg.d_model, cfg.pose_dim)

    def forward(self, f_text, f_speech, f_pose):
        return self.text(f_text), self.speech(f_speech), self.pose(f_pose)


class GestureModel(nn.Module):
    GROUPS = ("embedder", "encoder", "decoder", "generator")

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.embedder = Embedder(cfg)
        self.encoder = Encoder(cfg)
        self.decoder = Decoder(cfg)
        self.generator = Generator(cfg)

    def split_hidden(self, hidden):
        t, s = self.cfg.text_len, self.cfg.speech_len
        return hidden[:, :t], hidden[:, t : t + s], hidden[:, t + s :]

    def reconstruct(self, token_ids, speech, pose, use_encoder: bool = True):
        """Embed -> (encode) -> generate; returns (text logits, speech, pose, hidden)."""
        e_t, e_s, e_p = self.embedder(token_ids, speech, pose)
        if not use_encoder:
            return (*self.generator(e_t, e_s, e_p), None)
        hidden = self.encoder(e_t, e_s, e_p)
        return (*self.generator(*self.split_hidden(hidden)), hidden)

    def rollout(self, hidden, pre_poses, n_frames: int | None = None):
        """Autoregressively extend ``pre_poses`` [b, 10, 165] to [b, 40, 165].

        The decoder always consumes embeddings of frames it has itself produced
        after the pre-poses; ground truth beyond frame 9 is never read.
        """
        n_frames = n_frames or self.cfg.pose_len
        frames = [pre_poses[:, i] for i in range(pre_poses.shape[1])]
        embeds = list(self.embedder.embed_pose(pre_poses).unbind(1))
        for _ in range(len(frames), n_frames):
            step = self.decoder(hidden, torch.stack(embeds, dim=1))
            nxt = torch.clamp(self.generator.pose(step), -1.0, 1.0)
            frames.append(nxt)
            embeds.append(self.embedder.embed_pose(nxt[:, None])[:, 0])
        return torch.stack(frames, dim=1)


def parameter_groups(model: GestureModel) -> dict[str, list[nn.Parameter]]:
    return {g: list(getattr(model, g).parameters()) for g in GestureModel.GROUPS}


@torch.no_grad()
def generate_gesture(model: GestureModel, text=None, speech=None, pre_poses=None) -> np.ndarray:
    """Generate a [40, 165] normalized pose sequence from text and/or speech.

    ``text`` is a TextSequence or token-id array, ``speech`` a [45, 128] log-mel
    matrix and ``pre_poses`` the first 10 normalized frames. A missing modality is
    fed as its full-ignore mask representation.
    """
    from .masking import full_ignore_frames, full_ignore_text, mask_future_pose

    if text is None and speech is None:
        raise ValueError("no conditioning modality")
    cfg = model.cfg
    if pre_poses is None:
        pre_poses = np.zeros((cfg.n_pre_poses, cfg.pose_dim))
    pre_poses = np.asarray(pre_poses, dtype=np.float64)[: cfg.n_pre_poses]
    if pre_poses.shape != (cfg.n_pre_poses, cfg.pose_dim):
        raise ValueError(f"pre_poses must have shape ({cfg.n_pre_poses}, {cfg.pose_dim})")
    if text is None:
        text = full_ignore_text()
    ids = np.asarray(getattr(text, "token_ids", text), dtype=np.int64)
    if speech is None:
        speech = full_ignore_frames(cfg.speech_len, cfg.n_mels)
    dtype = next(model.parameters()).dtype
    was_training = model.training
    model.eval()
    try:
        t = torch.as_tensor(ids)[None]
        s = torch.as_tensor(np.asarray(speech), dtype=dtype)[None]
        p = torch.as_tensor(mask_future_pose(pre_poses), dtype=dtype)[None]
        e_t, e_s, e_p = model.embedder(t, s, p)
        hidden = model.encoder(e_t, e_s, e_p)
        out = model.rollout(hidden, torch.as_tensor(pre_poses, dtype=dtype)[None])[0]
    finally:
        model.train(was_training)
    result = out.double().numpy()
    result[: cfg.n_pre_poses] = pre_poses  # exact copy, no float32 round-trip
    return result
