"""Three-stage training: joint embedding, masked pre-training, autoregressive fine-tuning."""
from __future__ import annotations

import json
import logging
import os
import time
from collections import Counter
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch
from safetensors.numpy import load_file, save_file

from .data import GestureDataset, Vocabulary
from .losses import (
    JOINT_WEIGHT,
    PoseLossWeights,
    joint_embedding_loss,
    pose_loss,
    reconstruction_loss,
    stage1_total,
    text_cross_entropy,
)
from .masking import (
    N_PRE_POSES,
    PoseMode,
    SpeechMode,
    TextMode,
    apply_mask_plan,
    mask_future_pose,
    sample_mask_plan,
)
from .model import Decoder, GestureModel, ModelConfig

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = "1"
META_KEY = "gesturegen"

_DEFAULT_BATCH = {1: 64, 2: 64, 3: 32}
_DEFAULT_EPOCHS = {1: 50, 2: 100, 3: 360}


@dataclass
class StageConfig:
    stage: int
    learning_rate: float = 0.005
    batch_size: int | None = None
    epochs: int | None = None
    seed: int = 0
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    grad_clip: float | None = None
    joint_weight: float = JOINT_WEIGHT
    pose_alpha: float = 1.0
    pose_beta: float = 0.01
    pose_gamma: float = 0.01
    velocity_cap: float = 1.0
    unfreeze: bool = False  # stage 2 only: train embedder/generator too
    allow_stage_skip: bool = False

    def __post_init__(self):
        if self.stage not in (1, 2, 3):
            raise ValueError(f"stage must be 1, 2 or 3, got {self.stage}")
        if self.batch_size is None:
            self.batch_size = _DEFAULT_BATCH[self.stage]
        if self.epochs is None:
            self.epochs = _DEFAULT_EPOCHS[self.stage]
        self.betas = tuple(self.betas)
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")

    @property
    def pose_weights(self) -> PoseLossWeights:
        return PoseLossWeights(self.pose_alpha, self.pose_beta, self.pose_gamma, self.velocity_cap)

    @classmethod
    def from_mapping(cls, stage: int, mapping: dict | None) -> "StageConfig":
        """Build from a config mapping; a ``stageK`` section overrides top-level keys."""
        mapping = dict(mapping or {})
        section = mapping.pop(f"stage{stage}", None) or {}
        for k in ("stage1", "stage2", "stage3", "model"):
            mapping.pop(k, None)
        merged = {**mapping, **section}
        names = {f.name for f in fields(cls)} - {"stage"}
        unknown = set(merged) - names
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(stage=stage, **merged)


@dataclass
class TrainLog:
    records: list[dict] = field(default_factory=list)

    def append(self, record: dict) -> None:
        self.records.append(dict(record))

    def write_jsonl(self, path: str | os.PathLike) -> None:
        with open(path, "w") as fh:
            for r in self.records:
                fh.write(json.dumps(r, sort_keys=True) + "\n")

    @staticmethod
    def read_jsonl(path: str | os.PathLike) -> list[dict]:
        return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]


# --------------------------------------------------------------------------- #
#  Checkpoints
# --------------------------------------------------------------------------- #
class CheckpointError(ValueError):
    pass


class StageOrderError(ValueError):
    pass


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    stage: int
    epoch: int
    config: dict
    seed: int
    vocab: dict[str, int] | None = None
    extra: dict = field(default_factory=dict)
    version: str = CHECKPOINT_VERSION

    def metadata(self) -> dict:
        return {
            "version": self.version,
            "stage": self.stage,
            "epoch": self.epoch,
            "seed": self.seed,
            "config": self.config,
            "vocab": self.vocab,
            "extra": self.extra,
        }

    @property
    def model_config(self) -> ModelConfig:
        return ModelConfig.from_dict(self.config)


def checkpoint_from_model(model: GestureModel, stage: int, epoch: int, seed: int,
                          vocab: Vocabulary | None = None, extra: dict | None = None) -> Checkpoint:
    params = {k: v.detach().cpu().to(torch.float32).numpy().copy() for k, v in model.state_dict().items()}
    return Checkpoint(params, stage, epoch, model.cfg.to_dict(), seed,
                      dict(vocab.word_to_id) if vocab is not None else None, dict(extra or {}))


def model_from_checkpoint(ckpt: Checkpoint, dtype=torch.float32) -> GestureModel:
    model = GestureModel(ckpt.model_config)
    state = {k: torch.from_numpy(np.array(v)) for k, v in ckpt.params.items()}
    model.load_state_dict(state, strict=True)
    return model.to(dtype)


def save_checkpoint(ckpt: Checkpoint, path: str | os.PathLike) -> None:
    """Write a safetensors archive of float32 arrays.

    All metadata lives in one JSON string under ``META_KEY``; safetensors does
    not preserve the order of multiple metadata keys, which would break
    byte-identical re-saves.
    """
    tensors = {k: np.ascontiguousarray(v, dtype=np.float32) for k, v in ckpt.params.items()}
    save_file(tensors, str(path), metadata={META_KEY: json.dumps(ckpt.metadata(), sort_keys=True)})


def load_checkpoint(path: str | os.PathLike) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        from safetensors import safe_open

        with safe_open(str(path), framework="numpy") as fh:
            meta = fh.metadata() or {}
        params = load_file(str(path))
    except Exception as exc:  # safetensors raises several unrelated types on corrupt input
        raise CheckpointError(f"corrupt checkpoint {path}: {exc}") from exc
    try:
        meta = json.loads(meta[META_KEY])
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"checkpoint {path} has no readable {META_KEY!r} metadata") from exc
    if "version" not in meta:
        raise CheckpointError(f"checkpoint {path} has no version field")
    if meta["version"] != CHECKPOINT_VERSION:
        raise CheckpointError(f"checkpoint version {meta['version']} != supported {CHECKPOINT_VERSION}")
    try:
        return Checkpoint(
            params=dict(params),
            stage=int(meta["stage"]),
            epoch=int(meta["epoch"]),
            config=dict(meta["config"]),
            seed=int(meta["seed"]),
            vocab=meta.get("vocab"),
            extra=dict(meta.get("extra") or {}),
            version=meta["version"],
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"checkpoint {path} has malformed metadata: {exc}") from exc


def _require_stage(ckpt: Checkpoint, expected: int, cfg: StageConfig) -> None:
    if ckpt.stage != expected and not cfg.allow_stage_skip:
        raise StageOrderError(
            f"stage {cfg.stage} requires a stage-{expected} checkpoint, got stage {ckpt.stage}")


# --------------------------------------------------------------------------- #
#  Batching
# --------------------------------------------------------------------------- #
def _stack_clips(clips, dtype=torch.float32):
    ids = torch.as_tensor(np.stack([c.text.token_ids for c in clips]))
    valid = torch.as_tensor([c.text.valid_len for c in clips])
    speech = torch.as_tensor(np.stack([c.speech for c in clips]), dtype=dtype)
    pose = torch.as_tensor(np.stack([c.pose for c in clips]), dtype=dtype)
    return ids, valid, speech, pose


def _batches(n: int, batch_size: int, gen: torch.Generator):
    order = torch.randperm(n, generator=gen).tolist()
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]


def _adam(params, cfg: StageConfig):
    return torch.optim.Adam(params, lr=cfg.learning_rate, betas=cfg.betas, eps=cfg.adam_eps)


def _step(opt, loss, params, cfg: StageConfig):
    opt.zero_grad(set_to_none=True)
    loss.backward()
    if cfg.grad_clip:
        torch.nn.utils.clip_grad_norm_(params, cfg.grad_clip)
    opt.step()


def _set_trainable(model: GestureModel, groups) -> list[torch.nn.Parameter]:
    trainable = []
    for name in GestureModel.GROUPS:
        on = name in groups
        for p in getattr(model, name).parameters():
            p.requires_grad_(on)
            if on:
                trainable.append(p)
    return trainable


def _mean_records(rows: list[dict]) -> dict:
    keys = rows[0].keys()
    return {k: float(np.mean([r[k] for r in rows])) for k in keys}


def _adam_meta(cfg: StageConfig) -> dict:
    return {"lr": cfg.learning_rate, "betas": list(cfg.betas), "eps": cfg.adam_eps,
            "batch_size": cfg.batch_size, "epochs": cfg.epochs, "grad_clip": cfg.grad_clip}


# --------------------------------------------------------------------------- #
#  Stage 1
# --------------------------------------------------------------------------- #
def stage1_losses(model: GestureModel, ids, valid, speech, pose, joint_weight=JOINT_WEIGHT) -> dict:
    e_t, e_s, e_p = model.embedder(ids, speech, pose)
    l_js, l_jp = joint_embedding_loss(e_t, e_s, e_p, valid)
    rec = reconstruction_loss(*model.generator(e_t, e_s, e_p), ids, speech, pose)
    return {"total": stage1_total(l_js, l_jp, rec, joint_weight), "L_JS": l_js, "L_JP": l_jp,
            "L_recon": rec.total, "ce_text": rec.ce_text, "l1_speech": rec.l1_speech, "l1_pose": rec.l1_pose}


def train_stage1(dataset: GestureDataset, cfg: StageConfig, model_cfg: ModelConfig | None = None,
                 log_to: TrainLog | None = None) -> Checkpoint:
    """Train embedder and generator with joint-embedding + reconstruction losses."""
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    torch.manual_seed(cfg.seed)
    model_cfg = model_cfg or ModelConfig(vocab_size=len(dataset.vocab))
    model = GestureModel(model_cfg)
    params = _set_trainable(model, ("embedder", "generator"))
    opt = _adam(params, cfg)
    gen = torch.Generator().manual_seed(cfg.seed)
    data = _stack_clips(dataset.clips)
    model.train()
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        rows = []
        for idx in _batches(len(dataset), cfg.batch_size, gen):
            ids, valid, speech, pose = (x[idx] for x in data)
            terms = stage1_losses(model, ids, valid, speech, pose, cfg.joint_weight)
            _step(opt, terms["total"], params, cfg)
            rows.append({k: float(v.detach()) for k, v in terms.items()})
        rec = {"stage": 1, "epoch": epoch, "seed": cfg.seed, **_mean_records(rows),
               "wall_s": round(time.perf_counter() - t0, 4)}
        log.info("stage1 epoch %d total %.5f", epoch, rec["total"])
        if log_to is not None:
            log_to.append(rec)
    return checkpoint_from_model(model, 1, cfg.epochs, cfg.seed, dataset.vocab, {"adam": _adam_meta(cfg)})


# --------------------------------------------------------------------------- #
#  Stage 2
# --------------------------------------------------------------------------- #
def _mask_batch(clips, vocab, rng, counts: Counter):
    masked = []
    for c in clips:
        plan = sample_mask_plan(rng, c.text.valid_len)
        counts[f"text.{plan.text_mode.name}"] += 1
        counts[f"speech.{plan.speech_mode.name}"] += 1
        counts[f"pose.{plan.pose_mode.name}"] += 1
        masked.append(apply_mask_plan(c, plan, vocab, rng))
    return masked


def mode_frequencies(counts: Counter, n: int) -> dict[str, float]:
    out = {}
    for prefix, enum_cls in (("text", TextMode), ("speech", SpeechMode), ("pose", PoseMode)):
        for m in enum_cls:
            key = f"{prefix}.{m.name}"
            out[key] = counts.get(key, 0) / max(n, 1)
    return out


def train_stage2(dataset: GestureDataset, ckpt1: Checkpoint, cfg: StageConfig,
                 log_to: TrainLog | None = None) -> Checkpoint:
    """Masked multimodal pre-training of the encoder with embedder and generator frozen."""
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    _require_stage(ckpt1, 1, cfg)
    torch.manual_seed(cfg.seed)
    model = model_from_checkpoint(ckpt1)
    groups = ("encoder",) + (("embedder", "generator") if cfg.unfreeze else ())
    params = _set_trainable(model, groups)
    opt = _adam(params, cfg)
    gen = torch.Generator().manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    model.train()
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        rows, counts, n_seen = [], Counter(), 0
        for idx in _batches(len(dataset), cfg.batch_size, gen):
            clean = [dataset.clips[i] for i in idx]
            masked = _mask_batch(clean, dataset.vocab, rng, counts)
            n_seen += len(masked)
            ids, _, speech, pose = _stack_clips([m.clip for m in masked])
            t_ids, _, t_speech, t_pose = _stack_clips(clean)
            pred_t, pred_s, pred_p, _ = model.reconstruct(ids, speech, pose)
            rec = reconstruction_loss(pred_t, pred_s, pred_p, t_ids, t_speech, t_pose)
            _step(opt, rec.total, params, cfg)
            pmask = torch.as_tensor(np.stack([m.pose_target for m in masked]))
            with torch.no_grad():
                err = (pred_p - t_pose).abs().mean(-1)
                masked_l1 = float(err[pmask].mean()) if pmask.any() else float("nan")
            rows.append({"total": float(rec.total.detach()), "L_recon": float(rec.total.detach()),
                         "ce_text": float(rec.ce_text.detach()), "l1_speech": float(rec.l1_speech.detach()),
                         "l1_pose": float(rec.l1_pose.detach()),
                         "masked_pose_l1": masked_l1})
        rec_row = {"stage": 2, "epoch": epoch, "seed": cfg.seed, **_mean_records(rows),
                   "mask_freq": mode_frequencies(counts, n_seen), "n_samples": n_seen,
                   "wall_s": round(time.perf_counter() - t0, 4)}
        log.info("stage2 epoch %d recon %.5f", epoch, rec_row["total"])
        if log_to is not None:
            log_to.append(rec_row)
    return checkpoint_from_model(model, 2, cfg.epochs, cfg.seed, Vocabulary(ckpt1.vocab) if ckpt1.vocab else dataset.vocab,
                                 {"adam": _adam_meta(cfg), "unfreeze": cfg.unfreeze})


# --------------------------------------------------------------------------- #
#  Stage 3
# --------------------------------------------------------------------------- #
def stage3_forward(model: GestureModel, ids, speech, pose, weights: PoseLossWeights) -> dict:
    """Encoder sees the pre-poses with later frames masked; frames 10..39 are rolled out."""
    enc_pose = torch.as_tensor(np.stack([mask_future_pose(p) for p in pose.detach().cpu().numpy()]),
                               dtype=pose.dtype)
    pred_t, pred_s, _, hidden = model.reconstruct(ids, speech, enc_pose)
    gen = model.rollout(hidden, pose[:, :N_PRE_POSES])
    pt = pose_loss(gen[:, N_PRE_POSES:], pose[:, N_PRE_POSES:], weights)
    ce = text_cross_entropy(pred_t, ids)
    l1_speech = (pred_s - speech).abs().mean()
    total = ce + l1_speech + pt.total
    return {"total": total, "ce_text": ce, "l1_speech": l1_speech, "L_pose": pt.total,
            "pose_l1": pt.l1, "pose_velocity": pt.velocity, "pose_var_gap": pt.variance_gap,
            "generated": gen}


def train_stage3(dataset: GestureDataset, ckpt2: Checkpoint, cfg: StageConfig,
                 log_to: TrainLog | None = None) -> Checkpoint:
    """Joint fine-tuning of all four sub-networks with autoregressive rollout (no teacher forcing)."""
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    _require_stage(ckpt2, 2, cfg)
    torch.manual_seed(cfg.seed)
    model = model_from_checkpoint(ckpt2)
    model.decoder = Decoder(model.cfg)  # fresh decoder, seeded by cfg.seed
    params = _set_trainable(model, GestureModel.GROUPS)
    opt = _adam(params, cfg)
    gen = torch.Generator().manual_seed(cfg.seed)
    data = _stack_clips(dataset.clips)
    model.train()
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        rows = []
        for idx in _batches(len(dataset), cfg.batch_size, gen):
            ids, _, speech, pose = (x[idx] for x in data)
            out = stage3_forward(model, ids, speech, pose, cfg.pose_weights)
            _step(opt, out["total"], params, cfg)
            rows.append({k: float(v.detach()) for k, v in out.items() if k != "generated"})
        rec = {"stage": 3, "epoch": epoch, "seed": cfg.seed, **_mean_records(rows),
               "wall_s": round(time.perf_counter() - t0, 4)}
        log.info("stage3 epoch %d total %.5f pose_l1 %.5f", epoch, rec["total"], rec["pose_l1"])
        if log_to is not None:
            log_to.append(rec)
    return checkpoint_from_model(model, 3, cfg.epochs, cfg.seed, Vocabulary(ckpt2.vocab) if ckpt2.vocab else dataset.vocab,
                                 {"adam": _adam_meta(cfg)})


def generate_for_dataset(model: GestureModel, dataset: GestureDataset, text: bool = True,
                         speech: bool = True, speech_override: list[np.ndarray] | None = None) -> np.ndarray:
    """Generate every clip from its ground-truth pre-poses; returns [n, 40, 165]."""
    from .model import generate_gesture

    out = []
    for i, c in enumerate(dataset.clips):
        s = speech_override[i] if speech_override is not None else c.speech
        out.append(generate_gesture(model, c.text if text else None, s if speech else None,
                                    c.pose[:N_PRE_POSES]))
    return np.stack(out)


def stage_config_dict(cfg: StageConfig) -> dict:
    return asdict(cfg)
