"""Gesture evaluation metrics: MPJAE, MMD, FGD, beat consistency and diversity."""
from __future__ import annotations

import hashlib
import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn as nn
from safetensors.numpy import load_file, save_file
from scipy.spatial.distance import cdist, pdist

from .data import FPS, HOP_LENGTH, POSE_DIM, POSE_LEN, SAMPLE_RATE, compute_log_mel

log = logging.getLogger(__name__)

METRIC_NAMES = ("mpjae", "mmd", "fgd", "diversity", "bc")
CONDITIONS = ("T", "S", "T+S", "noisy-S")
MMD_SCALES = (1.0, 2.0, 4.0, 8.0, 16.0)
LATENT_DIM = 32
BC_SIGMA = 0.1
FGD_COV_EPS = 1e-6


def _as_set(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    if x.ndim != 3 or len(x) == 0:
        raise ValueError("gesture set must be a non-empty [n, frames, dims] array")
    return x


# --------------------------------------------------------------------------- #
#  MPJAE
# --------------------------------------------------------------------------- #
def mpjae(pred, gt) -> float:
    """Mean absolute joint-angle error in radians between paired normalized sets."""
    pred, gt = _as_set(pred), _as_set(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"set size/shape mismatch: {pred.shape} vs {gt.shape}")
    return float(np.mean(np.abs(pred - gt)) * np.pi)


# --------------------------------------------------------------------------- #
#  MMD
# --------------------------------------------------------------------------- #
def median_bandwidth(a: np.ndarray, b: np.ndarray) -> float:
    pooled = np.concatenate([a, b])
    d = pdist(pooled)
    med = float(np.median(d)) if len(d) else 0.0
    return med if med > 0 else 1.0


def mmd_avg(a, b, scales=MMD_SCALES, unbiased: bool = False) -> float:
    """Squared MMD with an RBF kernel, averaged over bandwidths ``scale * median``.

    Samples lie along axis 0 and are flattened. The default V-statistic is exactly zero for identical
    multisets; ``unbiased=True`` drops the within-set diagonal terms instead.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    a, b = a.reshape(len(a), -1), b.reshape(len(b), -1)
    m, n = len(a), len(b)
    if m < 2 or n < 2:
        raise ValueError("MMD needs at least 2 clips per set")
    med = median_bandwidth(a, b)
    d_aa, d_bb, d_ab = cdist(a, a, "sqeuclidean"), cdist(b, b, "sqeuclidean"), cdist(a, b, "sqeuclidean")
    vals = []
    for s in scales:
        g = 1.0 / (2.0 * (s * med) ** 2)
        k_aa, k_bb, k_ab = np.exp(-g * d_aa), np.exp(-g * d_bb), np.exp(-g * d_ab)
        if unbiased:
            t_aa = (k_aa.sum() - np.trace(k_aa)) / (m * (m - 1))
            t_bb = (k_bb.sum() - np.trace(k_bb)) / (n * (n - 1))
        else:
            t_aa = k_aa.sum() / (m * m)
            t_bb = k_bb.sum() / (n * n)
        vals.append(t_aa + t_bb - 2.0 * k_ab.sum() / (m * n))
    return float(np.mean(vals))


# --------------------------------------------------------------------------- #
#  FGD autoencoder
# --------------------------------------------------------------------------- #
class PoseAutoencoder(nn.Module):
    """Frame-wise encoder, pooling over 4 temporal segments, linear latent of size 32."""

    def __init__(self, pose_dim: int = POSE_DIM, n_frames: int = POSE_LEN, hidden: int = 64,
                 latent: int = LATENT_DIM, segments: int = 4):
        super().__init__()
        self.n_frames, self.pose_dim, self.segments = n_frames, pose_dim, segments
        self.frame_enc = nn.Sequential(nn.Linear(pose_dim, hidden), nn.GELU(), nn.Linear(hidden, hidden))
        self.to_latent = nn.Linear(hidden * segments, latent)
        self.dec = nn.Sequential(nn.Linear(latent, 256), nn.GELU(), nn.Linear(256, n_frames * pose_dim))

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        h = self.frame_enc(x)  # [b, t, h]
        b, t, d = h.shape
        pooled = h.view(b, self.segments, t // self.segments, d).mean(2).reshape(b, -1)
        return self.to_latent(pooled)

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        return self.dec(z).view(-1, self.n_frames, self.pose_dim)

    def forward(self, x):
        return self.decode(self.encode(x))


@dataclass
class FgdAutoencoder:
    net: PoseAutoencoder
    seed: int
    epochs: int
    initial_l1: float
    final_l1: float
    history: list[float] = field(default_factory=list, repr=False)

    @torch.no_grad()
    def latents(self, gestures) -> np.ndarray:
        x = torch.as_tensor(_as_set(gestures), dtype=torch.float64)
        return self.net.encode(x).numpy()

    def params(self) -> dict[str, np.ndarray]:
        return {k: v.detach().numpy().astype(np.float64) for k, v in self.net.state_dict().items()}

    def param_hash(self) -> str:
        h = hashlib.sha256()
        for k, v in sorted(self.params().items()):
            h.update(k.encode())
            h.update(np.ascontiguousarray(v).tobytes())
        return h.hexdigest()[:16]

    def save(self, path: str | os.PathLike) -> None:
        meta = {"seed": self.seed, "epochs": self.epochs, "initial_l1": self.initial_l1, "final_l1": self.final_l1}
        save_file(self.params(), str(path), metadata={"fgd_ae": json.dumps(meta, sort_keys=True)})

    @classmethod
    def load(cls, path: str | os.PathLike) -> "FgdAutoencoder":
        from safetensors import safe_open

        with safe_open(str(path), framework="numpy") as fh:
            meta = json.loads(fh.metadata()["fgd_ae"])
        net = PoseAutoencoder().double()
        net.load_state_dict({k: torch.from_numpy(v) for k, v in load_file(str(path)).items()})
        return cls(net, int(meta["seed"]), int(meta["epochs"]), float(meta["initial_l1"]), float(meta["final_l1"]))


def train_fgd_autoencoder(gestures, seed: int = 0, epochs: int = 400, lr: float = 1e-3,
                          batch_size: int = 64) -> FgdAutoencoder:
    x = torch.as_tensor(_as_set(gestures), dtype=torch.float64)
    if len(x) < 8:
        raise ValueError("FGD autoencoder needs at least 8 clips")
    torch.manual_seed(seed)
    net = PoseAutoencoder().double()
    opt = torch.optim.Adam(net.parameters(), lr=lr)
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        initial = float((net(x) - x).abs().mean())
    history = []
    for _ in range(epochs):
        order = torch.randperm(len(x), generator=gen)
        for i in range(0, len(x), batch_size):
            xb = x[order[i : i + batch_size]]
            loss = (net(xb) - xb).abs().mean()
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
        history.append(float(loss.detach()))
    with torch.no_grad():
        final = float((net(x) - x).abs().mean())
    log.info("FGD autoencoder L1 %.5f -> %.5f", initial, final)
    return FgdAutoencoder(net.eval(), seed, epochs, initial, final, history)


# --------------------------------------------------------------------------- #
#  FGD
# --------------------------------------------------------------------------- #
def _sqrtm_psd(c: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh(c)
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def _trace_sqrt_product(c1: np.ndarray, c2: np.ndarray) -> float:
    """Tr((c1 c2)^{1/2}) via the symmetric form (c1^{1/2} c2 c1^{1/2})^{1/2}."""
    s1 = _sqrtm_psd(c1)
    inner = s1 @ c2 @ s1
    w = np.linalg.eigvalsh((inner + inner.T) / 2)
    return float(np.sqrt(np.clip(w, 0.0, None)).sum())


def frechet_distance(lat_a: np.ndarray, lat_b: np.ndarray, eps: float = FGD_COV_EPS) -> float:
    lat_a, lat_b = np.asarray(lat_a, dtype=np.float64), np.asarray(lat_b, dtype=np.float64)
    if len(lat_a) < 2 or len(lat_b) < 2:
        raise ValueError("Frechet distance needs at least 2 samples per set")
    d = lat_a.shape[1]
    if min(len(lat_a), len(lat_b)) <= d:
        log.warning("FGD with %d/%d samples for %d latent dims; covariance is rank deficient",
                    len(lat_a), len(lat_b), d)
    mu_a, mu_b = lat_a.mean(0), lat_b.mean(0)
    ca = np.cov(lat_a, rowvar=False) + eps * np.eye(d)
    cb = np.cov(lat_b, rowvar=False) + eps * np.eye(d)
    # average both orders so the result is exactly symmetric
    tr_sqrt = 0.5 * (_trace_sqrt_product(ca, cb) + _trace_sqrt_product(cb, ca))
    val = float(np.sum((mu_a - mu_b) ** 2) + np.trace(ca) + np.trace(cb) - 2.0 * tr_sqrt)
    return max(val, 0.0)


def fgd(a, b, ae: FgdAutoencoder) -> float:
    return frechet_distance(ae.latents(a), ae.latents(b))


# --------------------------------------------------------------------------- #
#  Beat consistency
# --------------------------------------------------------------------------- #
def onset_envelope(audio: np.ndarray, sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    """Positive spectral flux of the log-mel spectrogram, one value per 30 ms frame."""
    mel = compute_log_mel(audio, sample_rate)
    flux = np.maximum(0.0, np.diff(mel, axis=0)).mean(axis=1)
    return np.concatenate([[0.0], flux])


def audio_beats(audio: np.ndarray, sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    """Onset times (s): flux peaks above mean + 0.5 std that are local maxima."""
    env = onset_envelope(audio, sample_rate)
    thresh = env.mean() + 0.5 * env.std()
    idx = [i for i in range(1, len(env) - 1)
           if env[i] > thresh and env[i] > env[i - 1] and env[i] >= env[i + 1]]
    return np.asarray(idx, dtype=np.float64) * HOP_LENGTH / sample_rate


def motion_beats(pose: np.ndarray, fps: int = FPS) -> np.ndarray:
    """Times (s) of interior strict local minima of mean absolute angular velocity."""
    pose = np.asarray(pose, dtype=np.float64)
    vel = np.abs(np.diff(pose, axis=0)).mean(axis=1)  # vel[i] spans frames i..i+1
    idx = [i for i in range(1, len(vel) - 1) if vel[i] < vel[i - 1] and vel[i] < vel[i + 1]]
    return (np.asarray(idx, dtype=np.float64) + 1.0) / fps


def beat_alignment(a_beats: np.ndarray, m_beats: np.ndarray, sigma: float = BC_SIGMA) -> float:
    """Mean over audio beats of exp(-d^2 / 2 sigma^2), d = distance to nearest motion beat."""
    a_beats, m_beats = np.asarray(a_beats, float), np.asarray(m_beats, float)
    if len(a_beats) == 0 or len(m_beats) == 0:
        return 0.0
    d = np.abs(a_beats[:, None] - m_beats[None, :]).min(axis=1)
    return float(np.mean(np.exp(-(d**2) / (2 * sigma**2))))


def beat_consistency(gestures, audio, sample_rate: int = SAMPLE_RATE, sigma: float = BC_SIGMA) -> float:
    gestures = _as_set(gestures)
    if len(audio) != len(gestures):
        raise ValueError("every gesture needs paired audio")
    scores = [beat_alignment(audio_beats(w, sample_rate), motion_beats(g), sigma)
              for g, w in zip(gestures, audio)]
    return float(np.mean(scores))


# --------------------------------------------------------------------------- #
#  Diversity
# --------------------------------------------------------------------------- #
def sample_pairs(n: int, n_pairs: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng(seed)
    i = rng.integers(0, n, n_pairs)
    j = (i + rng.integers(1, n, n_pairs)) % n
    return i, j


def latent_diversity(latents: np.ndarray, n_pairs: int = 500, seed: int = 0) -> float:
    latents = np.asarray(latents, dtype=np.float64)
    if len(latents) < 2:
        raise ValueError("diversity needs at least 2 clips")
    i, j = sample_pairs(len(latents), n_pairs, seed)
    return float(np.linalg.norm(latents[i] - latents[j], axis=1).mean())


def diversity(gestures, ae: FgdAutoencoder, n_pairs: int = 500, seed: int = 0) -> float:
    return latent_diversity(ae.latents(gestures), n_pairs, seed)


# --------------------------------------------------------------------------- #
#  Reports
# --------------------------------------------------------------------------- #
@dataclass
class MetricReport:
    condition: str = "T+S"
    mpjae: float | None = None
    mmd: float | None = None
    fgd: float | None = None
    diversity: float | None = None
    bc: float | None = None
    n_generated: int = 0
    n_reference: int = 0
    config_hash: str = ""

    def metrics(self) -> dict[str, float]:
        return {k: getattr(self, k) for k in METRIC_NAMES if getattr(self, k) is not None}

    def to_dict(self) -> dict:
        return asdict(self)


def compute_metrics(generated, reference, audio=None, ae: FgdAutoencoder | None = None,
                    metrics=METRIC_NAMES, condition: str = "T+S", seed: int = 0,
                    n_pairs: int = 500) -> MetricReport:
    unknown = set(metrics) - set(METRIC_NAMES)
    if unknown:
        raise ValueError(f"unknown metric(s) {sorted(unknown)}; valid: {', '.join(METRIC_NAMES)}")
    generated, reference = _as_set(generated), _as_set(reference)
    rep = MetricReport(condition=condition, n_generated=len(generated), n_reference=len(reference))
    if "mpjae" in metrics:
        rep.mpjae = mpjae(generated, reference)
    if "mmd" in metrics:
        rep.mmd = mmd_avg(generated, reference)
    if ("fgd" in metrics or "diversity" in metrics) and ae is None:
        raise ValueError("fgd/diversity need an FGD autoencoder")
    if "fgd" in metrics:
        rep.fgd = fgd(generated, reference, ae)
    if "diversity" in metrics:
        rep.diversity = diversity(generated, ae, n_pairs, seed)
    if "bc" in metrics:
        if audio is None:
            raise ValueError("bc needs paired audio")
        rep.bc = beat_consistency(generated, audio)
    cfg = {"metrics": sorted(metrics), "seed": seed, "n_pairs": n_pairs, "mmd_scales": list(MMD_SCALES),
           "bc_sigma": BC_SIGMA, "ae": ae.param_hash() if ae is not None else None}
    rep.config_hash = hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()[:16]
    return rep


def add_noise_at_snr(audio: np.ndarray, snr_db: float, rng: np.random.Generator) -> np.ndarray:
    audio = np.asarray(audio, dtype=np.float64)
    power = float(np.mean(audio**2))
    noise_power = power / (10.0 ** (snr_db / 10.0))
    return audio + rng.normal(0.0, math.sqrt(noise_power), audio.shape)


def evaluate_robustness(model, dataset, ae: FgdAutoencoder | None, conditions=CONDITIONS,
                        metrics=METRIC_NAMES, snr_db: float = 10.0, seed: int = 0) -> list[MetricReport]:
    """Generate under each input condition and score against the dataset's poses.

    Conditions: "T" text only, "S" speech only, "T+S" both, "noisy-S" speech
    with additive Gaussian noise at ``snr_db`` plus text.
    """
    from .training import generate_for_dataset

    unknown = set(conditions) - set(CONDITIONS)
    if unknown:
        raise ValueError(f"unknown condition(s) {sorted(unknown)}; valid: {', '.join(CONDITIONS)}")
    reference = np.stack([c.pose for c in dataset.clips])
    audio = [c.audio for c in dataset.clips]
    reports = []
    for cond in conditions:
        if cond == "T":
            gen = generate_for_dataset(model, dataset, text=True, speech=False)
        elif cond == "S":
            gen = generate_for_dataset(model, dataset, text=False, speech=True)
        elif cond == "T+S":
            gen = generate_for_dataset(model, dataset)
        else:
            rng = np.random.default_rng(seed)
            noisy = [compute_log_mel(add_noise_at_snr(a, snr_db, rng), SAMPLE_RATE) for a in audio]
            gen = generate_for_dataset(model, dataset, speech_override=noisy)
        reports.append(compute_metrics(gen, reference, audio, ae, metrics, cond, seed))
    return reports


def format_table(reports: list[MetricReport]) -> str:
    header = f"{'Input':<8}{'MPJAE':>10}{'MMD':>10}{'FGD':>10}{'Diversity':>11}{'BC':>8}"
    lines = [header, "-" * len(header)]

    def fmt(v, w, p=4):
        return f"{'-':>{w}}" if v is None else f"{v:>{w}.{p}f}"

    for r in reports:
        lines.append(f"{r.condition:<8}{fmt(r.mpjae, 10)}{fmt(r.mmd, 10)}{fmt(r.fgd, 10)}"
                     f"{fmt(r.diversity, 11)}{fmt(r.bc, 8, 3)}")
    return "\n".join(lines)
