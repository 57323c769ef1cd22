"""Dataset format, synthetic corpus generation and feature extraction.

A clip is a time-aligned (text, speech, pose) triple covering 40 pose frames
at 30 fps. Text becomes 32 token ids, speech a [45 x 128] log-mel matrix and
pose a [40 x 165] matrix of axis-angle rotations divided by pi.
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
import wave
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

log = logging.getLogger(__name__)

TEXT_LEN = 32
SPEECH_LEN = 45
POSE_LEN = 40
N_MELS = 128
N_JOINTS = 55
POSE_DIM = N_JOINTS * 3

SAMPLE_RATE = 16000
FPS = 30
CLIP_SECONDS = POSE_LEN / FPS
CLIP_SAMPLES = int(SAMPLE_RATE * POSE_LEN // FPS)  # 21333

N_FFT = 2048
WIN_LENGTH = 960  # 60 ms
HOP_LENGTH = 480  # 30 ms
F_MIN = 0.0
F_MAX = 8000.0
MEL_EPS = 1e-10

PAD_ID = 0
MASK_ID = 1
UNK_ID = 2
RESERVED = {"<pad>": PAD_ID, "<mask>": MASK_ID, "<unk>": UNK_ID}

MANIFEST_NAME = "manifest.json"
VOCAB_NAME = "vocab.json"
FORMAT_VERSION = 1


# --------------------------------------------------------------------------- #
#  Text
# --------------------------------------------------------------------------- #
@dataclass
class Vocabulary:
    word_to_id: dict[str, int]
    n_truncated: int = field(default=0, compare=False)

    def __post_init__(self):
        ids = sorted(self.word_to_id.values())
        if ids != list(range(len(ids))):
            raise ValueError("vocabulary ids must be contiguous from 0")
        for name, idx in RESERVED.items():
            if self.word_to_id.get(name) != idx:
                raise ValueError(f"reserved token {name} must map to {idx}")
        self._id_to_word = {i: w for w, i in self.word_to_id.items()}

    def __len__(self) -> int:
        return len(self.word_to_id)

    def __getitem__(self, word: str) -> int:
        return self.word_to_id.get(word, UNK_ID)

    def id_to_word(self, idx: int) -> str:
        return self._id_to_word[idx]

    def to_json(self) -> str:
        return json.dumps(self.word_to_id, sort_keys=True, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "Vocabulary":
        return cls({str(k): int(v) for k, v in json.loads(text).items()})

    def save(self, path: str | os.PathLike) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path: str | os.PathLike) -> "Vocabulary":
        return cls.from_json(Path(path).read_text())


def _as_words(item: str | Sequence[str]) -> list[str]:
    return item.split() if isinstance(item, str) else list(item)


def build_vocabulary(transcripts: Iterable[str | Sequence[str]]) -> Vocabulary:
    """Word-level dictionary over a corpus, ids assigned in lexicographic order.

    Each transcript may be a whitespace-separated string or a word list.
    """
    words: set[str] = set()
    for t in transcripts:
        words.update(_as_words(t))
    words -= set(RESERVED)
    if not words:
        raise ValueError("empty corpus")
    mapping = dict(RESERVED)
    for i, w in enumerate(sorted(words)):
        mapping[w] = len(RESERVED) + i
    return Vocabulary(mapping)


@dataclass
class TextSequence:
    token_ids: np.ndarray  # int64 [32]
    valid_len: int

    def __post_init__(self):
        self.token_ids = np.asarray(self.token_ids, dtype=np.int64)
        if self.token_ids.shape != (TEXT_LEN,):
            raise ValueError(f"token_ids must have shape ({TEXT_LEN},)")
        if not 0 <= self.valid_len <= TEXT_LEN:
            raise ValueError("valid_len out of range")


def tokenize(words: str | Sequence[str], vocab: Vocabulary) -> TextSequence:
    words = _as_words(words)
    if len(words) > TEXT_LEN:
        vocab.n_truncated += 1
        log.warning("truncating transcript of %d words to %d", len(words), TEXT_LEN)
        words = words[:TEXT_LEN]
    ids = np.full(TEXT_LEN, PAD_ID, dtype=np.int64)
    ids[: len(words)] = [vocab[w] for w in words]
    return TextSequence(ids, len(words))


def detokenize(seq: TextSequence, vocab: Vocabulary) -> list[str]:
    return [vocab.id_to_word(int(i)) for i in seq.token_ids[: seq.valid_len]]


# --------------------------------------------------------------------------- #
#  Speech
# --------------------------------------------------------------------------- #
def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(
    sample_rate: int = SAMPLE_RATE,
    n_fft: int = N_FFT,
    n_mels: int = N_MELS,
    f_min: float = F_MIN,
    f_max: float = F_MAX,
) -> np.ndarray:
    """Triangular HTK-scale filters, shape [n_mels, n_fft // 2 + 1], unnormalized."""
    fft_freqs = np.linspace(0.0, sample_rate / 2, n_fft // 2 + 1)
    mel_pts = np.linspace(hz_to_mel(f_min), hz_to_mel(f_max), n_mels + 2)
    hz_pts = mel_to_hz(mel_pts)
    lower, center, upper = hz_pts[:-2, None], hz_pts[1:-1, None], hz_pts[2:, None]
    up = (fft_freqs[None, :] - lower) / (center - lower)
    down = (upper - fft_freqs[None, :]) / (upper - center)
    return np.maximum(0.0, np.minimum(up, down))


def mel_center_frequencies(n_mels: int = N_MELS, f_min: float = F_MIN, f_max: float = F_MAX) -> np.ndarray:
    return mel_to_hz(np.linspace(hz_to_mel(f_min), hz_to_mel(f_max), n_mels + 2))[1:-1]


def _stft_power(x: np.ndarray) -> np.ndarray:
    """Center-padded (zeros) power STFT, frames along axis 0."""
    window = np.zeros(N_FFT)
    off = (N_FFT - WIN_LENGTH) // 2
    window[off : off + WIN_LENGTH] = np.hanning(WIN_LENGTH + 1)[:-1]  # periodic Hann
    padded = np.pad(x, (N_FFT // 2, N_FFT // 2))
    n_frames = 1 + (len(padded) - N_FFT) // HOP_LENGTH
    idx = np.arange(N_FFT)[None, :] + HOP_LENGTH * np.arange(n_frames)[:, None]
    spec = np.fft.rfft(padded[idx] * window[None, :], axis=1)
    return spec.real**2 + spec.imag**2


_MEL_FB: np.ndarray | None = None


def compute_log_mel(waveform: np.ndarray, sample_rate: int) -> np.ndarray:
    """Natural-log mel energies of one clip, shape [45, 128]."""
    x = np.asarray(waveform, dtype=np.float64)
    if sample_rate != SAMPLE_RATE or x.ndim != 1 or len(x) != CLIP_SAMPLES:
        raise ValueError(
            f"clip length/rate mismatch: expected {CLIP_SAMPLES} mono samples at "
            f"{SAMPLE_RATE} Hz, got shape {x.shape} at {sample_rate} Hz"
        )
    global _MEL_FB
    if _MEL_FB is None:
        _MEL_FB = mel_filterbank()
    mel = _stft_power(x) @ _MEL_FB.T
    out = np.log(mel + MEL_EPS)
    assert out.shape == (SPEECH_LEN, N_MELS)
    return out


# --------------------------------------------------------------------------- #
#  Pose
# --------------------------------------------------------------------------- #
def wrap_angles(raw: np.ndarray) -> np.ndarray:
    raw = np.asarray(raw, dtype=np.float64)
    wrapped = np.mod(raw + np.pi, 2 * np.pi) - np.pi
    return np.where(np.abs(raw) > np.pi, wrapped, raw)


def normalize_pose(raw: np.ndarray) -> np.ndarray:
    """Radians -> [-1, 1]. Out-of-range angles are wrapped into [-pi, pi] first."""
    raw = np.asarray(raw, dtype=np.float64)
    if not np.all(np.isfinite(raw)):
        raise ValueError("pose contains non-finite values")
    return wrap_angles(raw) / np.pi


def denormalize_pose(pose: np.ndarray) -> np.ndarray:
    return np.asarray(pose, dtype=np.float64) * np.pi


def check_pose_sequence(pose: np.ndarray) -> None:
    """Raise ValueError unless ``pose`` is a valid normalized [40 x 165] sequence."""
    pose = np.asarray(pose)
    if pose.shape != (POSE_LEN, POSE_DIM):
        raise ValueError(f"pose must have shape ({POSE_LEN}, {POSE_DIM}), got {pose.shape}")
    if not np.all(np.isfinite(pose)):
        raise ValueError("pose contains non-finite values")
    if np.abs(pose).max() > 1.0:
        raise ValueError("normalized pose outside [-1, 1]")


# --------------------------------------------------------------------------- #
#  Clips and recordings
# --------------------------------------------------------------------------- #
@dataclass
class Clip:
    text: TextSequence
    speech: np.ndarray  # [45, 128] log-mel
    pose: np.ndarray  # [40, 165] normalized
    clip_id: str = ""
    audio: np.ndarray | None = None  # raw waveform, kept for beat metrics
    words: list[str] | None = None


@dataclass
class Recording:
    """A long aligned sample: timed words, a mono waveform and raw-radian poses."""

    words: list[tuple[str, float, float]]
    audio: np.ndarray
    pose: np.ndarray  # [n_frames, 165] radians
    sample_rate: int = SAMPLE_RATE
    fps: int = FPS

    @property
    def duration(self) -> float:
        return min(len(self.audio) / self.sample_rate, len(self.pose) / self.fps)


def crop_aligned_clip(rec: Recording, start_s: float, vocab: Vocabulary, clip_id: str = "") -> Clip:
    if start_s < 0 or start_s + CLIP_SECONDS > rec.duration + 1e-9:
        raise ValueError(
            f"window [{start_s:.3f}, {start_s + CLIP_SECONDS:.3f}] s exceeds recording "
            f"of {rec.duration:.3f} s"
        )
    f0 = int(round(start_s * rec.fps))
    a0 = int(round(start_s * rec.sample_rate))
    if f0 + POSE_LEN > len(rec.pose) or a0 + CLIP_SAMPLES > len(rec.audio):
        raise ValueError("window exceeds recording after rounding to frames/samples")
    end_s = start_s + CLIP_SECONDS
    words = [w for w, ws, _ in rec.words if start_s <= ws < end_s]
    audio = np.asarray(rec.audio[a0 : a0 + CLIP_SAMPLES], dtype=np.float64)
    return Clip(
        text=tokenize(words, vocab),
        speech=compute_log_mel(audio, rec.sample_rate),
        pose=normalize_pose(rec.pose[f0 : f0 + POSE_LEN]),
        clip_id=clip_id,
        audio=audio,
        words=words[:TEXT_LEN],
    )


# --------------------------------------------------------------------------- #
#  On-disk format
# --------------------------------------------------------------------------- #
def write_wav(path: str | os.PathLike, audio: np.ndarray, sample_rate: int = SAMPLE_RATE) -> None:
    pcm = np.round(np.clip(audio, -1.0, 1.0) * 32767.0).astype("<i2")
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(sample_rate)
        fh.writeframes(pcm.tobytes())


def read_wav(path: str | os.PathLike) -> tuple[np.ndarray, int]:
    with wave.open(str(path), "rb") as fh:
        if fh.getnchannels() != 1 or fh.getsampwidth() != 2:
            raise ValueError(f"{path}: expected mono 16-bit PCM")
        sr = fh.getframerate()
        data = np.frombuffer(fh.readframes(fh.getnframes()), dtype="<i2")
    return data.astype(np.float64) / 32767.0, sr


def write_pose_file(path: str | os.PathLike, pose_rad: np.ndarray) -> None:
    np.ascontiguousarray(pose_rad, dtype="<f4").tofile(str(path))


def read_pose_file(path: str | os.PathLike, n_frames: int | None = None) -> np.ndarray:
    """Raw little-endian float32 radians, row-major [n_frames x 165]."""
    raw = Path(path).read_bytes()
    row = POSE_DIM * 4
    if len(raw) == 0 or len(raw) % row:
        raise ValueError(f"{path}: size {len(raw)} is not a whole number of {POSE_DIM}-dim frames")
    arr = np.frombuffer(raw, dtype="<f4").reshape(-1, POSE_DIM).astype(np.float64)
    if n_frames is not None and len(arr) != n_frames:
        raise ValueError(f"{path}: expected {n_frames} frames, found {len(arr)}")
    return arr


@dataclass
class ClipRecord:
    clip_id: str
    words: str
    audio: str
    pose: str
    start_s: float
    split: str = "train"


@dataclass
class DatasetManifest:
    root: Path
    clips: list[ClipRecord]
    sample_rate: int = SAMPLE_RATE
    fps: int = FPS

    def __post_init__(self):
        self.root = Path(self.root)
        ids = [c.clip_id for c in self.clips]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate clip ids in manifest")

    def validate(self) -> None:
        for c in self.clips:
            for name in (c.words, c.audio, c.pose):
                if not (self.root / name).is_file():
                    raise FileNotFoundError(f"manifest references missing file {self.root / name}")

    def to_dict(self) -> dict:
        return {
            "version": FORMAT_VERSION,
            "sample_rate": self.sample_rate,
            "fps": self.fps,
            "clips": [
                {"id": c.clip_id, "words": c.words, "audio": c.audio, "pose": c.pose,
                 "start_s": c.start_s, "split": c.split}
                for c in self.clips
            ],
        }

    def save(self) -> None:
        (self.root / MANIFEST_NAME).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True))

    @classmethod
    def load(cls, root: str | os.PathLike) -> "DatasetManifest":
        root = Path(root)
        path = root / MANIFEST_NAME
        if not path.is_file():
            raise FileNotFoundError(f"no {MANIFEST_NAME} in {root}")
        d = json.loads(path.read_text())
        clips = [ClipRecord(c["id"], c["words"], c["audio"], c["pose"], float(c["start_s"]),
                            c.get("split", "train")) for c in d["clips"]]
        m = cls(root, clips, int(d["sample_rate"]), int(d["fps"]))
        m.validate()
        return m


def load_recording(manifest: DatasetManifest, rec: ClipRecord) -> Recording:
    root = manifest.root
    words = [(w["word"], float(w["start_s"]), float(w["end_s"]))
             for w in json.loads((root / rec.words).read_text())]
    audio, sr = read_wav(root / rec.audio)
    if sr != manifest.sample_rate:
        raise ValueError(f"{rec.audio}: sample rate {sr} != manifest {manifest.sample_rate}")
    return Recording(words, audio, read_pose_file(root / rec.pose), sr, manifest.fps)


@dataclass
class GestureDataset:
    clips: list[Clip]
    vocab: Vocabulary
    root: Path | None = None

    def __len__(self) -> int:
        return len(self.clips)

    def content_hash(self) -> str:
        h = hashlib.sha256()
        for c in self.clips:
            h.update(c.clip_id.encode())
            h.update(c.text.token_ids.tobytes())
            h.update(np.ascontiguousarray(c.speech).tobytes())
            h.update(np.ascontiguousarray(c.pose).tobytes())
        return h.hexdigest()


def load_dataset(root: str | os.PathLike, split: str | None = None) -> GestureDataset:
    manifest = DatasetManifest.load(root)
    vocab_path = manifest.root / VOCAB_NAME
    if vocab_path.is_file():
        vocab = Vocabulary.load(vocab_path)
    else:
        recs = [load_recording(manifest, r) for r in manifest.clips]
        vocab = build_vocabulary([[w for w, _, _ in r.words] for r in recs])
    clips = []
    for rec in manifest.clips:
        if split is not None and rec.split != split:
            continue
        clips.append(crop_aligned_clip(load_recording(manifest, rec), rec.start_s, vocab, rec.clip_id))
    if not clips:
        raise ValueError(f"dataset {root} has no clips" + (f" in split {split!r}" if split else ""))
    return GestureDataset(clips, vocab, manifest.root)


# --------------------------------------------------------------------------- #
#  Synthetic corpus
# --------------------------------------------------------------------------- #
SYNTH_SECONDS = 2.0
_SYLLABLES = ["ba", "de", "ki", "lo", "mu", "na", "po", "ri", "sa", "tu", "ve", "zo"]


def synthetic_lexicon(size: int) -> list[str]:
    words = []
    n = len(_SYLLABLES)
    for i in range(size):
        words.append(_SYLLABLES[i % n] + _SYLLABLES[(i // n) % n] + (str(i // (n * n)) if i >= n * n else ""))
    return words


def _word_motion(word_idx: int, pose_seed: int) -> tuple[np.ndarray, np.ndarray, float]:
    """Per-word amplitude (radians), phase and frequency; a fixed function of the word id."""
    rng = np.random.default_rng([pose_seed, word_idx])
    amp = rng.uniform(0.0, 0.6, POSE_DIM) * (rng.random(POSE_DIM) < 0.5)
    phase = rng.uniform(0, 2 * np.pi, POSE_DIM)
    freq = rng.uniform(0.6, 1.6)
    return amp, phase, freq


def synthesize_recording(rng: np.random.Generator, lexicon: list[str], pose_seed: int = 0,
                         duration: float = SYNTH_SECONDS) -> Recording:
    n_words = int(rng.integers(3, 9))
    word_ids = rng.integers(0, len(lexicon), n_words)
    slot = duration / n_words
    n_samples = int(round(duration * SAMPLE_RATE))
    n_frames = int(round(duration * FPS))
    t_audio = np.arange(n_samples) / SAMPLE_RATE
    t_pose = np.arange(n_frames) / FPS

    audio = rng.normal(0.0, 0.005, n_samples)
    rest = np.random.default_rng([pose_seed, 10**6]).uniform(-0.3, 0.3, POSE_DIM)
    pose = np.tile(rest, (n_frames, 1))
    words = []
    for k, w in enumerate(word_ids):
        ws = k * slot + rng.uniform(0.0, 0.15) * slot
        we = ws + 0.7 * slot
        words.append((lexicon[w], round(float(ws), 6), round(float(we), 6)))
        sel = (t_audio >= ws) & (t_audio < we)
        env = np.hanning(int(sel.sum()))
        pitch = 180.0 + 45.0 * (w % 24)
        audio[sel] += 0.3 * env * np.sin(2 * np.pi * pitch * (t_audio[sel] - ws))
        amp, phase, freq = _word_motion(int(w), pose_seed)
        bump = np.exp(-(((t_pose - 0.5 * (ws + we)) / (0.9 * slot)) ** 2))
        pose += bump[:, None] * amp[None, :] * np.sin(2 * np.pi * freq * t_pose[:, None] + phase[None, :])
    return Recording(words, audio, pose, SAMPLE_RATE, FPS)


def generate_synthetic_corpus(out_dir: str | os.PathLike, n_clips: int, seed: int,
                              lexicon_size: int = 20) -> DatasetManifest:
    """Write ``n_clips`` aligned recordings plus manifest and vocabulary to ``out_dir``.

    Poses are sums of word-triggered sinusoid bursts whose amplitudes and phases
    depend only on the word id, so the text-to-motion mapping is learnable.
    """
    if n_clips < 1:
        raise ValueError("n_clips must be >= 1")
    if lexicon_size < 1:
        raise ValueError("lexicon_size must be >= 1")
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    lexicon = synthetic_lexicon(lexicon_size)
    rng = np.random.default_rng(seed)
    records, transcripts = [], []
    max_start_frame = int(round(SYNTH_SECONDS * FPS)) - POSE_LEN
    for i in range(n_clips):
        rec = synthesize_recording(rng, lexicon)
        start_s = int(rng.integers(0, max_start_frame + 1)) / FPS
        cid = f"clip{i:05d}"
        (root / f"{cid}.words.json").write_text(json.dumps(
            [{"word": w, "start_s": s, "end_s": e} for w, s, e in rec.words], indent=1))
        write_wav(root / f"{cid}.wav", rec.audio)
        write_pose_file(root / f"{cid}.pose.f32", rec.pose)
        records.append(ClipRecord(cid, f"{cid}.words.json", f"{cid}.wav", f"{cid}.pose.f32", start_s))
        transcripts.append([w for w, _, _ in rec.words])
    manifest = DatasetManifest(root, records)
    manifest.save()
    build_vocabulary(transcripts).save(root / VOCAB_NAME)
    return manifest
