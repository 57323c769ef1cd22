import time

import numpy as np
import pytest
import torch

from gesturegen.data import (
    POSE_DIM,
    POSE_LEN,
    SPEECH_LEN,
    N_MELS,
    TEXT_LEN,
    Clip,
    TextSequence,
    generate_synthetic_corpus,
    load_dataset,
)
from gesturegen.model import GestureModel, ModelConfig


@pytest.fixture(scope="session")
def corpus_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus8")
    generate_synthetic_corpus(root, n_clips=8, seed=7)
    return root


@pytest.fixture(scope="session")
def dataset(corpus_dir):
    return load_dataset(corpus_dir)


def toy_config(vocab_size=9) -> ModelConfig:
    return ModelConfig(vocab_size=vocab_size, d_model=8, n_heads=2, d_ff=16, word_embed_dim=4)


@pytest.fixture
def toy_model():
    torch.manual_seed(0)
    return GestureModel(toy_config()).double()


def random_clip(rng, vocab_size=9, valid_len=None, clip_id="r") -> Clip:
    vl = int(rng.integers(1, TEXT_LEN + 1)) if valid_len is None else valid_len
    ids = np.zeros(TEXT_LEN, dtype=np.int64)
    ids[:vl] = rng.integers(3, vocab_size, vl)
    return Clip(
        text=TextSequence(ids, vl),
        speech=rng.normal(-3.0, 2.0, (SPEECH_LEN, N_MELS)),
        pose=rng.uniform(-0.5, 0.5, (POSE_LEN, POSE_DIM)),
        clip_id=clip_id,
    )


@pytest.fixture(scope="session")
def pipeline(dataset):
    """Stages 1 -> 2 -> 3 at reduced epochs (50/50/200) on the 8-clip corpus."""
    from gesturegen.training import StageConfig, TrainLog, train_stage1, train_stage2, train_stage3

    t0 = time.perf_counter()
    logs = {k: TrainLog() for k in (1, 2, 3)}
    ckpt1 = train_stage1(dataset, StageConfig(1, epochs=50), log_to=logs[1])
    ckpt2 = train_stage2(dataset, ckpt1, StageConfig(2, epochs=50), log_to=logs[2])
    ckpt3 = train_stage3(dataset, ckpt2, StageConfig(3, epochs=200), log_to=logs[3])
    return {"ckpt": {1: ckpt1, 2: ckpt2, 3: ckpt3}, "logs": logs, "seconds": time.perf_counter() - t0}


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
