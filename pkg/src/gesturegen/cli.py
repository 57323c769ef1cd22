"""Command-line entry points.

Exit codes: 0 success, 1 usage error, 2 data/validation error.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import yaml

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2
CONFIG_ENV = "GESTUREGEN_CONFIG"

log = logging.getLogger("gesturegen")


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _load_config(path: str | None) -> dict:
    path = path or os.environ.get(CONFIG_ENV)
    if not path:
        return {}
    p = Path(path)
    if not p.is_file():
        raise DataError(f"config file not found: {p}")
    data = yaml.safe_load(p.read_text()) or {}
    if not isinstance(data, dict):
        raise DataError(f"config {p} must be a key-value mapping")
    return data


# --------------------------------------------------------------------------- #
def cmd_make_synthetic(args) -> int:
    from .data import generate_synthetic_corpus

    if args.clips < 1:
        raise UsageError("--clips must be >= 1")
    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise UsageError(f"{out} exists and is not empty (use --force to overwrite)")
    manifest = generate_synthetic_corpus(out, args.clips, args.seed, args.lexicon)
    print(f"wrote {len(manifest.clips)} clips to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .data import load_dataset
    from .model import ModelConfig
    from .training import (
        StageConfig,
        TrainLog,
        load_checkpoint,
        save_checkpoint,
        train_stage1,
        train_stage2,
        train_stage3,
    )

    if args.stage > 1 and not args.ckpt_in:
        raise UsageError(f"--stage {args.stage} requires --ckpt-in (a stage-{args.stage - 1} checkpoint)")
    cfg_map = _load_config(args.config)
    try:
        cfg = StageConfig.from_mapping(args.stage, cfg_map)
    except (TypeError, ValueError) as exc:
        raise DataError(f"bad config: {exc}") from exc
    if args.seed is not None:
        cfg.seed = args.seed
    if args.epochs is not None:
        cfg.epochs = args.epochs
    dataset = load_dataset(args.data)
    train_log = TrainLog()
    if args.stage == 1:
        model_cfg = ModelConfig(vocab_size=len(dataset.vocab), **(cfg_map.get("model") or {}))
        ckpt = train_stage1(dataset, cfg, model_cfg, train_log)
    else:
        prev = load_checkpoint(args.ckpt_in)
        fn = train_stage2 if args.stage == 2 else train_stage3
        ckpt = fn(dataset, prev, cfg, train_log)
    out = Path(args.ckpt_out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(ckpt, out)
    log_path = out.with_suffix(".log")
    train_log.write_jsonl(log_path)
    last = train_log.records[-1]["total"] if train_log.records else float("nan")
    print(f"stage {args.stage}: {cfg.epochs} epochs, final loss {last:.6f}; wrote {out} and {log_path}")
    return EXIT_OK


def cmd_generate(args) -> int:
    from .data import (
        POSE_DIM,
        SAMPLE_RATE,
        Vocabulary,
        compute_log_mel,
        denormalize_pose,
        normalize_pose,
        read_pose_file,
        read_wav,
        tokenize,
        write_pose_file,
    )
    from .model import generate_gesture
    from .training import load_checkpoint, model_from_checkpoint

    if args.text is None and args.audio is None:
        raise UsageError("give at least one of --text / --audio")
    ckpt = load_checkpoint(args.ckpt)
    model = model_from_checkpoint(ckpt)
    text = None
    if args.text is not None:
        if not ckpt.vocab:
            raise DataError("checkpoint carries no vocabulary; cannot tokenize --text")
        text = tokenize(args.text.split(), Vocabulary(ckpt.vocab))
    speech = None
    if args.audio is not None:
        wav, sr = read_wav(args.audio)
        speech = compute_log_mel(wav, sr)
    if args.pre_pose:
        raw = read_pose_file(args.pre_pose)
        if len(raw) < model.cfg.n_pre_poses:
            raise DataError(f"pre-pose file has {len(raw)} frames, need {model.cfg.n_pre_poses}")
        pre = normalize_pose(raw[: model.cfg.n_pre_poses])
    else:
        pre = np.zeros((model.cfg.n_pre_poses, POSE_DIM))
    pose = generate_gesture(model, text, speech, pre)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_pose_file(out, denormalize_pose(pose))
    sidecar = {
        "text": args.text,
        "audio": str(args.audio) if args.audio else None,
        "pre_pose": str(args.pre_pose) if args.pre_pose else None,
        "seed": args.seed,
        "checkpoint": str(args.ckpt),
        "checkpoint_sha256": _sha256_file(args.ckpt),
        "frames": int(pose.shape[0]),
        "dims": int(pose.shape[1]),
        "sample_rate": SAMPLE_RATE,
    }
    Path(str(out) + ".json").write_text(json.dumps(sidecar, indent=1, sort_keys=True))
    print(f"wrote {out} ({out.stat().st_size} bytes)")
    return EXIT_OK


def _split_list(value: str) -> list[str]:
    return [v.strip() for v in value.split(",") if v.strip()]


def cmd_evaluate(args) -> int:
    from .data import load_dataset
    from .metrics import (
        CONDITIONS,
        METRIC_NAMES,
        FgdAutoencoder,
        evaluate_robustness,
        format_table,
        train_fgd_autoencoder,
    )
    from .training import load_checkpoint, model_from_checkpoint

    metrics = _split_list(args.metrics)
    bad = [m for m in metrics if m not in METRIC_NAMES]
    if bad or not metrics:
        raise UsageError(f"unknown metric(s) {bad}; valid names: {', '.join(METRIC_NAMES)}")
    conditions = _split_list(args.conditions)
    bad = [c for c in conditions if c not in CONDITIONS]
    if bad or not conditions:
        raise UsageError(f"unknown condition(s) {bad}; valid: {', '.join(CONDITIONS)}")

    ckpt = load_checkpoint(args.ckpt)
    model = model_from_checkpoint(ckpt)
    dataset = load_dataset(args.data)
    ae = None
    if {"fgd", "diversity"} & set(metrics):
        cache_dir = Path(args.ae_cache) if args.ae_cache else Path(args.data) / ".fgd_cache"
        key = hashlib.sha256(f"{dataset.content_hash()}:{args.seed}".encode()).hexdigest()[:20]
        path = cache_dir / f"ae_{key}.safetensors"
        if path.is_file():
            ae = FgdAutoencoder.load(path)
        else:
            ae = train_fgd_autoencoder(np.stack([c.pose for c in dataset.clips]), seed=args.seed)
            cache_dir.mkdir(parents=True, exist_ok=True)
            ae.save(path)
            ae = FgdAutoencoder.load(path)  # score with exactly the cached weights
    reports = evaluate_robustness(model, dataset, ae, conditions, metrics, args.snr_db, args.seed)
    doc = {
        "checkpoint": str(args.ckpt),
        "checkpoint_sha256": _sha256_file(args.ckpt),
        "dataset": str(args.data),
        "seed": args.seed,
        "snr_db": args.snr_db,
        "fgd_ae_hash": ae.param_hash() if ae is not None else None,
        "conditions": {r.condition: r.metrics() for r in reports},
        "reports": [r.to_dict() for r in reports],
    }
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(json.dumps(doc, indent=1, sort_keys=True))
    print(format_table(reports))
    return EXIT_OK


def cmd_render(args) -> int:
    from .data import POSE_LEN, read_pose_file
    from .render import render_poses

    pose = read_pose_file(args.poses, n_frames=POSE_LEN)
    paths = render_poses(pose, args.out, args.format)
    print(f"wrote {len(paths)} file(s) to {args.out}")
    return EXIT_OK


# --------------------------------------------------------------------------- #
def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="gesturegen", description="Co-speech gesture generation pipeline")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("make-synthetic", help="write a synthetic aligned corpus")
    s.add_argument("--out", required=True)
    s.add_argument("--clips", type=int, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--lexicon", type=int, default=20)
    s.add_argument("--force", action="store_true")
    s.set_defaults(func=cmd_make_synthetic)

    s = sub.add_parser("train", help="run one training stage")
    s.add_argument("--stage", type=int, choices=(1, 2, 3), required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--config", help=f"YAML config (default: ${CONFIG_ENV})")
    s.add_argument("--ckpt-in")
    s.add_argument("--ckpt-out", required=True)
    s.add_argument("--seed", type=int)
    s.add_argument("--epochs", type=int)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("generate", help="generate one gesture clip")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--text")
    s.add_argument("--audio")
    s.add_argument("--pre-pose")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_generate)

    s = sub.add_parser("evaluate", help="score a checkpoint under several input conditions")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--metrics", default="mpjae,mmd,fgd,diversity,bc")
    s.add_argument("--conditions", default="T,S,T+S,noisy-S")
    s.add_argument("--out")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--snr-db", type=float, default=10.0)
    s.add_argument("--ae-cache")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("render", help="draw a pose file as stick-figure frames")
    s.add_argument("--poses", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--format", choices=("frames", "video"), default="frames")
    s.set_defaults(func=cmd_render)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    from .training import CheckpointError, StageOrderError

    try:
        return args.func(args)
    except UsageError as exc:
        print(f"gesturegen: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except StageOrderError as exc:
        print(f"gesturegen: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, CheckpointError, ValueError, FileNotFoundError, OSError) as exc:
        print(f"gesturegen: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
