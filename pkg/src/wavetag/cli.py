"""``wavetag`` command-line interface.

Subcommands: ``synth-data`` (toy corpus generator), ``train`` (strategy
runs from a config file), ``eval`` (score a manifest with a checkpoint),
``predict`` (rank classes for one WAV). Exit codes: 0 success, 1 runtime
failure, 2 usage error. Logs go to stderr; results go to stdout or the
``--out`` target.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .audio_io import WavError, prepare_clip, read_wav
from .checkpoint import CheckpointConfigError, CheckpointError, config_hash, load_checkpoint
from .config import RunConfig, RunConfigError
from .dataset import (
    VOCAB_FILENAME,
    LabelVocabulary,
    ManifestError,
    load_manifest,
    make_toy_dataset,
    write_manifest,
)
from .diffops import NonFiniteGradientError
from .metrics import evaluate_model
from .model import ConfigError, ModelConfig, WaveTagModel
from .training import ClipStore, TrainingDivergedError, run_training

log = logging.getLogger(__name__)

_RUNTIME_ERRORS = (
    WavError,
    ManifestError,
    CheckpointError,
    RunConfigError,
    ConfigError,
    TrainingDivergedError,
    NonFiniteGradientError,
    ValueError,
    OSError,
)


# ---------------------------------------------------------------------------
# subcommand implementations
# ---------------------------------------------------------------------------

def _cmd_synth_data(args: argparse.Namespace, parser: argparse.ArgumentParser) -> int:
    if args.classes < 2:
        parser.error(f"--classes must be >= 2 (got {args.classes}): mixing needs distinct labels")
    if args.clips < 2:
        parser.error(f"--clips must be >= 2 (got {args.clips})")
    if args.seconds <= 0:
        parser.error(f"--seconds must be positive (got {args.seconds})")
    out_dir = Path(args.out)
    manifest = make_toy_dataset(
        out_dir,
        n_classes=args.classes,
        n_clips=args.clips,
        clip_seconds=args.seconds,
        sample_rate=args.rate,
        seed=args.seed,
    )
    if args.eval_fraction > 0:
        vocab = LabelVocabulary.load(out_dir / VOCAB_FILENAME)
        records = load_manifest(manifest, vocab)
        stride = max(2, round(1.0 / args.eval_fraction))
        eval_records = [rec for i, rec in enumerate(records) if i % stride == 0]
        train_records = [rec for i, rec in enumerate(records) if i % stride != 0]
        write_manifest(out_dir / "manifest_train.jsonl", train_records, vocab)
        write_manifest(out_dir / "manifest_eval.jsonl", eval_records, vocab)
        print(f"wrote {len(train_records)} train / {len(eval_records)} eval clips under {out_dir}")
    print(manifest)
    return 0


def _load_vocab_for_manifest(manifest: Path, vocab_arg: str | None) -> LabelVocabulary:
    vocab_path = Path(vocab_arg) if vocab_arg else manifest.parent / VOCAB_FILENAME
    if not vocab_path.exists():
        raise ManifestError(f"vocabulary file not found: {vocab_path} (pass --vocab)")
    return LabelVocabulary.load(vocab_path)


def _cmd_train(args: argparse.Namespace, parser: argparse.ArgumentParser) -> int:
    cfg = RunConfig.load(args.config)
    cfg.apply_overrides(
        seed=args.seed,
        strategy=args.strategy,
        deterministic=True if args.deterministic else None,
    )
    if args.workers and args.workers > 1:
        log.warning("worker count %d requested; loader is serial, which trivially satisfies "
                    "the delivered-order contract", args.workers)

    train_manifest = cfg.resolve_path(cfg.data.train_manifest)
    if train_manifest is None:
        raise RunConfigError("config data.train_manifest is required for training")
    vocab_path = cfg.resolve_path(cfg.data.vocab) or train_manifest.parent / VOCAB_FILENAME
    if not vocab_path.exists():
        raise RunConfigError(f"vocabulary file not found: {vocab_path}")
    vocab = LabelVocabulary.load(vocab_path)
    records = load_manifest(train_manifest, vocab)
    eval_records = None
    eval_manifest = cfg.resolve_path(cfg.data.eval_manifest)
    if eval_manifest is not None:
        eval_records = load_manifest(eval_manifest, vocab)

    model_cfg = cfg.model_config(vocab.size)
    model = WaveTagModel(model_cfg, seed=cfg.train.seed)
    if args.resume:
        ckpt = load_checkpoint(args.resume)
        stored = ckpt.configs.get("model")
        if stored is not None and not args.force:
            want, got = config_hash(model_cfg.to_dict()), config_hash(stored)
            if want != got:
                raise CheckpointConfigError(
                    f"{args.resume}: stored model config hash {got[:12]} != requested {want[:12]}; "
                    "use --force to resume anyway"
                )
        model.load_state(ckpt.tensors)
        log.info("resumed parameters from %s", args.resume)

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "resolved_config.json", "w", encoding="utf-8") as fh:
        json.dump(cfg.resolved(), fh, indent=2, sort_keys=True)
        fh.write("\n")

    report = run_training(
        model, records, vocab, cfg.train, out_dir,
        eval_records=eval_records, sample_rate=cfg.data.sample_rate,
    )
    line = (f"strategy={report.strategy} steps={report.steps_run} "
            f"last_loss={report.loss_trace[-1]:.4f} wall={report.wall_clock_s:.1f}s")
    if report.final_metrics:
        dp = report.final_metrics["d_prime"]
        line += (f" mAP={report.final_metrics['mAP']:.4f} AUC={report.final_metrics['AUC']:.4f}"
                 f" d_prime={dp if dp is None else format(dp, '.4f')}")
    print(line)
    print(f"artifacts: {out_dir}")
    return 0


def _model_from_checkpoint(path: str) -> tuple[WaveTagModel, dict]:
    ckpt = load_checkpoint(path)
    stored = ckpt.configs.get("model")
    if stored is None:
        raise CheckpointConfigError(f"{path}: checkpoint stores no model config")
    model = WaveTagModel(ModelConfig.from_dict(stored), seed=0)
    model.load_state(ckpt.tensors)
    return model, ckpt.configs


def _cmd_eval(args: argparse.Namespace, parser: argparse.ArgumentParser) -> int:
    model, configs = _model_from_checkpoint(args.checkpoint)
    manifest = Path(args.manifest)
    vocab = _load_vocab_for_manifest(manifest, args.vocab)
    if vocab.size != model.cfg.n_classes:
        raise RunConfigError(
            f"vocabulary has {vocab.size} classes but the checkpoint was trained with {model.cfg.n_classes}"
        )
    records = load_manifest(manifest, vocab)
    sample_rate = configs.get("data", {}).get("sample_rate", args.rate)
    store = ClipStore(records, sample_rate=sample_rate, clip_len=model.cfg.clip_len)
    report = evaluate_model(model, records, vocab, store=store, batch_size=args.batch_size)
    payload = json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n"
    if args.out:
        Path(args.out).write_text(payload, encoding="utf-8")
    else:
        sys.stdout.write(payload)
    dp = "n/a" if report.d_prime is None else f"{report.d_prime:.4f}"
    print(f"mAP={report.map:.4f} AUC={report.auc:.4f} d_prime={dp} "
          f"({report.evaluated_ap_classes}/{vocab.size} classes scored)", file=sys.stderr)
    return 0


def _cmd_predict(args: argparse.Namespace, parser: argparse.ArgumentParser) -> int:
    if args.top < 1:
        parser.error(f"--top must be >= 1 (got {args.top})")
    model, configs = _model_from_checkpoint(args.checkpoint)
    labels = configs.get("data", {}).get("labels")
    if args.vocab:
        labels = LabelVocabulary.load(args.vocab).names
    if not labels or len(labels) != model.cfg.n_classes:
        raise CheckpointConfigError(
            f"{args.checkpoint}: no usable label names stored; pass --vocab with "
            f"{model.cfg.n_classes} class names"
        )
    sample_rate = configs.get("data", {}).get("sample_rate", args.rate)
    clip = prepare_clip(read_wav(args.wav), sample_rate, model.cfg.clip_len)
    probs = model.predict_proba(clip.samples[None, None, :])[0]
    ranked = sorted(zip(labels, probs), key=lambda kv: -kv[1])
    for name, p in ranked[: args.top]:
        print(f"{name}\t{p:.4f}")
    return 0


# ---------------------------------------------------------------------------
# parser wiring
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="wavetag",
        description="Raw-waveform multi-label audio tagging: synth data, train, evaluate, predict.",
    )
    parser.add_argument("--verbose", action="store_true", help="log at DEBUG instead of INFO")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-data", help="generate the synthetic tone-burst toy corpus")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--classes", type=int, default=8)
    p.add_argument("--clips", type=int, default=512)
    p.add_argument("--seconds", type=float, default=1.0)
    p.add_argument("--rate", type=int, default=16_000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--eval-fraction", type=float, default=0.0,
                   help="also write manifest_train/manifest_eval split files")
    p.set_defaults(func=_cmd_synth_data)

    p = sub.add_parser("train", help="run a training strategy from a config file")
    p.add_argument("--config", required=True, help="run config JSON")
    p.add_argument("--out", required=True, help="run directory for reports and checkpoints")
    p.add_argument("--strategy", choices=("mix_training", "mix_no_finetune", "mixup_baseline", "none"))
    p.add_argument("--seed", type=int)
    p.add_argument("--deterministic", action="store_true")
    p.add_argument("--resume", help="checkpoint of parameters to continue from")
    p.add_argument("--force", action="store_true", help="skip the config-hash gate on --resume")
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="score a manifest with a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", help="metrics report JSON path (default: stdout)")
    p.add_argument("--vocab", help="label vocabulary (default: labels.txt beside the manifest)")
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--rate", type=int, default=16_000,
                   help="fallback sample rate if the checkpoint stores none")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--deterministic", action="store_true",
                   help="assert reproducible output (scoring is always serial and seed-free)")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("predict", help="rank class probabilities for one WAV file")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--wav", required=True)
    p.add_argument("--top", type=int, default=5)
    p.add_argument("--vocab", help="override label names stored in the checkpoint")
    p.add_argument("--rate", type=int, default=16_000,
                   help="fallback sample rate if the checkpoint stores none")
    p.set_defaults(func=_cmd_predict)
    return parser


def main(argv: "list[str] | None" = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        stream=sys.stderr,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args, parser)
    except _RUNTIME_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
