"""Training loops: the mix-training strategy and its ablation baselines.

``mix_training`` runs two phases on one model: phase 1 trains on mixed
clips with union labels at ``lr_phase1``; phase 2 re-initializes Adam and
fine-tunes on raw clips at ``lr_phase2``. The baselines spend the same
total step budget in a single phase at ``lr_phase1``:

* ``mix_no_finetune`` - mixed clips, union labels, no fine-tune phase
* ``mixup_baseline``  - mixed clips, interpolated (alpha-weighted) labels
* ``none``            - raw clips only

Batch providers count the batches they serve, so a report proves which
phase consumed which kind of data.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import diffops as F
from .audio_io import DEFAULT_SAMPLE_RATE, Waveform, prepare_clip, read_wav
from .checkpoint import CheckpointConfigError, config_hash, load_checkpoint, save_checkpoint
from .dataset import (
    BalancedSampler,
    ClipRecord,
    LabelVocabulary,
    make_mixed_batch,
    mixup_labels,
)
from .diffops import AdamState, Tensor, adam_step
from .metrics import evaluate_model
from .model import ModelConfig, WaveTagModel

log = logging.getLogger(__name__)

STRATEGIES = ("mix_training", "mix_no_finetune", "mixup_baseline", "none")


class TrainingDivergedError(RuntimeError):
    """Loss went non-finite; message carries step, lr, and batch ids."""


# ---------------------------------------------------------------------------
# data plumbing
# ---------------------------------------------------------------------------

class ClipStore:
    """Decoded, resampled, length-fitted, peak-normalized clips by id.

    Clips are loaded lazily and cached; the toy corpus fits in memory with
    room to spare (512 one-second clips at 16 kHz is ~32 MB).
    """

    def __init__(
        self,
        records: list[ClipRecord],
        sample_rate: int = DEFAULT_SAMPLE_RATE,
        clip_len: int | None = None,
        preload: bool = False,
    ):
        if clip_len is None or clip_len <= 0:
            raise ValueError(f"ClipStore needs a positive clip_len, got {clip_len}")
        self.records = list(records)
        self.sample_rate = sample_rate
        self.clip_len = clip_len
        self._by_id = {rec.id: rec for rec in self.records}
        self._cache: dict[str, Waveform] = {}
        if preload:
            for rec in self.records:
                self.waveform(rec)

    def waveform(self, rec: ClipRecord | str) -> Waveform:
        clip_id = rec if isinstance(rec, str) else rec.id
        cached = self._cache.get(clip_id)
        if cached is None:
            record = self._by_id[clip_id]
            cached = prepare_clip(read_wav(record.path), self.sample_rate, self.clip_len)
            self._cache[clip_id] = cached
        return cached


class RawBatchProvider:
    """Balanced-sampled raw clips with their own labels."""

    kind = "raw"

    def __init__(self, sampler: BalancedSampler, store: ClipStore):
        self.sampler = sampler
        self.store = store
        self.batches_served = 0

    def next_batch(self, batch_size: int):
        records = self.sampler.next_batch(batch_size)
        x = np.stack([self.store.waveform(rec).samples for rec in records])[:, None, :]
        y = np.stack([rec.label for rec in records]).astype(np.float32)
        self.batches_served += 1
        return x, y, [rec.id for rec in records]


class MixedBatchProvider:
    """Convex waveform mixes of balanced-sampled pairs.

    ``label_rule`` selects the target: "union" (mix-training) or
    "interpolate" (conventional mixup, alpha-weighted labels).
    """

    def __init__(
        self,
        sampler: BalancedSampler,
        store: ClipStore,
        alpha_min: float,
        alpha_max: float,
        label_rule: str = "union",
    ):
        if label_rule not in ("union", "interpolate"):
            raise ValueError(f"unknown label rule {label_rule!r}")
        self.sampler = sampler
        self.store = store
        self.alpha_min = alpha_min
        self.alpha_max = alpha_max
        self.label_rule = label_rule
        self.kind = "mixed" if label_rule == "union" else "mixup"
        self.batches_served = 0

    def next_batch(self, batch_size: int):
        examples = make_mixed_batch(
            self.sampler, self.store.waveform, batch_size, self.alpha_min, self.alpha_max
        )
        x = np.stack([ex.waveform.samples for ex in examples])[:, None, :]
        if self.label_rule == "union":
            y = np.stack([ex.label for ex in examples]).astype(np.float32)
        else:
            by_id = {rec.id: rec for rec in self.sampler.records}
            y = np.stack([
                mixup_labels(by_id[ex.source_ids[0]].label, by_id[ex.source_ids[1]].label, ex.alpha)
                for ex in examples
            ]).astype(np.float32)
        self.batches_served += 1
        return x, y, [f"{ex.source_ids[0]}+{ex.source_ids[1]}" for ex in examples]


# ---------------------------------------------------------------------------
# loss and the inner loop
# ---------------------------------------------------------------------------

def multi_level_loss(preds, y: np.ndarray) -> Tensor:
    """Mean of the per-level BCE losses (stage-2, stage-3, stage-4 heads)."""
    levels = preds.levels()
    total = F.bce_from_probability(levels[0], y)
    for level in levels[1:]:
        total = F.add(total, F.bce_from_probability(level, y))
    return F.scale(total, 1.0 / len(levels))


def fit(
    model: WaveTagModel,
    provider,
    steps: int,
    lr: float,
    batch_size: int,
    adam: AdamState | None = None,
    loss_trace: list | None = None,
    step_offset: int = 0,
    on_step=None,
    stop_below: float | None = None,
) -> AdamState:
    """Run ``steps`` optimizer updates, appending losses to ``loss_trace``.

    ``stop_below`` ends the loop early once the loss drops under the
    threshold. Non-finite loss aborts with step/lr/batch diagnostics.
    """
    if adam is None:
        adam = AdamState.for_params(model.params)
    log_every = max(1, steps // 10)
    for local_step in range(steps):
        x, y, ids = provider.next_batch(batch_size)
        preds = model.forward(x, train=True)
        loss = multi_level_loss(preds, y)
        loss_value = float(loss.data)
        global_step = step_offset + local_step + 1
        if not np.isfinite(loss_value):
            raise TrainingDivergedError(
                f"non-finite loss {loss_value} at step {global_step} (lr {lr:g}); "
                f"batch ids: {', '.join(ids)}"
            )
        if loss_trace is not None:
            loss_trace.append(loss_value)
        model.zero_grads()
        loss.backward()
        adam_step(model.params, adam, lr)
        if local_step % log_every == 0 or local_step == steps - 1:
            log.info("step %d/%d (%s batches) loss %.4f", global_step, step_offset + steps,
                     provider.kind, loss_value)
        if on_step is not None:
            on_step(global_step, loss_value)
        if stop_below is not None and loss_value < stop_below:
            log.info("early stop at step %d: loss %.4f < %.4f", global_step, loss_value, stop_below)
            break
    return adam


# ---------------------------------------------------------------------------
# configuration and reporting
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    """Strategy, budgets, and learning rates for one training run.

    The total budget ``steps_phase1 + steps_phase2`` is spent by every
    strategy, so ablation comparisons are step-matched.
    """

    strategy: str = "mix_training"
    steps_phase1: int = 4000
    steps_phase2: int = 1000
    batch_size: int = 32
    lr_phase1: float = 3e-4
    lr_phase2: float = 3e-5
    alpha_min: float = 0.4
    alpha_max: float = 0.6
    seed: int = 0
    deterministic: bool = True
    eval_interval: int = 0
    checkpoint_interval: int = 0
    stop_below: float | None = None

    def __post_init__(self) -> None:
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}; expected one of {STRATEGIES}")
        if self.steps_phase1 < 0 or self.steps_phase2 < 0 or self.steps_phase1 + self.steps_phase2 == 0:
            raise ValueError("step budget must be positive")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.lr_phase1 <= 0 or self.lr_phase2 <= 0:
            raise ValueError("learning rates must be positive")
        if not 0.0 <= self.alpha_min < self.alpha_max <= 1.0:
            raise ValueError(f"invalid alpha bounds ({self.alpha_min}, {self.alpha_max})")
        if self.eval_interval < 0 or self.checkpoint_interval < 0:
            raise ValueError("intervals must be >= 0 (0 disables)")

    @property
    def total_steps(self) -> int:
        return self.steps_phase1 + self.steps_phase2

    def to_dict(self) -> dict:
        return {
            "strategy": self.strategy,
            "steps_phase1": self.steps_phase1,
            "steps_phase2": self.steps_phase2,
            "batch_size": self.batch_size,
            "lr_phase1": self.lr_phase1,
            "lr_phase2": self.lr_phase2,
            "alpha_min": self.alpha_min,
            "alpha_max": self.alpha_max,
            "seed": self.seed,
            "deterministic": self.deterministic,
            "eval_interval": self.eval_interval,
            "checkpoint_interval": self.checkpoint_interval,
            "stop_below": self.stop_below,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class TrainReport:
    """Everything a run produced: losses, eval points, artifacts, timing."""

    strategy: str
    seed: int
    steps_run: int
    counters: dict = field(default_factory=dict)
    loss_trace: list = field(default_factory=list)
    evals: list = field(default_factory=list)
    checkpoints: dict = field(default_factory=dict)
    wall_clock_s: float = 0.0
    final_metrics: dict | None = None

    def summary(self) -> dict:
        return {
            "strategy": self.strategy,
            "seed": self.seed,
            "steps_run": self.steps_run,
            "batch_counters": self.counters,
            "first_loss": self.loss_trace[0] if self.loss_trace else None,
            "last_loss": self.loss_trace[-1] if self.loss_trace else None,
            "loss_trace": self.loss_trace,
            "eval_points": len(self.evals),
            "checkpoints": self.checkpoints,
            "wall_clock_s": self.wall_clock_s,
            "final_metrics": self.final_metrics,
        }

    def write(self, out_dir: str | Path) -> None:
        import json

        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        with open(out_dir / "evals.jsonl", "w", encoding="utf-8") as fh:
            for record in self.evals:
                fh.write(json.dumps(record, sort_keys=True) + "\n")
        with open(out_dir / "report.json", "w", encoding="utf-8") as fh:
            json.dump(self.summary(), fh, indent=2, sort_keys=True)
            fh.write("\n")


# ---------------------------------------------------------------------------
# strategy orchestration
# ---------------------------------------------------------------------------

def _checkpoint_configs(model: WaveTagModel, cfg: TrainConfig, phase: str,
                        sample_rate: int, labels: list[str]) -> dict:
    return {
        "model": model.cfg.to_dict(),
        "train": cfg.to_dict(),
        "data": {"sample_rate": sample_rate, "labels": labels},
        "phase": phase,
    }


def _save(model: WaveTagModel, cfg: TrainConfig, phase: str, path: Path, adam: AdamState | None,
          sample_rate: int, labels: list[str]) -> Path:
    tensors = dict(model.named_tensors())
    names = list(model.params) if adam is not None else None
    configs = _checkpoint_configs(model, cfg, phase, sample_rate, labels)
    return save_checkpoint(path, configs, tensors, adam=adam, adam_names=names)


def _eval_point(model, eval_records, vocab, eval_store, batch_size, step, phase, started):
    report = evaluate_model(model, eval_records, vocab, store=eval_store, batch_size=batch_size)
    return {
        "step": step,
        "phase": phase,
        "wall_clock_s": round(time.perf_counter() - started, 3),
        "mAP": report.map,
        "AUC": report.auc,
        "d_prime": report.d_prime,
    }


def run_training(
    model: WaveTagModel,
    records: list[ClipRecord],
    vocab: LabelVocabulary,
    cfg: TrainConfig,
    out_dir: str | Path,
    eval_records: list[ClipRecord] | None = None,
    sample_rate: int = DEFAULT_SAMPLE_RATE,
    adam: AdamState | None = None,
) -> TrainReport:
    """Execute ``cfg.strategy`` end to end and write report + checkpoints.

    Phase seeds derive from ``cfg.seed`` through a SeedSequence, so the
    phase-2 stream is independent of how phase 1 consumed its stream, and
    identical seeds give bit-identical runs.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    store = ClipStore(records, sample_rate=sample_rate, clip_len=model.cfg.clip_len)
    eval_store = None
    if eval_records:
        eval_store = ClipStore(eval_records, sample_rate=sample_rate, clip_len=model.cfg.clip_len)
    seed_p1, seed_p2 = (int(s) for s in np.random.SeedSequence(cfg.seed).generate_state(2))

    report = TrainReport(strategy=cfg.strategy, seed=cfg.seed, steps_run=0)
    started = time.perf_counter()

    def tracker(phase):
        def on_step(step, loss_value):
            report.steps_run = step
            if eval_store is not None and cfg.eval_interval and step % cfg.eval_interval == 0:
                report.evals.append(
                    _eval_point(model, eval_records, vocab, eval_store, cfg.batch_size, step, phase, started)
                )
        return on_step

    if cfg.strategy == "mix_training":
        provider1 = MixedBatchProvider(
            BalancedSampler(records, vocab.size, seed=seed_p1), store, cfg.alpha_min, cfg.alpha_max, "union"
        )
        adam = fit(model, provider1, cfg.steps_phase1, cfg.lr_phase1, cfg.batch_size, adam=adam,
                   loss_trace=report.loss_trace, on_step=tracker("phase1"))
        report.checkpoints["phase1"] = str(
            _save(model, cfg, "phase1", out_dir / "phase1.ckpt", adam, sample_rate, vocab.names)
        )
        report.counters[provider1.kind] = provider1.batches_served
        # Fine-tune phase: raw clips, lower lr, and a fresh optimizer so
        # stale phase-1 moments cannot steer the fine-tune updates.
        provider2 = RawBatchProvider(BalancedSampler(records, vocab.size, seed=seed_p2), store)
        adam = fit(model, provider2, cfg.steps_phase2, cfg.lr_phase2, cfg.batch_size, adam=None,
                   loss_trace=report.loss_trace, step_offset=cfg.steps_phase1,
                   on_step=tracker("phase2"), stop_below=cfg.stop_below)
        report.counters[provider2.kind] = provider2.batches_served
    else:
        if cfg.strategy == "mix_no_finetune":
            provider = MixedBatchProvider(
                BalancedSampler(records, vocab.size, seed=seed_p1), store, cfg.alpha_min, cfg.alpha_max, "union"
            )
        elif cfg.strategy == "mixup_baseline":
            provider = MixedBatchProvider(
                BalancedSampler(records, vocab.size, seed=seed_p1), store, cfg.alpha_min, cfg.alpha_max,
                "interpolate"
            )
        else:  # "none": raw clips only
            provider = RawBatchProvider(BalancedSampler(records, vocab.size, seed=seed_p1), store)
        adam = fit(model, provider, cfg.total_steps, cfg.lr_phase1, cfg.batch_size, adam=adam,
                   loss_trace=report.loss_trace, on_step=tracker("single"), stop_below=cfg.stop_below)
        report.counters[provider.kind] = provider.batches_served

    report.checkpoints["final"] = str(
        _save(model, cfg, "final", out_dir / "final.ckpt", adam, sample_rate, vocab.names)
    )
    if eval_store is not None:
        final_point = _eval_point(model, eval_records, vocab, eval_store, cfg.batch_size,
                                  report.steps_run, "final", started)
        report.evals.append(final_point)
        report.final_metrics = {k: final_point[k] for k in ("mAP", "AUC", "d_prime")}
    report.wall_clock_s = round(time.perf_counter() - started, 3)
    report.write(out_dir)
    return report


def load_model_for_finetune(
    ckpt_path: str | Path,
    expected: ModelConfig | None = None,
    force: bool = False,
    seed: int = 0,
) -> WaveTagModel:
    """Rebuild a model from a phase-1 checkpoint, gating on config hash.

    If ``expected`` is given, its hash must match the stored model config;
    ``force`` skips the hash gate (shape checks still apply on load).
    """
    ckpt = load_checkpoint(ckpt_path)
    stored = ckpt.configs.get("model")
    if stored is None:
        raise CheckpointConfigError(f"{ckpt_path}: checkpoint stores no model config")
    if expected is not None and not force:
        want, got = config_hash(expected.to_dict()), config_hash(stored)
        if want != got:
            raise CheckpointConfigError(
                f"{ckpt_path}: model config hash {got[:12]} does not match requested {want[:12]}; "
                "pass force=True (--force) to fine-tune anyway"
            )
    cfg = ModelConfig.from_dict(stored) if expected is None or not force else expected
    model = WaveTagModel(cfg, seed=seed)
    model.load_state(ckpt.tensors)
    return model


def finetune_from_checkpoint(
    ckpt_path: str | Path,
    records: list[ClipRecord],
    vocab: LabelVocabulary,
    cfg: TrainConfig,
    out_dir: str | Path,
    eval_records: list[ClipRecord] | None = None,
    sample_rate: int = DEFAULT_SAMPLE_RATE,
    expected: ModelConfig | None = None,
    force: bool = False,
) -> TrainReport:
    """Phase 2 as a standalone entry point: load phase-1 weights, then
    fine-tune on raw clips at ``lr_phase2`` with a fresh optimizer."""
    model = load_model_for_finetune(ckpt_path, expected=expected, force=force, seed=cfg.seed)
    phase2_cfg = TrainConfig(**{**cfg.to_dict(), "strategy": "none",
                                "steps_phase1": cfg.steps_phase2, "steps_phase2": 0,
                                "lr_phase1": cfg.lr_phase2})
    return run_training(model, records, vocab, phase2_cfg, out_dir,
                        eval_records=eval_records, sample_rate=sample_rate)
