"""Label vocabulary, clip manifests, balanced sampling, and waveform mixing.

The mixing pair of operations implements the union-label convention: the
mixture is the convex combination ``alpha * x_i + (1 - alpha) * x_j`` and
its label keeps every class present in either source (elementwise
``min(y_i + y_j, 1)``, i.e. sign on nonnegative multi-hot sums). The
balanced sampler walks classes round-robin over a reshuffled class cycle
so every class anchors equally often in a batch stream.

A synthetic tone-burst generator stands in for a real tagging corpus at
desk scale; it is fully deterministic by seed.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .audio_io import Waveform, write_wav

logger = logging.getLogger(__name__)

VOCAB_FILENAME = "labels.txt"
MANIFEST_FILENAME = "manifest.jsonl"

TOY_BASE_FREQ_HZ = 220.0
TOY_NOISE_DB = -30.0
TOY_EVENT_MIN_S = 0.5
TOY_EVENT_MAX_S = 2.0
TOY_MAX_EVENTS = 3


class ManifestError(ValueError):
    """A manifest record violates the on-disk contract."""


class LabelVocabulary:
    """Ordered class-name list; index order is the on-disk file order."""

    def __init__(self, names: list[str]):
        if not names:
            raise ValueError("vocabulary must not be empty")
        if len(set(names)) != len(names):
            raise ValueError("vocabulary names must be unique")
        if any(not n for n in names):
            raise ValueError("vocabulary names must be non-empty")
        self.names = list(names)
        self._index = {name: i for i, name in enumerate(names)}

    def __len__(self) -> int:
        return len(self.names)

    @property
    def size(self) -> int:
        return len(self.names)

    def index_of(self, name: str) -> int:
        try:
            return self._index[name]
        except KeyError:
            raise KeyError(f"unknown label {name!r}") from None

    def encode(self, labels: list[str]) -> np.ndarray:
        """Label names -> multi-hot float32 vector."""
        bits = np.zeros(len(self.names), dtype=np.float32)
        for name in labels:
            bits[self.index_of(name)] = 1.0
        return bits

    def decode(self, bits: np.ndarray) -> list[str]:
        return [self.names[i] for i in np.flatnonzero(bits)]

    @classmethod
    def load(cls, path: str | Path) -> "LabelVocabulary":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls([ln.strip() for ln in lines if ln.strip()])

    def save(self, path: str | Path) -> None:
        Path(path).write_text("".join(f"{n}\n" for n in self.names), encoding="utf-8")


@dataclass
class ClipRecord:
    id: str
    path: Path
    label: np.ndarray  # multi-hot over the vocabulary


@dataclass
class MixedExample:
    waveform: Waveform
    label: np.ndarray
    alpha: float
    source_ids: tuple[str, str]


# ---------------------------------------------------------------------------
# manifests
# ---------------------------------------------------------------------------

def load_manifest(
    path: str | Path,
    vocab: LabelVocabulary,
    strict: bool = False,
) -> list[ClipRecord]:
    """Read a JSON Lines manifest ({"id", "path", "labels"} per line).

    Paths are resolved relative to the manifest directory. With ``strict``
    every referenced file must exist at load time.
    """
    path = Path(path)
    base = path.parent
    records: list[ClipRecord] = []
    seen: set[str] = set()
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as e:
            raise ManifestError(f"{path}:{lineno}: invalid JSON ({e})") from None
        for key in ("id", "path", "labels"):
            if key not in obj:
                raise ManifestError(f"{path}:{lineno}: missing key {key!r}")
        clip_id = str(obj["id"])
        if clip_id in seen:
            raise ManifestError(f"duplicate clip id {clip_id!r}")
        seen.add(clip_id)
        labels = obj["labels"]
        if not labels:
            raise ManifestError(f"clip {clip_id!r} has an empty label list")
        try:
            bits = vocab.encode(labels)
        except KeyError as e:
            raise ManifestError(f"clip {clip_id!r}: {e.args[0]}") from None
        clip_path = base / obj["path"]
        if strict and not clip_path.exists():
            raise ManifestError(f"clip {clip_id!r}: file not found: {clip_path}")
        records.append(ClipRecord(id=clip_id, path=clip_path, label=bits))
    return records


def write_manifest(path: str | Path, records: list[ClipRecord], vocab: LabelVocabulary) -> None:
    path = Path(path)
    base = path.parent
    with path.open("w", encoding="utf-8") as f:
        for rec in records:
            rec_path = Path(rec.path)
            try:
                rel = rec_path.relative_to(base)
            except ValueError:  # outside the manifest dir: keep it absolute
                rel = rec_path
            obj = {"id": rec.id, "path": str(rel), "labels": vocab.decode(rec.label)}
            f.write(json.dumps(obj) + "\n")


# ---------------------------------------------------------------------------
# mixing (union labels)
# ---------------------------------------------------------------------------

def mix_waveforms(x_i: Waveform, x_j: Waveform, alpha: float) -> Waveform:
    """Convex combination ``alpha * x_i + (1 - alpha) * x_j``.

    No re-normalization afterwards: the mixture keeps the convexity bound
    |mix[t]| <= max(|x_i[t]|, |x_j[t]|).
    """
    if len(x_i.samples) != len(x_j.samples):
        raise ValueError(f"length mismatch: {len(x_i.samples)} vs {len(x_j.samples)}")
    if x_i.sample_rate != x_j.sample_rate:
        raise ValueError(f"sample rate mismatch: {x_i.sample_rate} vs {x_j.sample_rate}")
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must lie in (0,1), got {alpha}")
    a = np.float32(alpha)
    mixed = a * x_i.samples + (np.float32(1.0) - a) * x_j.samples
    return Waveform(mixed, x_i.sample_rate)


def mix_labels(y_i: np.ndarray, y_j: np.ndarray) -> np.ndarray:
    """Union of two multi-hot labels: elementwise sign of the sum.

    Inputs are nonnegative 0/1 vectors, so sign reduces to min(sum, 1).
    """
    y_i = np.asarray(y_i)
    y_j = np.asarray(y_j)
    if y_i.shape != y_j.shape:
        raise ValueError(f"label length mismatch: {y_i.shape} vs {y_j.shape}")
    return np.minimum(y_i + y_j, 1).astype(y_i.dtype)


def mixup_labels(y_i: np.ndarray, y_j: np.ndarray, alpha: float) -> np.ndarray:
    """Ratio label ``alpha * y_i + (1 - alpha) * y_j`` (mixup baseline arm)."""
    y_i = np.asarray(y_i, dtype=np.float32)
    y_j = np.asarray(y_j, dtype=np.float32)
    if y_i.shape != y_j.shape:
        raise ValueError(f"label length mismatch: {y_i.shape} vs {y_j.shape}")
    return alpha * y_i + (1.0 - alpha) * y_j


# ---------------------------------------------------------------------------
# balanced sampling
# ---------------------------------------------------------------------------

class BalancedSampler:
    """Round-robin class anchoring with uniform clip draws per anchor.

    A full pass over the (reshuffled) class cycle makes every included
    class anchor exactly once; the cycle position carries across batches.
    Classes with no clips are excluded with a warning. Fully deterministic
    given (seed, call sequence).
    """

    def __init__(self, records: list[ClipRecord], n_classes: int, seed: int = 0):
        if not records:
            raise ValueError("cannot sample from an empty dataset")
        self.records = records
        self._by_class: dict[int, list[int]] = {c: [] for c in range(n_classes)}
        for idx, rec in enumerate(records):
            for c in np.flatnonzero(rec.label):
                self._by_class[int(c)].append(idx)
        self.included = [c for c in range(n_classes) if self._by_class[c]]
        excluded = sorted(set(range(n_classes)) - set(self.included))
        if excluded:
            logger.warning("excluding %d class(es) with no clips: %s", len(excluded), excluded)
        if not self.included:
            raise ValueError("no class has any clip")
        self._rng = np.random.Generator(np.random.PCG64(seed))
        self._cycle: list[int] = []
        self._pos = 0

    def next_record(self) -> ClipRecord:
        if self._pos >= len(self._cycle):
            self._cycle = list(self.included)
            self._rng.shuffle(self._cycle)
            self._pos = 0
        anchor = self._cycle[self._pos]
        self._pos += 1
        pool = self._by_class[anchor]
        return self.records[pool[int(self._rng.integers(len(pool)))]]

    def next_batch(self, batch_size: int) -> list[ClipRecord]:
        return [self.next_record() for _ in range(batch_size)]

    def uniform(self, low: float, high: float) -> float:
        """Draw from the sampler's stream; keeps mixing alphas on one seed."""
        return float(self._rng.uniform(low, high))


def make_mixed_batch(
    sampler: BalancedSampler,
    waveform_of,
    batch_size: int,
    alpha_min: float = 0.4,
    alpha_max: float = 0.6,
) -> list[MixedExample]:
    """Mix ``batch_size`` balanced-sampled clip pairs with distinct ids.

    ``waveform_of`` maps a ClipRecord to its prepared Waveform. Both draws
    of a pair come from the balanced sampler; a colliding second draw is
    resampled. Alpha is uniform per example in (alpha_min, alpha_max).
    """
    if not 0.0 <= alpha_min < alpha_max <= 1.0:
        raise ValueError(f"invalid alpha bounds ({alpha_min}, {alpha_max})")
    distinct = {rec.id for rec in sampler.records}
    if len(distinct) < 2:
        raise ValueError("mixing needs at least two distinct clips")
    out: list[MixedExample] = []
    for _ in range(batch_size):
        rec_i = sampler.next_record()
        rec_j = sampler.next_record()
        while rec_j.id == rec_i.id:
            rec_j = sampler.next_record()
        alpha = sampler.uniform(alpha_min, alpha_max)
        mixed = mix_waveforms(waveform_of(rec_i), waveform_of(rec_j), alpha)
        label = mix_labels(rec_i.label, rec_j.label)
        out.append(MixedExample(mixed, label, alpha, (rec_i.id, rec_j.id)))
    return out


# ---------------------------------------------------------------------------
# synthetic toy dataset
# ---------------------------------------------------------------------------

def toy_class_freq(c: int) -> float:
    """Half-octave spacing keeps classes separable by a small network."""
    return TOY_BASE_FREQ_HZ * 2.0 ** (c / 2.0)


def toy_class_names(n_classes: int) -> list[str]:
    return [f"tone{c:02d}_{round(toy_class_freq(c))}hz" for c in range(n_classes)]


def make_toy_dataset(
    out_dir: str | Path,
    n_classes: int = 8,
    n_clips: int = 512,
    clip_seconds: float = 1.0,
    sample_rate: int = 16_000,
    seed: int = 0,
) -> Path:
    """Generate WAV clips of 1-3 overlapping tone bursts plus noise.

    Class c is a sine at ``220 * 2**(c/2)`` Hz. Each event is a Hann-
    enveloped burst of 0.5-2 s at a random offset (truncated to the clip);
    Gaussian noise sits 30 dB below the clip peak. Byte-identical output
    for a given seed. Returns the manifest path.
    """
    if n_classes < 2:
        raise ValueError("need at least 2 classes (mixing requires distinguishable sources)")
    if n_clips < 1:
        raise ValueError("need at least 1 clip")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    wav_dir = out_dir / "wav"
    wav_dir.mkdir(exist_ok=True)

    vocab = LabelVocabulary(toy_class_names(n_classes))
    vocab.save(out_dir / VOCAB_FILENAME)

    rng = np.random.Generator(np.random.PCG64(seed))
    n_samples = int(round(clip_seconds * sample_rate))
    t = np.arange(n_samples, dtype=np.float64) / sample_rate
    records: list[ClipRecord] = []
    for i in range(n_clips):
        n_events = int(rng.integers(1, TOY_MAX_EVENTS + 1))
        classes = rng.choice(n_classes, size=n_events, replace=False)
        clip = np.zeros(n_samples, dtype=np.float64)
        for c in classes:
            dur = float(rng.uniform(TOY_EVENT_MIN_S, TOY_EVENT_MAX_S))
            if dur >= clip_seconds:
                start, dur = 0.0, clip_seconds
            else:
                start = float(rng.uniform(0.0, clip_seconds - dur))
            amp = float(rng.uniform(0.3, 1.0))
            phase = float(rng.uniform(0.0, 2.0 * math.pi))
            i0 = int(round(start * sample_rate))
            i1 = min(n_samples, i0 + int(round(dur * sample_rate)))
            seg = t[i0:i1]
            envelope = np.hanning(i1 - i0)
            clip[i0:i1] += amp * envelope * np.sin(2.0 * math.pi * toy_class_freq(int(c)) * seg + phase)
        peak = np.max(np.abs(clip))
        noise_amp = peak * 10.0 ** (TOY_NOISE_DB / 20.0)
        clip += rng.normal(0.0, noise_amp, size=n_samples)
        clip /= np.max(np.abs(clip))

        clip_id = f"clip{i:05d}"
        wav_path = wav_dir / f"{clip_id}.wav"
        write_wav(wav_path, Waveform(clip.astype(np.float32), sample_rate), fmt="float32")
        label = np.zeros(n_classes, dtype=np.float32)
        label[classes] = 1.0
        records.append(ClipRecord(id=clip_id, path=wav_path, label=label))

    manifest_path = out_dir / MANIFEST_FILENAME
    write_manifest(manifest_path, records, vocab)
    return manifest_path
