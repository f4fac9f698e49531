"""Raw audio plumbing: WAV decode/encode, resampling, length fitting.

Every training example ends up as a fixed-length mono float32 waveform in
[-1, 1]. The WAV codec is self-contained (RIFF little-endian, PCM16 and
IEEE float32, mono or stereo) because the stdlib ``wave`` module cannot
read float WAVs. Resampling is linear interpolation — good enough for
synthetic desk-scale data, not a band-limited resampler.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

DEFAULT_SAMPLE_RATE = 16_000
DEFAULT_CLIP_LEN = 160_000  # 10 s at 16 kHz
PEAK_FLOOR = 1e-8


class WavError(ValueError):
    """Base class for WAV decode failures."""


class WavHeaderError(WavError):
    """Malformed or truncated RIFF/WAVE container."""


class WavCodecError(WavError):
    """Structurally valid file in a format we do not decode."""


class WavDataError(WavError):
    """Data chunk present but holds zero samples."""


@dataclass
class Waveform:
    """Mono sample sequence with a sample rate.

    Samples are float32 with nominal range [-1, 1]; decoding int16 divides
    by 32768 so full-scale negative maps to exactly -1.0.
    """

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        if self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        arr = np.asarray(self.samples, dtype=np.float32)
        if arr.ndim != 1:
            raise ValueError(f"samples must be 1-D, got shape {arr.shape}")
        self.samples = arr

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


# ---------------------------------------------------------------------------
# WAV container
# ---------------------------------------------------------------------------

_FMT_PCM = 1
_FMT_IEEE_FLOAT = 3


def decode_wav(data: bytes) -> Waveform:
    """Decode a RIFF/WAVE byte string to a mono waveform.

    Stereo is averaged per frame. PCM16 is scaled by 1/32768; float32 is
    taken as-is.
    """
    if len(data) < 12 or data[:4] != b"RIFF" or data[8:12] != b"WAVE":
        raise WavHeaderError("not a RIFF/WAVE container")

    fmt = None
    payload = None
    pos = 12
    while pos + 8 <= len(data):
        chunk_id = data[pos : pos + 4]
        (chunk_size,) = struct.unpack_from("<I", data, pos + 4)
        body = data[pos + 8 : pos + 8 + chunk_size]
        if len(body) < chunk_size:
            raise WavHeaderError(f"chunk {chunk_id!r} truncated")
        if chunk_id == b"fmt ":
            if chunk_size < 16:
                raise WavHeaderError("fmt chunk too short")
            fmt = struct.unpack_from("<HHIIHH", body, 0)
        elif chunk_id == b"data":
            payload = body
        pos += 8 + chunk_size + (chunk_size & 1)  # chunks are word-aligned

    if fmt is None or payload is None:
        raise WavHeaderError("missing fmt or data chunk")

    audio_format, channels, sample_rate, _, _, bits = fmt
    if channels not in (1, 2):
        raise WavCodecError(f"unsupported channel count {channels}")
    if audio_format == _FMT_PCM and bits == 16:
        raw = np.frombuffer(payload[: len(payload) - len(payload) % (2 * channels)], dtype="<i2")
        samples = raw.astype(np.float32) / 32768.0
    elif audio_format == _FMT_IEEE_FLOAT and bits == 32:
        raw = np.frombuffer(payload[: len(payload) - len(payload) % (4 * channels)], dtype="<f4")
        samples = raw.astype(np.float32)
    else:
        raise WavCodecError(f"unsupported codec: format {audio_format}, {bits}-bit")

    if samples.size == 0:
        raise WavDataError("data chunk holds zero samples")
    if channels == 2:
        samples = samples.reshape(-1, 2).mean(axis=1)
    return Waveform(samples, sample_rate)


def encode_wav(w: Waveform, fmt: str = "float32") -> bytes:
    """Encode a mono waveform as WAV bytes (``float32`` or ``pcm16``).

    float32 encoding round-trips through :func:`decode_wav` bit-exactly.
    """
    if fmt == "float32":
        payload = np.asarray(w.samples, dtype="<f4").tobytes()
        audio_format, bits = _FMT_IEEE_FLOAT, 32
    elif fmt == "pcm16":
        clipped = np.clip(np.asarray(w.samples, dtype=np.float64), -1.0, 32767.0 / 32768.0)
        payload = (np.round(clipped * 32768.0).astype("<i2")).tobytes()
        audio_format, bits = _FMT_PCM, 16
    else:
        raise ValueError(f"unknown WAV format {fmt!r} (use 'float32' or 'pcm16')")

    block_align = bits // 8
    header = struct.pack(
        "<4sI4s4sIHHIIHH4sI",
        b"RIFF",
        36 + len(payload),
        b"WAVE",
        b"fmt ",
        16,
        audio_format,
        1,
        w.sample_rate,
        w.sample_rate * block_align,
        block_align,
        bits,
        b"data",
        len(payload),
    )
    return header + payload


def read_wav(path: str | Path) -> Waveform:
    return decode_wav(Path(path).read_bytes())


def write_wav(path: str | Path, w: Waveform, fmt: str = "float32") -> None:
    Path(path).write_bytes(encode_wav(w, fmt=fmt))


# ---------------------------------------------------------------------------
# shaping
# ---------------------------------------------------------------------------

def resample_linear(w: Waveform, target_rate: int) -> Waveform:
    """Linearly resample to ``target_rate``.

    Length rule: ``n_out = max(1, round(n_in * target / source))``; output
    sample i reads input position ``i * source / target``, holding the edge
    value beyond the last input sample. At the identity rate the samples
    are returned bit-exactly.
    """
    if target_rate <= 0:
        raise ValueError(f"target_rate must be positive, got {target_rate}")
    if target_rate == w.sample_rate:
        return Waveform(w.samples.copy(), w.sample_rate)
    n_in = len(w.samples)
    if n_in == 0:
        return Waveform(np.zeros(0, dtype=np.float32), target_rate)
    n_out = max(1, round(n_in * target_rate / w.sample_rate))
    positions = np.arange(n_out, dtype=np.float64) * (w.sample_rate / target_rate)
    resampled = np.interp(positions, np.arange(n_in, dtype=np.float64), w.samples.astype(np.float64))
    return Waveform(resampled.astype(np.float32), target_rate)


def fit_length(w: Waveform, clip_len: int = DEFAULT_CLIP_LEN) -> Waveform:
    """Truncate to the first ``clip_len`` samples or zero-pad at the end."""
    if clip_len <= 0:
        raise ValueError(f"clip_len must be positive, got {clip_len}")
    n = len(w.samples)
    if n == clip_len:
        return Waveform(w.samples.copy(), w.sample_rate)
    if n > clip_len:
        return Waveform(w.samples[:clip_len].copy(), w.sample_rate)
    out = np.zeros(clip_len, dtype=np.float32)
    out[:n] = w.samples
    return Waveform(out, w.sample_rate)


def peak_normalize(w: Waveform) -> Waveform:
    """Scale so the peak magnitude is 1. All-(near-)zero input is returned
    unchanged; the op is idempotent."""
    peak = float(np.max(np.abs(w.samples))) if len(w.samples) else 0.0
    if peak <= PEAK_FLOOR:
        return Waveform(w.samples.copy(), w.sample_rate)
    return Waveform(w.samples / np.float32(peak), w.sample_rate)


def prepare_clip(
    w: Waveform,
    sample_rate: int = DEFAULT_SAMPLE_RATE,
    clip_len: int = DEFAULT_CLIP_LEN,
) -> Waveform:
    """Standard input pipeline: resample, fit length, peak-normalize."""
    return peak_normalize(fit_length(resample_linear(w, sample_rate), clip_len))
