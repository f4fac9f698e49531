"""WAV codec, resampling, length fitting, and normalization checks.

The PCM16 path is cross-checked against the stdlib ``wave`` module as an
independent decoder/encoder oracle.
"""

from __future__ import annotations

import struct
import wave

import numpy as np
import pytest

from wavetag.audio_io import (
    DEFAULT_CLIP_LEN,
    Waveform,
    WavCodecError,
    WavDataError,
    WavError,
    WavHeaderError,
    decode_wav,
    encode_wav,
    fit_length,
    peak_normalize,
    prepare_clip,
    read_wav,
    resample_linear,
    write_wav,
)

from .oracles import linear_interp_at


def _pcm16_bytes(samples: list[int], rate: int = 8000, channels: int = 1) -> bytes:
    """Build a minimal PCM16 WAV with the stdlib as the encoder oracle."""
    import io

    buf = io.BytesIO()
    with wave.open(buf, "wb") as w:
        w.setnchannels(channels)
        w.setsampwidth(2)
        w.setframerate(rate)
        w.writeframes(struct.pack(f"<{len(samples)}h", *samples))
    return buf.getvalue()


class TestDecode:
    def test_pcm16_scaling_spec_example(self):
        data = _pcm16_bytes([0, 16384, -32768])
        w = decode_wav(data)
        np.testing.assert_allclose(w.samples, [0.0, 0.5, -1.0])
        assert w.sample_rate == 8000
        assert w.samples.dtype == np.float32

    def test_stereo_mean_spec_example(self):
        data = _pcm16_bytes([32767, 0], channels=2)  # one frame: L=~1.0, R=0.0
        w = decode_wav(data)
        assert len(w.samples) == 1
        assert w.samples[0] == pytest.approx((32767 / 32768) / 2, abs=1e-7)

    def test_truncated_header_is_header_error(self):
        data = _pcm16_bytes([1, 2, 3])
        with pytest.raises(WavHeaderError):
            decode_wav(data[:10])

    def test_not_riff_is_header_error(self):
        with pytest.raises(WavHeaderError):
            decode_wav(b"OGGS" + b"\x00" * 40)

    def test_unsupported_codec_is_codec_error(self):
        data = bytearray(_pcm16_bytes([1, 2]))
        fmt_at = data.find(b"fmt ")
        struct.pack_into("<H", data, fmt_at + 8, 7)  # mu-law tag
        with pytest.raises(WavCodecError):
            decode_wav(bytes(data))

    def test_zero_samples_is_data_error(self):
        data = _pcm16_bytes([])
        with pytest.raises(WavDataError):
            decode_wav(data)

    def test_error_taxonomy_is_distinct(self):
        assert issubclass(WavHeaderError, WavError)
        assert issubclass(WavCodecError, WavError)
        assert issubclass(WavDataError, WavError)
        assert not issubclass(WavCodecError, WavHeaderError)


class TestEncodeRoundTrip:
    def test_float32_round_trip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(3)
        w = Waveform(rng.uniform(-1, 1, 1000).astype(np.float32), 16_000)
        path = tmp_path / "f32.wav"
        write_wav(path, w, fmt="float32")
        back = read_wav(path)
        assert back.sample_rate == 16_000
        np.testing.assert_array_equal(back.samples, w.samples)

    def test_pcm16_round_trip_within_quantum(self, tmp_path):
        rng = np.random.default_rng(4)
        w = Waveform(rng.uniform(-0.99, 0.99, 500).astype(np.float32), 8_000)
        path = tmp_path / "p16.wav"
        write_wav(path, w, fmt="pcm16")
        back = read_wav(path)
        np.testing.assert_allclose(back.samples, w.samples, atol=1.0 / 32768 + 1e-7)

    def test_pcm16_output_readable_by_stdlib(self, tmp_path):
        w = Waveform(np.array([0.0, 0.5, -1.0, 0.25], dtype=np.float32), 8_000)
        path = tmp_path / "check.wav"
        write_wav(path, w, fmt="pcm16")
        with wave.open(str(path), "rb") as fh:
            assert fh.getnchannels() == 1
            assert fh.getsampwidth() == 2
            assert fh.getframerate() == 8_000
            raw = fh.readframes(fh.getnframes())
        vals = np.frombuffer(raw, dtype="<i2").astype(np.float32) / 32768.0
        np.testing.assert_allclose(vals, w.samples, atol=1.0 / 32768)

    def test_stdlib_file_readable_by_us(self, tmp_path):
        path = tmp_path / "oracle.wav"
        path.write_bytes(_pcm16_bytes([100, -200, 300], rate=22_050))
        w = read_wav(path)
        assert w.sample_rate == 22_050
        np.testing.assert_allclose(w.samples, np.array([100, -200, 300]) / 32768.0, atol=1e-7)


class TestResample:
    def test_identity_is_copy(self):
        w = Waveform(np.array([0.1, 0.2], dtype=np.float32), 16_000)
        out = resample_linear(w, 16_000)
        np.testing.assert_array_equal(out.samples, w.samples)
        assert out.samples is not w.samples  # caller may mutate safely

    def test_spec_example_2hz_to_4hz(self):
        w = Waveform(np.array([0.0, 1.0], dtype=np.float32), 2)
        out = resample_linear(w, 4)
        # documented rule: n_out = round(n_in * target/source), edge hold
        np.testing.assert_allclose(out.samples, [0.0, 0.5, 1.0, 1.0])

    def test_duration_preserved_downsample(self):
        w = Waveform(np.zeros(160_000, dtype=np.float32), 32_000)
        out = resample_linear(w, 16_000)
        assert abs(len(out.samples) - 80_000) <= 1

    def test_matches_pointwise_interpolation_oracle(self, rng):
        samples = rng.standard_normal(50).astype(np.float32)
        w = Waveform(samples, 1000)
        out = resample_linear(w, 700)
        for i in range(len(out.samples)):
            want = linear_interp_at(samples.astype(np.float64), i * 1000 / 700)
            assert out.samples[i] == pytest.approx(want, abs=1e-6)

    def test_bad_rate_raises(self):
        with pytest.raises(ValueError):
            resample_linear(Waveform(np.zeros(4, np.float32), 8000), 0)


class TestFitLength:
    def test_truncates(self):
        w = Waveform(np.arange(DEFAULT_CLIP_LEN + 1, dtype=np.float32), 16_000)
        out = fit_length(w)
        assert len(out.samples) == DEFAULT_CLIP_LEN
        assert out.samples[-1] == DEFAULT_CLIP_LEN - 1

    def test_pads_with_trailing_zeros(self):
        w = Waveform(np.ones(100, dtype=np.float32), 16_000)
        out = fit_length(w, DEFAULT_CLIP_LEN)
        assert len(out.samples) == DEFAULT_CLIP_LEN
        assert np.all(out.samples[:100] == 1.0)
        assert np.all(out.samples[100:] == 0.0)

    def test_exact_length_identity(self):
        w = Waveform(np.arange(64, dtype=np.float32), 16_000)
        np.testing.assert_array_equal(fit_length(w, 64).samples, w.samples)


class TestPeakNormalize:
    def test_spec_example(self):
        w = Waveform(np.array([0.5, -0.25], dtype=np.float32), 8_000)
        np.testing.assert_allclose(peak_normalize(w).samples, [1.0, -0.5])

    def test_all_zero_unchanged(self):
        w = Waveform(np.zeros(8, dtype=np.float32), 8_000)
        np.testing.assert_array_equal(peak_normalize(w).samples, w.samples)

    def test_out_of_range_brought_back(self):
        w = Waveform(np.array([2.0], dtype=np.float32), 8_000)
        np.testing.assert_allclose(peak_normalize(w).samples, [1.0])

    def test_idempotent(self, rng):
        w = Waveform(rng.uniform(-3, 3, 64).astype(np.float32), 8_000)
        once = peak_normalize(w)
        twice = peak_normalize(once)
        np.testing.assert_array_equal(once.samples, twice.samples)


class TestPrepareClip:
    def test_pipeline_shape_and_peak(self, rng):
        w = Waveform(rng.uniform(-0.2, 0.2, 12_345).astype(np.float32), 22_050)
        out = prepare_clip(w, 16_000, 16_000)
        assert out.sample_rate == 16_000
        assert len(out.samples) == 16_000
        assert np.max(np.abs(out.samples)) == pytest.approx(1.0, abs=1e-6)

    def test_waveform_coerces_to_float32_1d(self):
        w = Waveform(np.array([[1, 2], [3, 4]], dtype=np.int32).reshape(-1), 8_000)
        assert w.samples.dtype == np.float32
        with pytest.raises(ValueError):
            Waveform(np.zeros(4, np.float32), 0)
