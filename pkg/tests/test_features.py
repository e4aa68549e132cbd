import wave

import numpy as np
import pytest
from hypothesis import given, strategies as st

from jointdiar.features import (
    AudioBuffer,
    AudioFormatError,
    EmptyInputError,
    MelConfig,
    compute_log_mel,
    hz_to_mel,
    mel_to_hz,
    num_frames,
    read_wav,
    write_wav,
)


def _write_raw(path, data: bytes, channels=1, width=2, rate=16000):
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(channels)
        fh.setsampwidth(width)
        fh.setframerate(rate)
        fh.writeframes(data)


def test_one_second_file_has_16000_samples(tmp_path):
    path = tmp_path / "a.wav"
    _write_raw(path, np.zeros(16000, "<i2").tobytes())
    assert len(read_wav(path).samples) == 16000


def test_max_pcm_value_scaling(tmp_path):
    path = tmp_path / "a.wav"
    _write_raw(path, np.array([32767, -32768, 0], "<i2").tobytes())
    s = read_wav(path).samples
    assert s[0] == 32767 / 32768
    assert s[1] == -1.0


@pytest.mark.parametrize(
    "kwargs,message",
    [
        (dict(channels=2), "channels=2"),
        (dict(width=1), "sample_width_bits=8"),
        (dict(rate=8000), "sample_rate=8000"),
    ],
)
def test_format_errors_name_property(tmp_path, kwargs, message):
    path = tmp_path / "bad.wav"
    _write_raw(path, b"\x00" * 3200, **kwargs)
    with pytest.raises(AudioFormatError, match=message):
        read_wav(path)


def test_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        read_wav(tmp_path / "nope.wav")


def test_audio_buffer_rejects_nonfinite_and_rate():
    with pytest.raises(ValueError):
        AudioBuffer(np.array([0.0, np.nan]))
    with pytest.raises(AudioFormatError):
        AudioBuffer(np.zeros(10), sample_rate=8000)


def test_wav_round_trip(tmp_path, rng):
    x = np.round(rng.uniform(-1, 1, 1000) * 32767) / 32768
    write_wav(tmp_path / "x.wav", AudioBuffer(x))
    np.testing.assert_array_equal(read_wav(tmp_path / "x.wav").samples, x)


def test_frame_count_one_second():
    feats = compute_log_mel(AudioBuffer(np.zeros(16000)))
    assert feats.values.shape == (98, 64)


@given(st.integers(min_value=400, max_value=5000))
def test_frame_count_formula(n):
    assert num_frames(n, MelConfig()) == (n - 400) // 160 + 1


def test_silence_hits_floor():
    feats = compute_log_mel(AudioBuffer(np.zeros(4000)))
    assert np.all(feats.values == np.log(1e-10))


def test_too_short_raises():
    with pytest.raises(EmptyInputError):
        compute_log_mel(AudioBuffer(np.zeros(399)))


def test_values_respect_floor_and_are_finite(rng):
    feats = compute_log_mel(AudioBuffer(rng.uniform(-1, 1, 8000)))
    assert np.all(np.isfinite(feats.values))
    assert feats.values.min() >= np.log(1e-10)


def _direct_dft_mel(frame, cfg):
    """Independent oracle: explicit DFT sums and per-filter triangle weights."""
    n = cfg.length_samples
    t = np.arange(n)
    window = 0.5 - 0.5 * np.cos(2 * np.pi * t / n)
    x = frame * window
    nfft = cfg.n_fft
    lo, hi = 2595 * np.log10(1 + cfg.fmin_hz / 700), 2595 * np.log10(1 + cfg.fmax_hz / 700)
    mel_pts = [lo + (hi - lo) * i / (cfg.num_mels + 1) for i in range(cfg.num_mels + 2)]
    hz_pts = [700 * (10 ** (m / 2595) - 1) for m in mel_pts]
    energies = np.zeros(cfg.num_mels)
    for k in range(nfft // 2 + 1):
        re = np.sum(x * np.cos(2 * np.pi * k * t / nfft))
        im = -np.sum(x * np.sin(2 * np.pi * k * t / nfft))
        power = re * re + im * im
        f = k * 16000 / nfft
        for m in range(cfg.num_mels):
            a, c, b = hz_pts[m], hz_pts[m + 1], hz_pts[m + 2]
            if a < f < b:
                w = (f - a) / (c - a) if f <= c else (b - f) / (b - c)
                energies[m] += w * power
    return energies


def test_sine_argmax_matches_direct_dft_oracle():
    cfg = MelConfig()
    t = np.arange(3200) / 16000
    x = 0.5 * np.sin(2 * np.pi * 1000 * t)
    feats = compute_log_mel(AudioBuffer(x), cfg)
    for i in (0, 5, 12):
        frame = x[i * 160 : i * 160 + 400]
        oracle = _direct_dft_mel(frame, cfg)
        assert np.argmax(feats.values[i]) == np.argmax(oracle)
        np.testing.assert_allclose(feats.values[i], np.log(np.maximum(oracle, 1e-10)), rtol=1e-8, atol=1e-8)


def test_mel_scale_round_trip():
    hz = np.array([20.0, 440.0, 7600.0])
    np.testing.assert_allclose(mel_to_hz(hz_to_mel(hz)), hz)


def test_feature_timing_metadata():
    feats = compute_log_mel(AudioBuffer(np.zeros(16000)))
    assert feats.origin_offset_ms == 12.5
    assert feats.audio_start_ms == 0.0
    part = feats.slice(8, 16)
    assert part.audio_start_ms == 80.0


@pytest.mark.parametrize("kwargs", [dict(num_mels=0), dict(fmin_hz=8000, fmax_hz=7000), dict(frame_shift_ms=30)])
def test_mel_config_invariants(kwargs):
    with pytest.raises(ValueError):
        MelConfig(**kwargs)
