"""PCM audio I/O and log-Mel filterbank features."""

from __future__ import annotations

import os
import tempfile
import wave
from dataclasses import dataclass

import numpy as np

SAMPLE_RATE = 16000


class AudioFormatError(ValueError):
    pass


class EmptyInputError(ValueError):
    pass


@dataclass(frozen=True)
class AudioBuffer:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise ValueError("audio must be mono (1-D samples)")
        if self.sample_rate != SAMPLE_RATE:
            raise AudioFormatError(f"sample_rate={self.sample_rate}")
        if not np.all(np.isfinite(samples)):
            raise ValueError("audio contains non-finite samples")
        samples.setflags(write=False)
        object.__setattr__(self, "samples", samples)

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass(frozen=True)
class MelConfig:
    num_mels: int = 64
    frame_shift_ms: float = 10.0
    frame_length_ms: float = 25.0
    fmin_hz: float = 20.0
    fmax_hz: float = 7600.0
    log_floor: float = 1e-10

    def __post_init__(self):
        if self.num_mels < 1:
            raise ValueError("num_mels must be >= 1")
        if not 0 < self.fmin_hz < self.fmax_hz <= SAMPLE_RATE / 2:
            raise ValueError("need 0 < fmin < fmax <= sample_rate/2")
        if self.frame_shift_ms > self.frame_length_ms:
            raise ValueError("frame_shift must not exceed frame_length")
        if self.log_floor <= 0:
            raise ValueError("log_floor must be positive")

    @property
    def shift_samples(self) -> int:
        return int(round(self.frame_shift_ms * SAMPLE_RATE / 1000))

    @property
    def length_samples(self) -> int:
        return int(round(self.frame_length_ms * SAMPLE_RATE / 1000))

    @property
    def n_fft(self) -> int:
        return 1 << (self.length_samples - 1).bit_length()


@dataclass(frozen=True)
class FeatureMatrix:
    """T x num_mels log filterbank energies; frame ``i`` is centred at
    ``origin_offset_ms + i * frame_shift_ms``."""

    values: np.ndarray
    frame_shift_ms: float = 10.0
    origin_offset_ms: float = 12.5
    frame_length_ms: float = 25.0

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 2:
            raise ValueError("feature values must be T x D")
        object.__setattr__(self, "values", values)

    @property
    def num_frames(self) -> int:
        return self.values.shape[0]

    def slice(self, start: int, stop: int) -> "FeatureMatrix":
        return FeatureMatrix(
            self.values[start:stop],
            self.frame_shift_ms,
            self.origin_offset_ms + start * self.frame_shift_ms,
            self.frame_length_ms,
        )

    @property
    def audio_start_ms(self) -> float:
        """Time at which the window of frame 0 begins."""
        return self.origin_offset_ms - self.frame_length_ms / 2.0


def read_wav(path) -> AudioBuffer:
    """Read a 16 kHz, 16-bit, mono PCM RIFF/WAVE file."""
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    try:
        with wave.open(os.fspath(path), "rb") as fh:
            channels = fh.getnchannels()
            width = fh.getsampwidth()
            rate = fh.getframerate()
            if fh.getcomptype() != "NONE":
                raise AudioFormatError(f"compression={fh.getcomptype()}")
            if channels != 1:
                raise AudioFormatError(f"channels={channels}")
            if width != 2:
                raise AudioFormatError(f"sample_width_bits={8 * width}")
            if rate != SAMPLE_RATE:
                raise AudioFormatError(f"sample_rate={rate}")
            raw = fh.readframes(fh.getnframes())
    except wave.Error as exc:
        # the stdlib reader rejects anything that is not plain PCM
        raise AudioFormatError(f"format={exc}") from exc
    pcm = np.frombuffer(raw, dtype="<i2")
    return AudioBuffer(pcm.astype(np.float64) / 32768.0)


def to_pcm16(samples: np.ndarray) -> np.ndarray:
    scaled = np.round(np.clip(samples, -1.0, 1.0) * 32768.0)
    return np.clip(scaled, -32768, 32767).astype("<i2")


def write_wav(path, audio: AudioBuffer) -> None:
    """Write ``audio`` as 16-bit PCM; the file appears atomically."""
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".wav.tmp")
    os.close(fd)
    try:
        with wave.open(tmp, "wb") as fh:
            fh.setnchannels(1)
            fh.setsampwidth(2)
            fh.setframerate(SAMPLE_RATE)
            fh.writeframes(to_pcm16(audio.samples).tobytes())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def num_frames(num_samples: int, cfg: MelConfig) -> int:
    if num_samples < cfg.length_samples:
        return 0
    return (num_samples - cfg.length_samples) // cfg.shift_samples + 1


def hz_to_mel(hz):
    return 2595.0 * np.log10(1.0 + np.asarray(hz, dtype=np.float64) / 700.0)


def mel_to_hz(mel):
    return 700.0 * (10.0 ** (np.asarray(mel, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(cfg: MelConfig) -> np.ndarray:
    """Triangular filters on the HTK mel scale, shape (num_mels, n_fft//2+1)."""
    n_bins = cfg.n_fft // 2 + 1
    bin_hz = np.arange(n_bins) * SAMPLE_RATE / cfg.n_fft
    edges = mel_to_hz(np.linspace(hz_to_mel(cfg.fmin_hz), hz_to_mel(cfg.fmax_hz), cfg.num_mels + 2))
    lower, centre, upper = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (bin_hz - lower) / (centre - lower)
    falling = (upper - bin_hz) / (upper - centre)
    return np.maximum(0.0, np.minimum(rising, falling))


def frame_signal(samples: np.ndarray, cfg: MelConfig) -> np.ndarray:
    n = num_frames(len(samples), cfg)
    idx = np.arange(cfg.length_samples)[None, :] + cfg.shift_samples * np.arange(n)[:, None]
    return samples[idx]


_CHUNK_FRAMES = 8192


def compute_log_mel(audio: AudioBuffer, cfg: MelConfig = MelConfig()) -> FeatureMatrix:
    """Hann-windowed power spectrum -> mel filterbank -> floored natural log.

    No dither, pre-emphasis or normalisation, so the output is a pure
    function of the samples.
    """
    samples = audio.samples
    total = num_frames(len(samples), cfg)
    if total == 0:
        raise EmptyInputError(
            f"audio has {len(samples)} samples, shorter than one frame ({cfg.length_samples})"
        )
    window = np.hanning(cfg.length_samples + 1)[:-1]  # periodic Hann
    fbank = mel_filterbank(cfg)
    out = np.empty((total, cfg.num_mels))
    hop = cfg.shift_samples
    for start in range(0, total, _CHUNK_FRAMES):
        stop = min(total, start + _CHUNK_FRAMES)
        seg = samples[start * hop : (stop - 1) * hop + cfg.length_samples]
        frames = frame_signal(seg, cfg) * window
        power = np.abs(np.fft.rfft(frames, n=cfg.n_fft, axis=1)) ** 2
        out[start:stop] = np.log(np.maximum(power @ fbank.T, cfg.log_floor))
    return FeatureMatrix(
        out,
        frame_shift_ms=cfg.frame_shift_ms,
        origin_offset_ms=cfg.frame_length_ms / 2.0,
        frame_length_ms=cfg.frame_length_ms,
    )
