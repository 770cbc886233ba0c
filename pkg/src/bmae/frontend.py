"""Waveform loading and the 128 x 512 normalised log-mel frontend."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from fractions import Fraction

import numpy as np
from scipy.io import wavfile
from scipy.signal import resample_poly

SAMPLE_RATE = 32_000
N_MELS = 128
TARGET_FRAMES = 512
FRAME_LEN_MS = 25.0
FRAME_SHIFT_MS = 10.0
LOG_FLOOR = 1e-10
NORM_MEAN = -7.2
NORM_STD = 4.43


class AudioError(ValueError):
    """Audio could not be read or is unusable."""


@dataclass(frozen=True)
class Waveform:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        if self.sample_rate <= 0:
            raise AudioError(f"sample rate must be positive, got {self.sample_rate}")
        if np.asarray(self.samples).size == 0:
            raise AudioError("waveform is empty")
        object.__setattr__(self, "samples", np.asarray(self.samples, dtype=np.float32).reshape(-1))

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate


@dataclass(frozen=True)
class Spectrogram:
    """(n_mels, frames) log-mel matrix; ``mean``/``std`` are set once normalised."""

    values: np.ndarray
    normalized: bool = False
    mean: float | None = None
    std: float | None = None

    @property
    def n_mels(self) -> int:
        return self.values.shape[0]

    @property
    def frames(self) -> int:
        return self.values.shape[1]


def _to_float(data: np.ndarray) -> np.ndarray:
    if data.dtype == np.int16:
        return data.astype(np.float32) / 32768.0
    if data.dtype == np.int32:
        return (data.astype(np.float64) / 2147483648.0).astype(np.float32)
    if data.dtype == np.float32:
        return data
    if data.dtype == np.float64:
        return data.astype(np.float32)
    raise AudioError(f"unsupported WAV sample encoding {data.dtype}")


def resample(samples: np.ndarray, orig_rate: int, target_rate: int) -> np.ndarray:
    """Windowed-sinc polyphase resampling."""
    if orig_rate == target_rate:
        return np.asarray(samples, dtype=np.float32)
    ratio = Fraction(target_rate, orig_rate)
    out = resample_poly(np.asarray(samples, dtype=np.float64), ratio.numerator, ratio.denominator)
    return out.astype(np.float32)


def load_audio(path, target_rate: int = SAMPLE_RATE) -> Waveform:
    try:
        rate, data = wavfile.read(path)
    except (OSError, ValueError) as exc:
        raise AudioError(f"cannot read {path}: {exc}") from exc
    samples = _to_float(np.asarray(data))
    if samples.ndim == 2:
        samples = samples.mean(axis=1).astype(np.float32)
    if samples.size == 0:
        raise AudioError(f"{path} contains no samples")
    return Waveform(resample(samples, rate, target_rate), target_rate)


def write_wav(path, wave: Waveform) -> None:
    wavfile.write(path, wave.sample_rate, np.asarray(wave.samples, dtype=np.float32))


def _hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f) / 700.0)


def _mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m) / 2595.0) - 1.0)


def mel_filterbank(n_mels: int, n_fft: int, sample_rate: int, fmin: float = 0.0,
                   fmax: float | None = None) -> np.ndarray:
    """HTK-spaced triangular filters, shape (n_mels, n_fft // 2 + 1)."""
    fmax = sample_rate / 2.0 if fmax is None else fmax
    edges = _mel_to_hz(np.linspace(_hz_to_mel(fmin), _hz_to_mel(fmax), n_mels + 2))
    freqs = np.linspace(0.0, sample_rate / 2.0, n_fft // 2 + 1)
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    up = (freqs - lo) / (mid - lo)
    down = (hi - freqs) / (hi - mid)
    return np.maximum(0.0, np.minimum(up, down))


def fbank(
    w: Waveform,
    n_mels: int = N_MELS,
    frame_len_ms: float = FRAME_LEN_MS,
    frame_shift_ms: float = FRAME_SHIFT_MS,
) -> Spectrogram:
    """Hanning-windowed power spectrum -> mel filterbank -> natural log."""
    frame_len = int(round(w.sample_rate * frame_len_ms / 1000.0))
    shift = int(round(w.sample_rate * frame_shift_ms / 1000.0))
    x = np.asarray(w.samples, dtype=np.float64)
    if x.size < frame_len:
        raise AudioError(f"waveform has {x.size} samples, shorter than one {frame_len}-sample frame")
    n_frames = (x.size - frame_len) // shift + 1
    n_fft = 1 << math.ceil(math.log2(frame_len))
    frames = np.lib.stride_tricks.sliding_window_view(x, frame_len)[::shift][:n_frames]
    spec = np.fft.rfft(frames * np.hanning(frame_len), n=n_fft, axis=1)
    power = spec.real**2 + spec.imag**2
    mel = power @ mel_filterbank(n_mels, n_fft, w.sample_rate).T
    return Spectrogram(np.log(np.maximum(mel, LOG_FLOOR)).T.copy())


def pad_or_crop(spec: Spectrogram, target_frames: int = TARGET_FRAMES) -> Spectrogram:
    v = spec.values
    if v.shape[1] >= target_frames:
        return replace(spec, values=v[:, :target_frames].copy())
    pad = np.full((v.shape[0], target_frames - v.shape[1]), math.log(LOG_FLOOR))
    return replace(spec, values=np.concatenate([v, pad], axis=1))


def normalize(spec: Spectrogram, mean: float = NORM_MEAN, std: float = NORM_STD,
              std_scale: float = 1.0) -> Spectrogram:
    """(values - mean) / (std_scale * std). ``std_scale=2`` halves the output spread."""
    if spec.normalized:
        raise ValueError("spectrogram is already normalised")
    if std <= 0 or std_scale <= 0:
        raise ValueError(f"std must be positive, got {std} (scale {std_scale})")
    values = (spec.values - mean) / (std * std_scale)
    return Spectrogram(values, normalized=True, mean=mean, std=std * std_scale)


def spectrogram(w: Waveform, mean: float = NORM_MEAN, std: float = NORM_STD,
                std_scale: float = 1.0) -> Spectrogram:
    """Full pipeline: 32 kHz waveform -> normalised 128 x 512 log-mel."""
    if w.sample_rate != SAMPLE_RATE:
        w = Waveform(resample(w.samples, w.sample_rate, SAMPLE_RATE), SAMPLE_RATE)
    return normalize(pad_or_crop(fbank(w)), mean, std, std_scale)
