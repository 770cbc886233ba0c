"""Stochastic waveform and spectrogram augmentations used while training probes.

Order: cyclic roll -> multi-label mixup -> background noise -> colored noise
-> gain -> no-call substitution -> (frontend) -> frequency / time masking.
Every draw comes from a per-sample generator, see :func:`sample_rng`.
"""

from __future__ import annotations

from dataclasses import dataclass, fields, replace
from typing import Sequence

import numpy as np

from .frontend import Spectrogram, Waveform


@dataclass(frozen=True)
class LabeledClip:
    waveform: Waveform
    labels: np.ndarray
    source_id: str = ""

    def __post_init__(self):
        y = np.asarray(self.labels)
        if y.ndim != 1 or not np.isin(y, (0, 1)).all():
            raise ValueError("labels must be a 1-D multi-hot vector")
        object.__setattr__(self, "labels", y.astype(np.int8))

    def with_samples(self, samples: np.ndarray, labels=None) -> "LabeledClip":
        wave = Waveform(samples, self.waveform.sample_rate)
        return replace(self, waveform=wave, labels=self.labels if labels is None else labels)


@dataclass(frozen=True)
class AugmentConfig:
    roll_p: float = 1.0
    mixup_p: float = 0.9
    mixup_min_snr: float = 2.0
    mixup_max_snr: float = 30.0
    mixup_max_samples: int = 3
    background_p: float = 0.5
    background_min_snr: float = 3.0
    background_max_snr: float = 30.0
    colored_p: float = 0.2
    colored_min_snr: float = 3.0
    colored_max_snr: float = 30.0
    colored_min_decay: float = -2.0
    colored_max_decay: float = 2.0
    gain_p: float = 0.2
    gain_min_db: float = -18.0
    gain_max_db: float = 6.0
    nocall_p: float = 0.075
    freq_mask_p: float = 0.3
    freq_mask_param: int = 50
    time_mask_p: float = 0.3
    time_mask_param: int = 100
    rng_seed: int = 0

    def __post_init__(self):
        for f in fields(self):
            if f.name.endswith("_p") and not 0.0 <= getattr(self, f.name) <= 1.0:
                raise ValueError(f"{f.name} must be a probability, got {getattr(self, f.name)}")
        for lo, hi in (("mixup_min_snr", "mixup_max_snr"), ("background_min_snr", "background_max_snr"),
                       ("colored_min_snr", "colored_max_snr"), ("colored_min_decay", "colored_max_decay"),
                       ("gain_min_db", "gain_max_db")):
            if getattr(self, lo) > getattr(self, hi):
                raise ValueError(f"{lo} exceeds {hi}")
        if self.mixup_max_samples < 1:
            raise ValueError("mixup_max_samples must be at least 1")


def sample_rng(seed: int, sample_index: int) -> np.random.Generator:
    """Independent stream per (global seed, sample index)."""
    return np.random.default_rng([int(seed), int(sample_index)])


def rms(x: np.ndarray) -> float:
    x = np.asarray(x, dtype=np.float64)
    return float(np.sqrt(np.mean(x * x)))


def snr_scale(base_rms: float, added_rms: float, snr_db: float) -> float:
    """Factor on the added signal so that base/added power ratio is ``snr_db``."""
    return base_rms / (added_rms * 10.0 ** (snr_db / 20.0))


def _fit_length(x: np.ndarray, n: int) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.size >= n:
        return x[:n]
    return np.resize(x, n)


def cyclic_roll(clip: LabeledClip, rng: np.random.Generator, shift: int | None = None) -> LabeledClip:
    x = clip.waveform.samples
    k = int(rng.integers(0, x.size)) if shift is None else int(shift)
    return clip.with_samples(np.roll(x, k))


def _mix_in(base: np.ndarray, added: np.ndarray, snr_db: float) -> np.ndarray | None:
    added = _fit_length(added, base.size)
    a_rms = rms(added)
    if a_rms == 0.0:
        return None
    return base + snr_scale(rms(base), a_rms, snr_db) * added


def mixup_multilabel(clip: LabeledClip, pool: Sequence[LabeledClip], rng: np.random.Generator,
                     cfg: AugmentConfig = AugmentConfig()) -> LabeledClip:
    if not pool:
        raise ValueError("mixup needs a non-empty clip pool")
    if rng.random() >= cfg.mixup_p:
        return clip
    n_extra = int(rng.integers(1, cfg.mixup_max_samples)) if cfg.mixup_max_samples > 1 else 0
    base = clip.waveform.samples.astype(np.float64)
    out = base.copy()
    labels = clip.labels.copy()
    for _ in range(n_extra):
        other = pool[int(rng.integers(0, len(pool)))]
        snr = rng.uniform(cfg.mixup_min_snr, cfg.mixup_max_snr)
        added = _fit_length(other.waveform.samples, base.size)
        a_rms = rms(added)
        if a_rms == 0.0:
            continue
        out = out + snr_scale(rms(base), a_rms, snr) * added
        labels = np.maximum(labels, other.labels)
    return clip.with_samples(out, labels)


def add_background_noise(clip: LabeledClip, noise_pool: Sequence[np.ndarray], rng: np.random.Generator,
                         cfg: AugmentConfig = AugmentConfig()) -> LabeledClip:
    if not len(noise_pool):
        raise ValueError("background noise needs a non-empty noise pool")
    if rng.random() >= cfg.background_p:
        return clip
    noise = noise_pool[int(rng.integers(0, len(noise_pool)))]
    snr = rng.uniform(cfg.background_min_snr, cfg.background_max_snr)
    mixed = _mix_in(clip.waveform.samples, np.asarray(noise), snr)
    return clip if mixed is None else clip.with_samples(mixed)


def colored_noise(n: int, decay: float, rng: np.random.Generator) -> np.ndarray:
    """Gaussian noise whose power spectral density goes as f**decay (DC removed)."""
    spec = rng.standard_normal(n // 2 + 1) + 1j * rng.standard_normal(n // 2 + 1)
    f = np.arange(n // 2 + 1, dtype=np.float64)
    amp = np.zeros_like(f)
    amp[1:] = f[1:] ** (decay / 2.0)
    x = np.fft.irfft(spec * amp, n=n)
    return x / (rms(x) or 1.0)


def add_colored_noise(clip: LabeledClip, rng: np.random.Generator,
                      cfg: AugmentConfig = AugmentConfig()) -> LabeledClip:
    if rng.random() >= cfg.colored_p:
        return clip
    snr = rng.uniform(cfg.colored_min_snr, cfg.colored_max_snr)
    decay = rng.uniform(cfg.colored_min_decay, cfg.colored_max_decay)
    noise = colored_noise(clip.waveform.samples.size, decay, rng)
    mixed = _mix_in(clip.waveform.samples, noise, snr)
    return clip if mixed is None else clip.with_samples(mixed)


def apply_gain(clip: LabeledClip, gain_db: float) -> LabeledClip:
    return clip.with_samples(clip.waveform.samples.astype(np.float64) * 10.0 ** (gain_db / 20.0))


def gain(clip: LabeledClip, rng: np.random.Generator, cfg: AugmentConfig = AugmentConfig()) -> LabeledClip:
    if rng.random() >= cfg.gain_p:
        return clip
    return apply_gain(clip, rng.uniform(cfg.gain_min_db, cfg.gain_max_db))


def no_call_mix(clip: LabeledClip, nocall_pool: Sequence[np.ndarray], rng: np.random.Generator,
                cfg: AugmentConfig = AugmentConfig()) -> LabeledClip:
    """Substitute a background-only clip, clearing all labels."""
    if not len(nocall_pool):
        raise ValueError("no-call mixing needs a non-empty pool")
    if rng.random() >= cfg.nocall_p:
        return clip
    bg = nocall_pool[int(rng.integers(0, len(nocall_pool)))]
    return clip.with_samples(_fit_length(bg, clip.waveform.samples.size), np.zeros_like(clip.labels))


def _mask_band(values: np.ndarray, axis: int, width: int, rng: np.random.Generator) -> np.ndarray:
    size = values.shape[axis]
    width = min(width, size)
    if width == 0:
        return values
    start = int(rng.integers(0, size - width + 1))
    out = values.copy()
    if axis == 0:
        out[start : start + width, :] = 0.0
    else:
        out[:, start : start + width] = 0.0
    return out


def spec_mask(spec: Spectrogram, rng: np.random.Generator, cfg: AugmentConfig = AugmentConfig()) -> Spectrogram:
    """Independent frequency and time band masks, each zeroing up to its param."""
    values = spec.values
    if rng.random() < cfg.freq_mask_p:
        values = _mask_band(values, 0, int(rng.integers(0, cfg.freq_mask_param + 1)), rng)
    if rng.random() < cfg.time_mask_p:
        values = _mask_band(values, 1, int(rng.integers(0, cfg.time_mask_param + 1)), rng)
    return replace(spec, values=values)


def augment_waveform(clip: LabeledClip, rng: np.random.Generator, cfg: AugmentConfig = AugmentConfig(), *,
                     pool: Sequence[LabeledClip] = (), noise_pool: Sequence[np.ndarray] = (),
                     nocall_pool: Sequence[np.ndarray] = ()) -> LabeledClip:
    """Waveform half of the pipeline; stages whose pool is empty are skipped."""
    if rng.random() < cfg.roll_p:
        clip = cyclic_roll(clip, rng)
    if pool:
        clip = mixup_multilabel(clip, pool, rng, cfg)
    if len(noise_pool):
        clip = add_background_noise(clip, noise_pool, rng, cfg)
    clip = add_colored_noise(clip, rng, cfg)
    clip = gain(clip, rng, cfg)
    if len(nocall_pool):
        clip = no_call_mix(clip, nocall_pool, rng, cfg)
    return clip
