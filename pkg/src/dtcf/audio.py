"""Acoustic frontend: waveforms, log-mel filterbank features, feature masking.

Feature recipe (fixed for reproducibility): Hamming window, power spectrum
on the next-pow2 FFT, triangular mel filters between 20 Hz and Nyquist on
the scale 2595*log10(1 + f/700), then log(energy + 1e-10). No dithering and
no per-utterance mean/variance normalisation: raw log-mel is the contract.
"""

from __future__ import annotations

import wave
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError

__all__ = ["Waveform", "FbankConfig", "AugmentConfig", "fbank", "spec_augment",
           "mel_filterbank", "read_wav", "write_wav"]


@dataclass
class Waveform:
    samples: np.ndarray          # mono, float in [-1, 1]
    sample_rate: int = 16000

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1 or self.samples.size == 0:
            raise DataError("waveform must be non-empty mono")
        if not np.all(np.isfinite(self.samples)):
            raise DataError("waveform contains non-finite samples")

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate


@dataclass(frozen=True)
class FbankConfig:
    n_mels: int = 80
    window_ms: float = 25.0
    hop_ms: float = 10.0
    fmin: float = 20.0
    log_floor: float = 1e-10

    def __post_init__(self):
        if self.n_mels < 1 or self.hop_ms <= 0 or self.window_ms <= self.hop_ms:
            raise ConfigError("require window > hop > 0 and n_mels >= 1")


@dataclass(frozen=True)
class AugmentConfig:
    time_mask_max: int = 10      # frames
    freq_mask_max: int = 8       # mel bins
    n_time_masks: int = 1
    n_freq_masks: int = 1


def _hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f) / 700.0)


def _mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m) / 2595.0) - 1.0)


def mel_filterbank(n_mels: int, n_fft: int, sample_rate: int, fmin: float) -> np.ndarray:
    """(n_mels, n_fft//2 + 1) triangular filters, peak weight 1."""
    fmax = sample_rate / 2.0
    mels = np.linspace(_hz_to_mel(fmin), _hz_to_mel(fmax), n_mels + 2)
    edges = _mel_to_hz(mels)
    freqs = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    weights = np.zeros((n_mels, freqs.size))
    for m in range(n_mels):
        lo, mid, hi = edges[m], edges[m + 1], edges[m + 2]
        up = (freqs - lo) / (mid - lo)
        down = (hi - freqs) / (hi - mid)
        weights[m] = np.clip(np.minimum(up, down), 0.0, None)
    return weights


def fbank(wav: Waveform, cfg: FbankConfig = FbankConfig()) -> np.ndarray:
    """Log-mel features, one row per frame: (1 + (N - win) // hop, n_mels)."""
    sr = wav.sample_rate
    win = int(round(sr * cfg.window_ms / 1000.0))
    hop = int(round(sr * cfg.hop_ms / 1000.0))
    x = wav.samples
    if x.size < win:
        raise DataError(f"waveform of {x.size} samples is shorter than one "
                        f"{win}-sample analysis window")
    n_frames = 1 + (x.size - win) // hop
    idx = np.arange(win)[None, :] + hop * np.arange(n_frames)[:, None]
    frames = x[idx] * np.hamming(win)
    n_fft = 1 << int(np.ceil(np.log2(win)))
    power = np.abs(np.fft.rfft(frames, n_fft, axis=1)) ** 2
    mel = mel_filterbank(cfg.n_mels, n_fft, sr, cfg.fmin)
    return np.log(power @ mel.T + cfg.log_floor).astype(np.float32)


def spec_augment(feats: np.ndarray, cfg: AugmentConfig,
                 rng: np.random.Generator) -> np.ndarray:
    """Mask random time and frequency bands with the pre-mask feature mean."""
    n_frames, n_bins = feats.shape
    if cfg.time_mask_max >= n_frames or cfg.freq_mask_max >= n_bins:
        raise ConfigError("mask widths must be smaller than the feature dims")
    out = feats.copy()
    fill = feats.mean()
    for _ in range(cfg.n_time_masks):
        width = int(rng.integers(0, cfg.time_mask_max + 1))
        start = int(rng.integers(0, n_frames - width + 1))
        out[start:start + width, :] = fill
    for _ in range(cfg.n_freq_masks):
        width = int(rng.integers(0, cfg.freq_mask_max + 1))
        start = int(rng.integers(0, n_bins - width + 1))
        out[:, start:start + width] = fill
    return out


# -- 16-bit PCM mono wav i/o --------------------------------------------------

def write_wav(path, wav: Waveform) -> None:
    pcm = np.clip(np.round(wav.samples * 32767.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as f:
        f.setnchannels(1)
        f.setsampwidth(2)
        f.setframerate(wav.sample_rate)
        f.writeframes(pcm.tobytes())


def read_wav(path) -> Waveform:
    with wave.open(str(path), "rb") as f:
        if f.getnchannels() != 1 or f.getsampwidth() != 2:
            raise DataError(f"{path}: expected 16-bit PCM mono")
        sr = f.getframerate()
        pcm = np.frombuffer(f.readframes(f.getnframes()), dtype="<i2")
    return Waveform(pcm.astype(np.float64) / 32767.0, sr)
