"""Waveform I/O, resampling and log-mel analysis."""

from __future__ import annotations

import functools
import math
import warnings
import wave
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.signal import get_window, resample_poly

from .errors import FormatError, NumericalError, TooShortError

CANONICAL_RATE = 16000
PCM_SCALE = 32768.0


@dataclass(frozen=True)
class MelConfig:
    """Analysis parameters shared by every log-mel consumer."""

    n_mels: int = 80
    window: float = 0.025
    hop: float = 0.010
    sample_rate: int = CANONICAL_RATE
    floor: float = 1e-10

    @property
    def win_samples(self) -> int:
        return int(round(self.window * self.sample_rate))

    @property
    def hop_samples(self) -> int:
        return int(round(self.hop * self.sample_rate))

    @property
    def n_fft(self) -> int:
        return 1 << (self.win_samples - 1).bit_length()


DEFAULT_MEL = MelConfig()


@dataclass(frozen=True, eq=False)
class Waveform:
    """Mono audio in [-1, 1]. Out-of-range input is clamped with a warning."""

    samples: np.ndarray
    sample_rate: int = CANONICAL_RATE

    def __post_init__(self):
        s = np.asarray(self.samples, dtype=np.float64)
        if s.ndim != 1:
            raise FormatError(f"waveform must be mono (1-D), got shape {s.shape}")
        if not np.all(np.isfinite(s)):
            raise NumericalError("waveform contains non-finite samples")
        if self.sample_rate <= 0:
            raise FormatError(f"sample rate must be positive, got {self.sample_rate}")
        n_clipped = int(np.count_nonzero(np.abs(s) > 1.0))
        if n_clipped:
            warnings.warn(f"{n_clipped} samples outside [-1, 1] were clamped", stacklevel=3)
            s = np.clip(s, -1.0, 1.0)
        elif s is self.samples:
            s = s.copy()
        s.setflags(write=False)
        object.__setattr__(self, "samples", s)
        object.__setattr__(self, "sample_rate", int(self.sample_rate))

    @property
    def duration(self) -> float:
        return self.samples.shape[0] / self.sample_rate

    def __len__(self):
        return self.samples.shape[0]


def read_wav(path: str | Path) -> Waveform:
    """Read a 16-bit PCM mono WAV file."""
    try:
        with wave.open(str(path), "rb") as w:
            if w.getnchannels() != 1:
                raise FormatError(f"{path}: expected mono, got {w.getnchannels()} channels")
            if w.getsampwidth() != 2:
                raise FormatError(f"{path}: expected 16-bit PCM, got {8 * w.getsampwidth()}-bit")
            rate = w.getframerate()
            raw = w.readframes(w.getnframes())
    except (wave.Error, EOFError) as exc:
        raise FormatError(f"{path}: {exc}") from exc
    if not raw:
        raise FormatError(f"{path}: no audio frames")
    pcm = np.frombuffer(raw, dtype="<i2")
    return Waveform(pcm.astype(np.float64) / PCM_SCALE, rate)


def wav_duration(path: str | Path) -> float:
    """Duration in seconds from the WAV header, without decoding samples."""
    try:
        with wave.open(str(path), "rb") as w:
            if w.getnchannels() != 1 or w.getsampwidth() != 2:
                raise FormatError(f"{path}: not 16-bit PCM mono")
            n, rate = w.getnframes(), w.getframerate()
    except (wave.Error, EOFError) as exc:
        raise FormatError(f"{path}: {exc}") from exc
    if n == 0:
        raise FormatError(f"{path}: no audio frames")
    return n / rate


def write_wav(waveform: Waveform, path: str | Path) -> None:
    pcm = np.clip(np.round(waveform.samples * PCM_SCALE), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(waveform.sample_rate)
        w.writeframes(pcm.tobytes())


def resample(waveform: Waveform, target_rate: int) -> Waveform:
    """Polyphase band-limited resampling. Same-rate input is returned unchanged."""
    target_rate = int(target_rate)
    if target_rate <= 0:
        raise ValueError("target rate must be positive")
    if target_rate == waveform.sample_rate:
        return waveform
    g = math.gcd(target_rate, waveform.sample_rate)
    up, down = target_rate // g, waveform.sample_rate // g
    out = resample_poly(waveform.samples, up, down)
    # The anti-aliasing filter can overshoot full scale by a hair.
    return Waveform(np.clip(out, -1.0, 1.0), target_rate)


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


@functools.lru_cache(maxsize=16)
def _mel_points(sample_rate: int, n_mels: int) -> np.ndarray:
    pts = mel_to_hz(np.linspace(0.0, float(hz_to_mel(sample_rate / 2.0)), n_mels + 2))
    pts.setflags(write=False)
    return pts


def mel_band_centers(sample_rate: int = CANONICAL_RATE, n_mels: int = 80) -> np.ndarray:
    """Centre frequency (Hz) of each triangular band."""
    return _mel_points(sample_rate, n_mels)[1:-1]


@functools.lru_cache(maxsize=16)
def mel_filterbank(sample_rate: int, n_fft: int, n_mels: int) -> np.ndarray:
    """HTK-style triangular filters (unit peak) spanning 0 Hz to Nyquist.

    Returns an ``[n_mels, n_fft // 2 + 1]`` matrix.
    """
    pts = _mel_points(sample_rate, n_mels)
    freqs = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    lo, mid, hi = pts[:-2, None], pts[1:-1, None], pts[2:, None]
    rising = (freqs[None, :] - lo) / (mid - lo)
    falling = (hi - freqs[None, :]) / (hi - mid)
    fb = np.maximum(0.0, np.minimum(rising, falling))
    fb.setflags(write=False)
    return fb


@functools.lru_cache(maxsize=4)
def _window(n: int) -> np.ndarray:
    w = get_window("hann", n)
    w.setflags(write=False)
    return w


def n_frames_for(n_samples: int, cfg: MelConfig = DEFAULT_MEL) -> int:
    if n_samples < cfg.win_samples:
        return 0
    return (n_samples - cfg.win_samples) // cfg.hop_samples + 1


def mel_power(samples: np.ndarray, cfg: MelConfig = DEFAULT_MEL) -> np.ndarray:
    """Mel-band power per frame, ``[n_frames, n_mels]``, before the log."""
    win, hop = cfg.win_samples, cfg.hop_samples
    n = n_frames_for(samples.shape[0], cfg)
    if n == 0:
        raise TooShortError(f"need at least {win} samples, got {samples.shape[0]}")
    frames = np.lib.stride_tricks.sliding_window_view(samples, win)[::hop][:n]
    spec = np.fft.rfft(frames * _window(win), cfg.n_fft, axis=1)
    power = spec.real ** 2 + spec.imag ** 2
    return power @ mel_filterbank(cfg.sample_rate, cfg.n_fft, cfg.n_mels).T


@dataclass(frozen=True, eq=False)
class LogMelSpectrogram:
    frames: np.ndarray  # [n_frames, n_mels], natural-log power
    n_mels: int
    window: float
    hop: float
    sample_rate: int

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]


def log_mel(
    waveform: Waveform,
    n_mels: int = DEFAULT_MEL.n_mels,
    window: float = DEFAULT_MEL.window,
    hop: float = DEFAULT_MEL.hop,
    floor: float = DEFAULT_MEL.floor,
) -> LogMelSpectrogram:
    cfg = MelConfig(n_mels=n_mels, window=window, hop=hop,
                    sample_rate=waveform.sample_rate, floor=floor)
    frames = np.log(np.maximum(mel_power(waveform.samples, cfg), floor))
    frames.setflags(write=False)
    return LogMelSpectrogram(frames, n_mels, window, hop, waveform.sample_rate)
