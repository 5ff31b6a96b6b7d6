"""Deterministic toy backend: every stage is analytic and invertible.

The toy world keeps neural models out of the loop while preserving the shape
of the real pipeline, so morphs can be verified end to end:

* timbre (dim 16) is a centred log-level profile; the 16 entries are anchor
  levels of a piecewise-linear spectral envelope over mel bands 16..79,
* pitch is a narrow energy bump in mel bands 0..15,
* prosody (dim 5) is a set of pitch-contour statistics with a fixed anchor
  component, so the unit vector can be mapped back to statistics,
* the vocoder is a bank of sinusoids at the mel band centres whose powers are
  solved against the filterbank leakage matrix, so ``log_mel(vocode(m))``
  tracks ``m``.

The timbre encoder doubles as the toy ASV encoder.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import nnls
from scipy.signal import lombscargle, medfilt

from ..audio import (
    DEFAULT_MEL,
    Waveform,
    log_mel,
    mel_band_centers,
    mel_power,
)
from ..embedding import normalize
from ..errors import DegenerateEmbedding, TooShortError

VERSION = "1"

N_MELS = DEFAULT_MEL.n_mels
PITCH_BANDS = 16
TIMBRE_DIM = 16
BANDS_PER_GROUP = (N_MELS - PITCH_BANDS) // TIMBRE_DIM
TIMBRE_DEPTH = 6.0  # nepers of log power per unit of timbre coordinate
PITCH_FLOOR = -8.0
PITCH_BUMP = 1.0
LEVEL_OFFSETS = (-6.0, -2.0, -1.0, 0.0)  # pause, apostrophe, consonant, vowel
VOICED_MARGIN = 3.0

FRAMES_PER_TOKEN = 4
TOKENS_PER_CHAR = 2
N_PITCH_CLASSES = 32
N_LEVELS = len(LEVEL_OFFSETS)
VOCAB_SIZE = N_PITCH_CLASSES * N_LEVELS
PITCH_BASE_HZ = 65.0
TOKEN_SECONDS = FRAMES_PER_TOKEN * DEFAULT_MEL.hop

PROSODY_DIM = 5
# raw prosody vector = [1, mean_st / 12, std_st / 2, slope / 2, rate / 4]
PROSODY_SCALES = np.array([12.0, 2.0, 2.0, 4.0])
NEUTRAL_PROSODY = np.array([12.0, 1.0, -0.5, 3.0])

ALPHABET = " abcdefghijklmnopqrstuvwxyz'"
_VOWELS = set("aeiou")


def char_level(ch: str) -> int:
    if ch == " ":
        return 0
    if ch == "'":
        return 1
    return 3 if ch in _VOWELS else 2


def pitch_hz(pitch_class):
    return PITCH_BASE_HZ * 2.0 ** (np.asarray(pitch_class, dtype=np.float64) / 12.0)


def hz_to_semitones(f):
    return 12.0 * np.log2(np.asarray(f, dtype=np.float64) / PITCH_BASE_HZ)


# ---------------------------------------------------------------------------
# Prosody statistics <-> unit vector


def prosody_vector(mean_st: float, std_st: float, slope: float, rate: float) -> np.ndarray:
    raw = np.concatenate([[1.0], np.array([mean_st, std_st, slope, rate]) / PROSODY_SCALES])
    return normalize(raw)


def prosody_stats(vec) -> np.ndarray:
    """Inverse of :func:`prosody_vector`; scale-invariant in ``vec``."""
    v = np.asarray(vec, dtype=np.float64)
    if v.shape != (PROSODY_DIM,) or v[0] <= 1e-9:
        raise DegenerateEmbedding("not a toy prosody vector (anchor must be positive)")
    return v[1:] / v[0] * PROSODY_SCALES


def pitch_contour(stats, n_steps: int) -> np.ndarray:
    """Target pitch (semitones re 65 Hz) at each token step."""
    mean_st, std_st, slope, rate = stats
    tau = (np.arange(n_steps) + 0.5) * TOKEN_SECONDS
    mid = n_steps * TOKEN_SECONDS / 2.0
    return mean_st + slope * (tau - mid) + std_st * math.sqrt(2.0) * np.sin(2 * np.pi * rate * tau)


# ---------------------------------------------------------------------------
# Language model


_PREFIX_QUANT = (
    (4.0, 0.0),   # mean_st, quarter semitones
    (16.0, 0.0),  # std_st
    (8.0, 64.0),  # slope, offset so negatives fit
    (16.0, 0.0),  # rate
)


@dataclass
class ToyTokenLM:
    """Autoregressive pitch/loudness token model.

    Each text character yields two acoustic tokens ``pitch_class * 4 + level``.
    The loudness level is fixed by the character class; the pitch class is
    drawn around a contour decoded from the prosody prefix, with a smoothness
    penalty against the previous token.
    """

    temperature: float = 0.5
    spread: float = 0.6
    smoothness: float = 0.15
    name: str = "toy-lm"
    version: str = VERSION
    vocab_size: int = VOCAB_SIZE
    reentrant: bool = True
    eos_token: int | None = None

    def decoding(self) -> dict:
        return {"strategy": "sample" if self.temperature > 0 else "greedy",
                "temperature": self.temperature}

    def prosody_prefix(self, prosody) -> list[int]:
        stats = prosody_stats(prosody)
        return [int(np.clip(round(s * q + off), 0, self.vocab_size - 1))
                for s, (q, off) in zip(stats, _PREFIX_QUANT)]

    def _prefix_stats(self, prefix) -> np.ndarray:
        if prefix is None:
            return NEUTRAL_PROSODY
        return np.array([(tok - off) / q for tok, (q, off) in zip(prefix, _PREFIX_QUANT)])

    def max_tokens(self, text_tokens) -> int:
        return TOKENS_PER_CHAR * len(text_tokens)

    def next_logits(self, prefix, text_tokens, history) -> np.ndarray:
        i = len(history)
        n = self.max_tokens(text_tokens)
        target = pitch_contour(self._prefix_stats(prefix), n)[i]
        pcs = np.arange(N_PITCH_CLASSES, dtype=np.float64)
        logits_pc = -((pcs - target) ** 2) / (2 * self.spread ** 2)
        if history:
            prev = history[-1] // N_LEVELS
            logits_pc = logits_pc - self.smoothness * (pcs - prev) ** 2
        level = char_level(ALPHABET[text_tokens[i // TOKENS_PER_CHAR]])
        logits = np.full((N_PITCH_CLASSES, N_LEVELS), -1e9)
        logits[:, level] = logits_pc
        return logits.ravel()


def decode_tokens(tokens) -> tuple[np.ndarray, np.ndarray]:
    """Per-frame pitch class (interpolated) and loudness offset."""
    tok = np.asarray(tokens, dtype=np.int64)
    pc = (tok // N_LEVELS).astype(np.float64)
    lv = tok % N_LEVELS
    n = tok.shape[0] * FRAMES_PER_TOKEN
    frame_pos = (np.arange(n) + 0.5) / FRAMES_PER_TOKEN
    token_pos = np.arange(tok.shape[0]) + 0.5
    pitch = np.interp(frame_pos, token_pos, pc)
    loud = np.asarray(LEVEL_OFFSETS)[np.repeat(lv, FRAMES_PER_TOKEN)]
    return pitch, loud


# ---------------------------------------------------------------------------
# Flow decoder


PITCH_GRID = np.arange(-2.0, N_PITCH_CLASSES + 1.0, 0.125)  # semitones re 65 Hz


@functools.lru_cache(maxsize=1)
def _pitch_templates() -> np.ndarray:
    """Low-band power of a unit-peak sinusoid at each pitch-grid frequency."""
    cfg = DEFAULT_MEL
    t = np.arange(cfg.win_samples) / cfg.sample_rate
    out = np.zeros((PITCH_GRID.shape[0], PITCH_BANDS))
    for ph in np.linspace(0.0, np.pi, 4, endpoint=False):
        frames = np.cos(2 * np.pi * pitch_hz(PITCH_GRID)[:, None] * t[None, :] + ph)
        for g, fr in enumerate(frames):
            out[g] += mel_power(fr, cfg)[0, :PITCH_BANDS]
    out /= out.max(axis=1, keepdims=True)
    out.setflags(write=False)
    return out


def pitch_template(pitch_st) -> np.ndarray:
    """Per-frame low-band power pattern of a sinusoid at ``pitch_st`` semitones.

    Shaping the pitch bump as something a real sinusoid can produce keeps the
    vocoder round trip faithful in the narrow low bands.
    """
    pos = np.interp(pitch_st, PITCH_GRID, np.arange(PITCH_GRID.shape[0]))
    lo = np.minimum(np.floor(pos).astype(np.int64), PITCH_GRID.shape[0] - 2)
    w = (pos - lo)[:, None]
    tpl = _pitch_templates()
    return (1.0 - w) * tpl[lo] + w * tpl[lo + 1]


@functools.lru_cache(maxsize=1)
def envelope_basis() -> np.ndarray:
    """``[64, 16]`` linear-interpolation weights from anchors to timbre bands.

    Rows sum to one. A piecewise-constant envelope would be cheaper to invert
    but its steps are too steep for a non-negative sinusoid bank to reproduce
    through the filter overlap.
    """
    n_bands = N_MELS - PITCH_BANDS
    pos = np.clip((np.arange(n_bands) - (BANDS_PER_GROUP - 1) / 2.0) / BANDS_PER_GROUP,
                  0.0, TIMBRE_DIM - 1.0)
    basis = np.zeros((n_bands, TIMBRE_DIM))
    lo = np.minimum(np.floor(pos).astype(np.int64), TIMBRE_DIM - 2)
    w = pos - lo
    basis[np.arange(n_bands), lo] = 1.0 - w
    basis[np.arange(n_bands), lo + 1] += w
    basis.setflags(write=False)
    return basis


@functools.lru_cache(maxsize=1)
def _envelope_pinv() -> np.ndarray:
    p = np.linalg.pinv(envelope_basis())
    p.setflags(write=False)
    return p


def target_mel(tokens, timbre) -> np.ndarray:
    """The log-mel frame matrix the toy flow field transports noise onto.

    ``timbre=None`` gives the unconditional target (flat envelope). The timbre
    vector is used as given, without renormalization, so a shrunken vector
    yields a flatter envelope.
    """
    pitch, loud = decode_tokens(tokens)
    n = pitch.shape[0]
    mel = np.empty((n, N_MELS))
    t = np.zeros(TIMBRE_DIM) if timbre is None else np.asarray(timbre, dtype=np.float64)
    mel[:, PITCH_BANDS:] = loud[:, None] + TIMBRE_DEPTH * (envelope_basis() @ t)[None, :]

    strength = np.exp(PITCH_BUMP + loud)
    bump = strength[:, None] * pitch_template(pitch)
    # the envelope sinusoids unavoidably spill into the top pitch bands
    leak = _envelope_amps(np.exp(mel[:, PITCH_BANDS:])) @ leakage_matrix()[:PITCH_BANDS,
                                                                           PITCH_BANDS:].T
    mel[:, :PITCH_BANDS] = np.log(math.exp(PITCH_FLOOR) + bump + leak)
    return mel


@dataclass
class ToyFlowDecoder:
    """Straight-path flow field ``v(x, t) = (target - x) / (1 - t)``.

    Euler integration of this field lands exactly on the target for any step
    count, so the decoder is exact and cheap.
    """

    name: str = "toy-flow"
    version: str = VERSION
    n_mels: int = N_MELS
    reentrant: bool = True

    def frames_for(self, tokens) -> int:
        return len(tokens) * FRAMES_PER_TOKEN

    def velocity(self, x, t, tokens, timbre):
        return (target_mel(tokens, timbre) - x) / (1.0 - t)


# ---------------------------------------------------------------------------
# Vocoder


@functools.lru_cache(maxsize=1)
def leakage_matrix() -> np.ndarray:
    """``L[i, j]``: band-i power produced by a unit sinusoid at band-j centre."""
    cfg = DEFAULT_MEL
    t = np.arange(cfg.win_samples) / cfg.sample_rate
    centres = mel_band_centers(cfg.sample_rate, N_MELS)
    L = np.zeros((N_MELS, N_MELS))
    phases = np.linspace(0.0, 2 * np.pi, 8, endpoint=False)
    for j, f in enumerate(centres):
        frames = np.stack([np.cos(2 * np.pi * f * t + ph) for ph in phases])
        L[:, j] = np.mean([mel_power(fr, cfg)[0] for fr in frames], axis=0)
    L.setflags(write=False)
    return L


def _envelope_amps(high_power: np.ndarray) -> np.ndarray:
    """Envelope sinusoid powers, ignoring the small upward spill of the pitch bands."""
    k = PITCH_BANDS
    L = leakage_matrix()
    return np.maximum(np.linalg.solve(L[k:, k:], high_power.T).T, 0.0)


def band_powers(mel) -> np.ndarray:
    """Per-frame sinusoid powers (amplitude squared) reproducing ``mel``."""
    L = leakage_matrix()
    k = PITCH_BANDS
    floor = math.log(DEFAULT_MEL.floor)
    P = np.where(mel <= floor + 1e-6, 0.0, np.exp(mel))
    out = np.zeros_like(P)
    low_L = L[:k, :k]
    cache: dict[bytes, np.ndarray] = {}
    low = np.maximum(P[:, :k] - _envelope_amps(P[:, k:]) @ L[:k, k:].T, 0.0)
    for i, row in enumerate(low):
        key = row.tobytes()
        if key not in cache:
            cache[key] = nnls(low_L, row)[0] if row.any() else np.zeros(k)
        out[i, :k] = cache[key]
    high = P[:, k:] - out[:, :k] @ L[k:, :k].T
    out[:, k:] = np.linalg.solve(L[k:, k:], high.T).T
    return np.maximum(out, 0.0)


@dataclass
class ToyVocoder:
    """Sinusoid bank at the mel band centres with Schroeder phases."""

    name: str = "toy-vocoder"
    version: str = VERSION
    reentrant: bool = True
    peak: float = 0.99

    def vocode(self, mel) -> Waveform:
        mel = np.asarray(mel, dtype=np.float64)
        cfg = DEFAULT_MEL
        n = mel.shape[0]
        amps = np.sqrt(band_powers(mel))
        n_samples = (n - 1) * cfg.hop_samples + cfg.win_samples
        centres_t = cfg.hop_samples * np.arange(n) + cfg.win_samples / 2.0
        s = np.arange(n_samples, dtype=np.float64)
        freqs = mel_band_centers(cfg.sample_rate, N_MELS)
        y = np.zeros(n_samples)
        for j in np.flatnonzero(amps.any(axis=0)):
            env = np.interp(s, centres_t, amps[:, j])
            y += env * np.cos(2 * np.pi * freqs[j] / cfg.sample_rate * s + np.pi * j * j / N_MELS)
        top = np.max(np.abs(y)) if n_samples else 0.0
        if top > self.peak:
            y *= self.peak / top
        return Waveform(y, cfg.sample_rate)


# ---------------------------------------------------------------------------
# Encoders


def _voiced_frames(frames: np.ndarray) -> np.ndarray:
    region = frames[:, PITCH_BANDS:]
    rm = region.mean(axis=1)
    floor = math.log(DEFAULT_MEL.floor)
    return (rm > rm.max() - VOICED_MARGIN) & (rm > floor + 1.0)


def timbre_features(frames: np.ndarray) -> np.ndarray:
    sel = _voiced_frames(frames)
    if not sel.any():
        raise DegenerateEmbedding("no voiced frames")
    region = frames[sel, PITCH_BANDS:]
    centred = region - region.mean(axis=1, keepdims=True)
    anchors = _envelope_pinv() @ centred.mean(axis=0)
    return normalize(anchors - anchors.mean())


def _check_len(waveform: Waveform) -> None:
    if len(waveform) < DEFAULT_MEL.win_samples:
        raise TooShortError("waveform shorter than one analysis window")


@dataclass
class ToyTimbreEncoder:
    name: str = "toy-timbre"
    version: str = VERSION
    kind: str = "timbre"
    dim: int = TIMBRE_DIM
    reentrant: bool = True
    min_duration: float = 0.5

    def encode(self, waveform: Waveform) -> np.ndarray:
        _check_len(waveform)
        return timbre_features(log_mel(waveform).frames)


@dataclass
class ToyASVEncoder(ToyTimbreEncoder):
    name: str = "toy-asv"


def _low_band_power(frames: np.ndarray) -> np.ndarray:
    """Pitch-region power with the downward leakage of the envelope removed.

    Sinusoids at the lowest envelope bands spill into the top pitch bands;
    left in, that spill reads as a very high pitch.
    """
    k = PITCH_BANDS
    P = np.exp(frames)
    low = P[:, :k] - _envelope_amps(P[:, k:]) @ leakage_matrix()[:k, k:].T - math.exp(PITCH_FLOOR)
    return np.maximum(low, 0.0)


@dataclass
class ToyProsodyEncoder:
    """Pitch-contour statistics from a template-matched pitch track."""

    name: str = "toy-prosody"
    version: str = VERSION
    kind: str = "prosody"
    dim: int = PROSODY_DIM
    reentrant: bool = True
    min_duration: float = 0.5

    def encode(self, waveform: Waveform) -> np.ndarray:
        _check_len(waveform)
        frames = log_mel(waveform).frames
        sel = _voiced_frames(frames)
        if sel.sum() < 4:
            raise DegenerateEmbedding("too few voiced frames for a pitch contour")
        power = _low_band_power(frames[sel])
        tpl = _pitch_templates()
        score = (power @ tpl.T) / (np.linalg.norm(tpl, axis=1)[None, :]
                                   * np.maximum(np.linalg.norm(power, axis=1), 1e-30)[:, None])
        st = medfilt(PITCH_GRID[np.argmax(score, axis=1)], 7)
        tau = (np.flatnonzero(sel) * DEFAULT_MEL.hop_samples
               + DEFAULT_MEL.win_samples / 2) / DEFAULT_MEL.sample_rate
        centre = tau - tau.mean()
        slope, intercept = np.polyfit(centre, st, 1)
        resid = st - (slope * centre + intercept)
        # Lomb-Scargle copes with the gaps that pauses leave in the pitch track.
        rates = np.linspace(0.5, 8.0, 151)
        rate = float(rates[np.argmax(lombscargle(tau, resid, 2 * np.pi * rates))])
        return prosody_vector(float(st.mean()), float(resid.std()), float(slope), float(rate))


@dataclass
class ToyFADEmbedder:
    """Toy ASV embeddings over consecutive windows (one vector per window)."""

    window: float = 1.0
    name: str = "toy-fad"
    version: str = VERSION
    dim: int = TIMBRE_DIM
    reentrant: bool = True

    def embed(self, waveform: Waveform) -> np.ndarray:
        frames = log_mel(waveform).frames
        per = int(round(self.window / DEFAULT_MEL.hop))
        out = []
        for start in range(0, max(frames.shape[0] - per + 1, 1), per):
            chunk = frames[start:start + per]
            try:
                out.append(timbre_features(chunk))
            except DegenerateEmbedding:
                continue
        if not out:
            out.append(timbre_features(frames))
        return np.stack(out)


# ---------------------------------------------------------------------------
# Synthetic speakers


@dataclass(frozen=True)
class ToyVoice:
    """Ground-truth parameters of a synthetic speaker."""

    speaker_id: str
    gender: str
    timbre: np.ndarray
    prosody_stats: tuple[float, float, float, float]

    @property
    def prosody(self) -> np.ndarray:
        return prosody_vector(*self.prosody_stats)


def random_timbre(rng: np.random.Generator) -> np.ndarray:
    v = rng.standard_normal(TIMBRE_DIM)
    return normalize(v - v.mean())


def timbre_at_angle(base: np.ndarray, omega: float, rng: np.random.Generator) -> np.ndarray:
    """A centred unit timbre exactly ``omega`` radians away from ``base``."""
    d = rng.standard_normal(TIMBRE_DIM)
    d -= d.mean()
    d -= (d @ base) * base
    d = normalize(d)
    return normalize(math.cos(omega) * base + math.sin(omega) * d)


def random_prosody_stats(gender: str, rng: np.random.Generator) -> tuple[float, ...]:
    lo, hi = (18.0, 24.0) if gender == "female" else (6.0, 13.0)
    return (
        float(rng.uniform(lo, hi)),
        float(rng.uniform(0.8, 2.5)),
        float(rng.uniform(-2.0, 0.0)),
        float(rng.uniform(1.5, 4.0)),
    )


def random_voice(speaker_id: str, gender: str, rng: np.random.Generator,
                 timbre: np.ndarray | None = None) -> ToyVoice:
    return ToyVoice(
        speaker_id=speaker_id,
        gender=gender,
        timbre=random_timbre(rng) if timbre is None else timbre,
        prosody_stats=random_prosody_stats(gender, rng),
    )


_WORDS = (
    "the of and to a in that he was it his is with as had for i at by on not be "
    "but from her which she they or an were all one this we said there have so "
    "would him when no out then if been could into more some them what up time "
    "over little great man upon before well only old very good day came down "
    "made about after any like now long away house should through where know again"
).split()


def random_text(rng: np.random.Generator, seconds: float) -> str:
    """Random words whose toy rendering lasts about ``seconds``."""
    n_chars = max(1, int(round(seconds / (TOKENS_PER_CHAR * TOKEN_SECONDS))))
    words: list[str] = []
    length = -1
    while length < n_chars:
        w = _WORDS[int(rng.integers(len(_WORDS)))]
        words.append(w)
        length += len(w) + 1
    return " ".join(words)[:n_chars].strip() or words[0]
