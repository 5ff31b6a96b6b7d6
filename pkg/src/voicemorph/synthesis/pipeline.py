"""Three-stage morph synthesis: token LM, flow-matching mel decoder, vocoder."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from ..audio import CANONICAL_RATE, Waveform, read_wav, resample
from ..embedding import (
    ClipRef,
    Gender,
    Kind,
    SpeakerEmbedding,
    SpeakerProfile,
    normalize,
)
from ..errors import (
    BackendError,
    ContractViolation,
    DegenerateEmbedding,
    EmptyProfile,
    NumericalError,
    StageError,
    TooShortError,
    VoiceMorphError,
)
from ..interpolation import FusedEmbeddingPair, FusionStrategy, fuse_pair
from .backends import Backends
from .toy import ALPHABET

MIN_REFERENCE_SECONDS = 5.0


def digest(*parts) -> str:
    """SHA-256 over arrays/bytes/JSON-able values, in order."""
    h = hashlib.sha256()
    for p in parts:
        if isinstance(p, np.ndarray):
            h.update(str(p.shape).encode())
            h.update(np.ascontiguousarray(p, dtype=np.float64).tobytes())
        elif isinstance(p, (bytes, bytearray)):
            h.update(p)
        else:
            h.update(json.dumps(p, sort_keys=True, default=str).encode())
        h.update(b"\x00")
    return h.hexdigest()


# ---------------------------------------------------------------------------
# Extraction


def _call_backend(backends: Backends | None, backend, fn: Callable, *args):
    try:
        if backends is None:
            return fn(*args)
        with backends.guard(backend):
            return fn(*args)
    except (TooShortError, BackendError):
        raise
    except Exception as exc:
        name = getattr(backend, "name", type(backend).__name__)
        raise BackendError(f"{name} failed: {type(exc).__name__}: {exc}", repr(exc)) from exc


def _encode(backends, encoder, kind: Kind, waveform: Waveform) -> SpeakerEmbedding:
    vec = _call_backend(backends, encoder, encoder.encode, waveform)
    declared = getattr(encoder, "dim", 0)
    if declared and np.asarray(vec).shape != (declared,):
        raise ContractViolation(
            f"{encoder.name} declared dim {declared} but returned shape {np.shape(vec)}")
    try:
        return SpeakerEmbedding.from_vector(kind, vec)
    except VoiceMorphError as exc:
        raise BackendError(f"{encoder.name} returned an unusable vector: {exc}") from exc


def _canonical(waveform: Waveform) -> Waveform:
    return resample(waveform, CANONICAL_RATE)


def extract_embeddings(
    waveform: Waveform, backends: Backends, min_duration: float = MIN_REFERENCE_SECONDS
) -> tuple[SpeakerEmbedding, SpeakerEmbedding]:
    """Prosody and timbre embeddings of one reference clip.

    Raises:
        TooShortError: if the clip is shorter than ``min_duration`` seconds.
        BackendError: if an encoder fails or returns an unusable vector.
    """
    if waveform.duration < min_duration:
        raise TooShortError(
            f"reference clip lasts {waveform.duration:.2f} s, need at least {min_duration} s")
    w = _canonical(waveform)
    prosody = _encode(backends, backends.prosody_encoder, Kind.PROSODY, w)
    timbre = _encode(backends, backends.timbre_encoder, Kind.TIMBRE, w)
    return prosody, timbre


def asv_embedding(waveform: Waveform, backends: Backends) -> SpeakerEmbedding:
    """Verification embedding of a clip under the active ASV backend."""
    return _encode(backends, backends.asv_encoder, Kind.TIMBRE, _canonical(waveform))


def build_profile(
    speaker_id: str,
    gender: Gender | str,
    clips: Sequence[tuple[ClipRef, Waveform]],
    backends: Backends,
    min_duration: float = MIN_REFERENCE_SECONDS,
) -> SpeakerProfile:
    prosody, timbre = [], []
    for _, wav in clips:
        p, t = extract_embeddings(wav, backends, min_duration)
        prosody.append(p)
        timbre.append(t)
    return SpeakerProfile.from_embeddings(speaker_id, gender, [c for c, _ in clips],
                                          prosody, timbre)


# ---------------------------------------------------------------------------
# Stage 1: acoustic tokens


@dataclass(frozen=True)
class TokenSequence:
    tokens: tuple[int, ...]
    vocab_size: int

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(int(t) for t in self.tokens))
        bad = [t for t in self.tokens if not 0 <= t < self.vocab_size]
        if bad:
            raise ContractViolation(f"tokens outside vocabulary of {self.vocab_size}: {bad[:5]}")

    def __len__(self):
        return len(self.tokens)


def tokenize_text(text: str) -> list[int]:
    """Character-level text tokens; characters outside the alphabet are dropped."""
    out = []
    for ch in " ".join(text.lower().split()):
        idx = ALPHABET.find(ch)
        if idx >= 0:
            out.append(idx)
    return out


def guided(v_uncond, v_cond, guidance_scale: float):
    """Classifier-free guidance ``v_u + w (v_c - v_u)``; exact at w in {0, 1}."""
    if guidance_scale == 1.0:
        return v_cond
    if guidance_scale == 0.0:
        return v_uncond
    return v_uncond + guidance_scale * (v_cond - v_uncond)


def _check_unit(vec, what: str) -> np.ndarray:
    v = np.asarray(vec, dtype=np.float64)
    if not np.all(np.isfinite(v)) or abs(float(np.linalg.norm(v)) - 1.0) > 1e-9:
        raise DegenerateEmbedding(f"{what} must be a finite unit vector")
    return v


def _softmax_sample(logits: np.ndarray, temperature: float, rng: np.random.Generator) -> int:
    if temperature <= 0:
        return int(np.argmax(logits))
    z = logits / temperature
    z = z - z.max()
    p = np.exp(z)
    p /= p.sum()
    return int(rng.choice(p.shape[0], p=p))


def generate_tokens(
    text_tokens: Sequence[int],
    prosody,
    lm,
    seed: int,
    guidance_scale: float = 1.0,
    backends: Backends | None = None,
) -> TokenSequence:
    """Autoregressive acoustic tokens conditioned on a prosody prefix.

    In-process LMs expose ``prosody_prefix`` and ``next_logits`` and are driven
    step by step here, with guidance applied to the logits; external LMs expose
    a whole-sequence ``generate``.
    """
    prosody = _check_unit(prosody, "fused prosody embedding")
    text_tokens = list(text_tokens)
    if not text_tokens:
        return TokenSequence((), lm.vocab_size)
    if hasattr(lm, "generate"):
        toks = _call_backend(backends, lm, lm.generate, text_tokens, prosody, seed,
                             guidance_scale)
        return TokenSequence(toks, lm.vocab_size)

    def run():
        rng = np.random.default_rng(seed)
        prefix = lm.prosody_prefix(prosody)
        history: list[int] = []
        eos = getattr(lm, "eos_token", None)
        temperature = float(getattr(lm, "temperature", 0.0))
        for _ in range(lm.max_tokens(text_tokens)):
            cond = np.asarray(lm.next_logits(prefix, text_tokens, history), dtype=np.float64)
            if guidance_scale != 1.0:
                uncond = np.asarray(lm.next_logits(None, text_tokens, history), dtype=np.float64)
                cond = guided(uncond, cond, guidance_scale)
            if cond.shape != (lm.vocab_size,) or not np.all(np.isfinite(cond) | (cond < 0)):
                raise ContractViolation(f"{lm.name} emitted malformed logits")
            tok = _softmax_sample(cond, temperature, rng)
            if eos is not None and tok == eos:
                break
            history.append(tok)
        return history

    return TokenSequence(_call_backend(backends, lm, run), lm.vocab_size)


# ---------------------------------------------------------------------------
# Stage 2: flow matching


FieldFn = Callable[[np.ndarray, float, object], np.ndarray]


def integrate_flow(
    x0: np.ndarray,
    field: FieldFn,
    timbre,
    steps: int = 32,
    guidance_scale: float = 1.0,
) -> np.ndarray:
    """Explicit Euler solve of ``dx/dt = v~(x, t)`` from t=0 to t=1.

    ``field(x, t, cond)`` is evaluated with ``cond=timbre`` for the
    conditional velocity and ``cond=None`` for the unconditional one.

    Raises:
        NumericalError: if the guided velocity is non-finite at some step.
    """
    if steps < 1:
        raise ValueError("steps must be at least 1")
    if guidance_scale < 0:
        raise ValueError("guidance_scale must be non-negative")
    x = np.array(x0, dtype=np.float64, copy=True)
    h = 1.0 / steps
    for k in range(steps):
        t = k * h
        if guidance_scale == 0.0:
            v = field(x, t, None)
        elif guidance_scale == 1.0:
            v = field(x, t, timbre)
        else:
            v = guided(field(x, t, None), field(x, t, timbre), guidance_scale)
        v = np.asarray(v, dtype=np.float64)
        if not np.all(np.isfinite(v)):
            raise NumericalError(f"non-finite velocity at step {k} (t={t:.4f})")
        x = x + h * v
    return x


# ---------------------------------------------------------------------------
# Stage 3: vocoder


def vocode(mel, vocoder, backends: Backends | None = None) -> Waveform:
    mel = np.asarray(mel, dtype=np.float64)
    if mel.ndim != 2 or not np.all(np.isfinite(mel)):
        raise NumericalError("mel matrix must be a finite 2-D array")
    wav = _call_backend(backends, vocoder, vocoder.vocode, mel)
    if not isinstance(wav, Waveform):
        raise ContractViolation(f"{vocoder.name} did not return a Waveform")
    return _canonical(wav)


# ---------------------------------------------------------------------------
# Orchestration


@dataclass(frozen=True)
class SynthesisConfig:
    flow_steps: int = 32
    flow_guidance: float = 1.0
    lm_guidance: float = 1.0
    min_reference_duration: float = MIN_REFERENCE_SECONDS

    def to_dict(self) -> dict:
        return {
            "flow_steps": self.flow_steps,
            "flow_guidance": self.flow_guidance,
            "lm_guidance": self.lm_guidance,
            "min_reference_duration": self.min_reference_duration,
        }


@dataclass(frozen=True)
class MorphSpec:
    pair: tuple[SpeakerProfile, SpeakerProfile]
    text: str
    strategy: FusionStrategy = field(default_factory=FusionStrategy)
    seed: int = 0

    def __post_init__(self):
        if not self.text.strip():
            raise ValueError("morph text must be non-empty")


@dataclass(frozen=True, eq=False)
class MorphResult:
    waveform: Waveform
    fused: FusedEmbeddingPair
    tokens: TokenSequence
    mel: np.ndarray
    provenance: dict


def _profile_digest(p: SpeakerProfile) -> str:
    return digest(p.speaker_id, p.prosody.values, p.timbre.values)


def _ensure_profile(profile: SpeakerProfile, backends: Backends, cfg: SynthesisConfig):
    if profile.aggregated is not None:
        return profile
    if not all(c.path for c in profile.clips):
        raise EmptyProfile(f"profile {profile.speaker_id} has no embeddings and no clip paths")
    clips = [(c, read_wav(c.path)) for c in profile.clips]
    return build_profile(profile.speaker_id, profile.gender, clips, backends,
                         cfg.min_reference_duration)


def _stage(name: str, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except StageError:
        raise
    except VoiceMorphError as exc:
        raise StageError(name, exc) from exc


def stage_seeds(seed: int) -> tuple[int, int]:
    """Independent (token sampling, noise prior) seeds derived from a job seed."""
    a, b = np.random.SeedSequence(seed).generate_state(2, dtype=np.uint32)
    return int(a), int(b)


def synthesize(
    fused: FusedEmbeddingPair,
    text: str,
    backends: Backends,
    seed: int,
    cfg: SynthesisConfig = SynthesisConfig(),
) -> tuple[TokenSequence, np.ndarray, Waveform, dict]:
    """Run the three synthesis stages on already fused conditioning vectors."""
    lm_seed, noise_seed = stage_seeds(seed)
    text_tokens = tokenize_text(text)
    if not text_tokens:
        raise StageError("tokens", ValueError("text has no speakable characters"))

    # The token stage requires a unit prosody vector; the naive average is
    # projected here. The timbre vector reaches the decoder unchanged.
    prosody_in = _stage("tokens", normalize, fused.prosody)
    timbre_in = np.asarray(fused.timbre, dtype=np.float64)
    tokens = _stage("tokens", generate_tokens, text_tokens, prosody_in, backends.lm, lm_seed,
                    cfg.lm_guidance, backends)

    dec = backends.decoder

    def flow():
        if hasattr(dec, "decode"):
            return _call_backend(backends, dec, dec.decode, list(tokens.tokens), timbre_in,
                                 noise_seed, cfg.flow_steps, cfg.flow_guidance)
        n = dec.frames_for(tokens.tokens)
        x0 = np.random.default_rng(noise_seed).standard_normal((n, dec.n_mels))

        def field_fn(x, t, cond):
            with backends.guard(dec):
                return dec.velocity(x, t, tokens.tokens, cond)

        return integrate_flow(x0, field_fn, timbre_in, cfg.flow_steps, cfg.flow_guidance)

    mel = _stage("flow", flow)
    wav = _stage("vocode", vocode, mel, backends.vocoder, backends)
    prov = {
        "lm_seed": lm_seed,
        "noise_seed": noise_seed,
        "text": text,
        "prosody_conditioning": digest(prosody_in),
        "prosody_renormalized": bool(abs(np.linalg.norm(fused.prosody) - 1.0) > 1e-9),
        "timbre_conditioning": digest(timbre_in),
        "tokens_digest": digest(list(tokens.tokens)),
        "n_tokens": len(tokens),
        "mel_digest": digest(mel),
        "waveform_digest": digest(wav.samples),
    }
    return tokens, mel, wav, prov


def morph(
    spec: MorphSpec, backends: Backends, cfg: SynthesisConfig = SynthesisConfig()
) -> MorphResult:
    """Extract, fuse and synthesize one morph; errors carry the stage name."""
    a = _stage("extract", _ensure_profile, spec.pair[0], backends, cfg)
    b = _stage("extract", _ensure_profile, spec.pair[1], backends, cfg)
    fused = _stage("fuse", fuse_pair, a, b, spec.strategy)
    tokens, mel, wav, stage_prov = synthesize(fused, spec.text, backends, spec.seed, cfg)
    provenance = {
        "backends": backends.describe(),
        "seed": spec.seed,
        "strategy": spec.strategy.to_dict(),
        "synthesis": cfg.to_dict(),
        "source_ids": list(fused.source_ids),
        "source_digests": [_profile_digest(a), _profile_digest(b)],
        "omega_prosody": fused.omega_prosody,
        "omega_timbre": fused.omega_timbre,
    }
    provenance.update(stage_prov)
    provenance["config_digest"] = digest(
        provenance["backends"], spec.seed, provenance["strategy"], provenance["synthesis"],
        provenance["source_digests"], spec.text)
    return MorphResult(wav, fused, tokens, mel, provenance)


def render_voice(voice, text: str, backends: Backends, seed: int) -> Waveform:
    """Speak ``text`` with a toy voice's ground-truth embeddings (no fusion)."""
    fused = FusedEmbeddingPair(
        prosody=np.asarray(voice.prosody), timbre=np.asarray(voice.timbre),
        strategy=FusionStrategy(alpha=0.0), source_ids=(voice.speaker_id, voice.speaker_id),
        omega_prosody=0.0, omega_timbre=0.0)
    return synthesize(fused, text, backends, seed)[2]
