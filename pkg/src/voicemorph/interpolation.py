"""Fusion of two speakers' embeddings: slerp, lerp and the naive average."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from .embedding import (
    Kind,
    SpeakerEmbedding,
    SpeakerProfile,
    _check_pair,
    _vec,
    angle_between,
    normalize,
)
from .errors import AntipodalEmbeddings, DegenerateEmbedding, ShapeError

ANTIPODAL_TOL = 1e-6
SMALL_ANGLE = 1e-7


class Method(str, enum.Enum):
    SLERP = "slerp"
    LERP = "lerp"
    LINEAR_AVERAGE = "linear_average"


@dataclass(frozen=True)
class FusionStrategy:
    prosody_method: Method = Method.SLERP
    timbre_method: Method = Method.SLERP
    alpha: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "prosody_method", Method(self.prosody_method))
        object.__setattr__(self, "timbre_method", Method(self.timbre_method))
        a = float(self.alpha)
        if not (0.0 <= a <= 1.0) or math.isnan(a):
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        object.__setattr__(self, "alpha", a)

    @property
    def name(self) -> str:
        if self.prosody_method == self.timbre_method:
            return self.prosody_method.value
        return f"{self.prosody_method.value}+{self.timbre_method.value}"

    @classmethod
    def parse(cls, text: str, alpha: float = 0.5) -> "FusionStrategy":
        """Parse ``"slerp"`` or ``"lerp+slerp"`` (prosody+timbre)."""
        parts = text.strip().split("+")
        if len(parts) == 1:
            parts = parts * 2
        if len(parts) != 2:
            raise ValueError(f"bad strategy {text!r}")
        return cls(Method(parts[0]), Method(parts[1]), alpha)

    def to_dict(self) -> dict:
        return {
            "prosody_method": self.prosody_method.value,
            "timbre_method": self.timbre_method.value,
            "alpha": self.alpha,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FusionStrategy":
        return cls(d.get("prosody_method", "slerp"), d.get("timbre_method", "slerp"),
                   d.get("alpha", 0.5))


def _pair_vectors(eA, eB) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(eA, SpeakerEmbedding) and isinstance(eB, SpeakerEmbedding):
        _check_pair(eA, eB)
    a, b = _vec(eA), _vec(eB)
    if a.shape != b.shape:
        raise ShapeError(f"dimension mismatch: {a.shape[0]} vs {b.shape[0]}")
    return a, b


def _wrap(result: np.ndarray, like):
    if isinstance(like, SpeakerEmbedding):
        return SpeakerEmbedding.from_vector(like.kind, result)
    return result


def _lerp_vec(a: np.ndarray, b: np.ndarray, alpha: float) -> np.ndarray:
    mix = (1.0 - alpha) * a + alpha * b
    if np.linalg.norm(mix) <= 1e-12:
        raise DegenerateEmbedding("lerp of antipodal embeddings cancels at this alpha")
    return normalize(mix)


def slerp(eA, eB, alpha: float):
    """Constant-speed geodesic interpolation from ``eA`` (alpha=0) to ``eB``.

    Nearly identical inputs (angle below 1e-7) fall back to :func:`lerp`.

    Raises:
        AntipodalEmbeddings: when the inputs are within 1e-6 rad of opposite,
            where no unique geodesic exists.
    """
    a, b = _pair_vectors(eA, eB)
    omega = angle_between(a, b)
    if omega > math.pi - ANTIPODAL_TOL:
        raise AntipodalEmbeddings(f"embeddings are antipodal (omega={omega:.9f})")
    if omega < SMALL_ANGLE:
        return _wrap(_lerp_vec(a, b, alpha), eA)
    s = math.sin(omega)
    out = (math.sin((1.0 - alpha) * omega) / s) * a + (math.sin(alpha * omega) / s) * b
    return _wrap(normalize(out), eA)


def lerp(eA, eB, alpha: float):
    """Convex combination of the two embeddings, projected back to the sphere."""
    a, b = _pair_vectors(eA, eB)
    return _wrap(_lerp_vec(a, b, alpha), eA)


def linear_average(eA, eB) -> np.ndarray:
    """Plain mean of the two vectors. Deliberately left off the sphere."""
    a, b = _pair_vectors(eA, eB)
    return (a + b) / 2.0


def fuse(eA, eB, method: Method | str, alpha: float) -> np.ndarray:
    method = Method(method)
    if method is Method.SLERP:
        out = slerp(eA, eB, alpha)
    elif method is Method.LERP:
        out = lerp(eA, eB, alpha)
    else:
        out = linear_average(eA, eB)
    return _vec(out).copy()


@dataclass(frozen=True, eq=False)
class FusedEmbeddingPair:
    """Morph conditioning vectors.

    ``prosody`` and ``timbre`` are plain vectors: they are unit-norm for slerp
    and lerp, but the linear average is kept as computed.
    """

    prosody: np.ndarray
    timbre: np.ndarray
    strategy: FusionStrategy
    source_ids: tuple[str, str]
    omega_prosody: float
    omega_timbre: float

    def embedding(self, kind: Kind | str) -> SpeakerEmbedding:
        """The fused vector of ``kind`` projected onto the unit sphere."""
        v = self.prosody if Kind(kind) is Kind.PROSODY else self.timbre
        return SpeakerEmbedding.from_vector(kind, v)


def fuse_pair(
    profile_a: SpeakerProfile, profile_b: SpeakerProfile, strategy: FusionStrategy
) -> FusedEmbeddingPair:
    pa, ta = profile_a.prosody, profile_a.timbre
    pb, tb = profile_b.prosody, profile_b.timbre
    prosody = fuse(pa, pb, strategy.prosody_method, strategy.alpha)
    timbre = fuse(ta, tb, strategy.timbre_method, strategy.alpha)
    prosody.setflags(write=False)
    timbre.setflags(write=False)
    return FusedEmbeddingPair(
        prosody=prosody,
        timbre=timbre,
        strategy=strategy,
        source_ids=(profile_a.speaker_id, profile_b.speaker_id),
        omega_prosody=angle_between(pa, pb),
        omega_timbre=angle_between(ta, tb),
    )
