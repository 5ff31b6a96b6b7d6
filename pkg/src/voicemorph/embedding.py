"""Speaker embedding types, unit-sphere geometry and the on-disk embedding format.

Embeddings live on the unit hypersphere. Prosody (speaking style) and timbre
(vocal identity) embeddings are kept apart by a ``kind`` tag so that the two
never get mixed by accident during fusion or scoring.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import DegenerateEmbedding, EmptyProfile, FormatError, KindError, ShapeError

NORM_TOL = 1e-9
MIN_NORM = 1e-12
MAX_PROFILE_CLIPS = 7


class Kind(str, enum.Enum):
    PROSODY = "prosody"
    TIMBRE = "timbre"


class Gender(str, enum.Enum):
    FEMALE = "female"
    MALE = "male"
    UNKNOWN = "unknown"


def _as_vector(values) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    if v.ndim != 1:
        raise ShapeError(f"expected a 1-D vector, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise DegenerateEmbedding("vector contains non-finite values")
    return v


def normalize(values) -> np.ndarray:
    """Scale ``values`` to unit Euclidean norm.

    Raises:
        DegenerateEmbedding: if the norm is at or below 1e-12 or any entry is
            non-finite.
    """
    v = _as_vector(values)
    n = float(np.linalg.norm(v))
    if n <= MIN_NORM:
        raise DegenerateEmbedding(f"cannot normalize vector with norm {n:.3g}")
    out = v / n
    # One more pass: dividing by the float norm can leave a 1-ulp error that the
    # second division removes, which makes normalize idempotent in practice.
    n2 = float(np.linalg.norm(out))
    if n2 != 1.0:
        out = out / n2
    return out


@dataclass(frozen=True, eq=False)
class SpeakerEmbedding:
    """A unit-norm speaker embedding of one kind.

    Use :meth:`from_vector` to build one from an arbitrary non-zero vector; the
    plain constructor expects values that are already unit-norm.
    """

    kind: Kind
    values: np.ndarray

    def __post_init__(self):
        kind = Kind(self.kind)
        v = _as_vector(self.values).copy()
        if v.shape[0] < 2:
            raise ShapeError("embedding dimensionality must be at least 2")
        if abs(float(np.linalg.norm(v)) - 1.0) > NORM_TOL:
            raise DegenerateEmbedding("SpeakerEmbedding values must be unit-norm")
        v.setflags(write=False)
        object.__setattr__(self, "kind", kind)
        object.__setattr__(self, "values", v)

    @classmethod
    def from_vector(cls, kind: Kind | str, values) -> "SpeakerEmbedding":
        return cls(Kind(kind), normalize(values))

    @property
    def dim(self) -> int:
        return int(self.values.shape[0])

    def __eq__(self, other):
        if not isinstance(other, SpeakerEmbedding):
            return NotImplemented
        return self.kind == other.kind and np.array_equal(self.values, other.values)

    def __hash__(self):
        return hash((self.kind, self.values.tobytes()))


def _check_pair(a: SpeakerEmbedding, b: SpeakerEmbedding) -> None:
    if a.dim != b.dim:
        raise ShapeError(f"dimension mismatch: {a.dim} vs {b.dim}")
    if a.kind != b.kind:
        raise KindError(f"kind mismatch: {a.kind.value} vs {b.kind.value}")


def _vec(x) -> np.ndarray:
    return x.values if isinstance(x, SpeakerEmbedding) else _as_vector(x)


def cosine_similarity(a, b) -> float:
    """Dot product of two unit vectors, clamped to [-1, 1].

    Accepts :class:`SpeakerEmbedding` instances (kinds must agree) or raw
    unit vectors.
    """
    if isinstance(a, SpeakerEmbedding) and isinstance(b, SpeakerEmbedding):
        _check_pair(a, b)
    va, vb = _vec(a), _vec(b)
    if va.shape != vb.shape:
        raise ShapeError(f"dimension mismatch: {va.shape[0]} vs {vb.shape[0]}")
    return float(np.clip(np.dot(va, vb), -1.0, 1.0))


def angle_between(a, b) -> float:
    """Geodesic angle in radians, in [0, pi].

    Equal to ``arccos`` of the clamped dot product for unit inputs, but evaluated
    as ``2 atan2(|a-b|, |a+b|)``, which keeps full precision near 0 and pi where
    arccos loses about half the significant digits.
    """
    cosine_similarity(a, b)  # validates shapes and kinds
    va, vb = _vec(a), _vec(b)
    return float(2.0 * np.arctan2(np.linalg.norm(va - vb), np.linalg.norm(va + vb)))


def aggregate_profile(embeddings: Sequence[SpeakerEmbedding]) -> SpeakerEmbedding:
    """Mean of per-clip embeddings, renormalized to the unit sphere."""
    if len(embeddings) == 0:
        raise EmptyProfile("cannot aggregate an empty list of embeddings")
    first = embeddings[0]
    for e in embeddings[1:]:
        _check_pair(first, e)
    if len(embeddings) == 1:
        return first
    mean = np.mean(np.stack([e.values for e in embeddings]), axis=0)
    if np.linalg.norm(mean) <= MIN_NORM:
        raise DegenerateEmbedding("clip embeddings cancel out")
    return SpeakerEmbedding.from_vector(first.kind, mean)


@dataclass(frozen=True)
class ClipRef:
    clip_id: str
    duration: float
    path: str | None = None


@dataclass(frozen=True)
class SpeakerProfile:
    """A speaker's reference clips, per-clip embeddings and aggregated pair."""

    speaker_id: str
    gender: Gender
    clips: tuple[ClipRef, ...]
    prosody_embeddings: tuple[SpeakerEmbedding, ...] = ()
    timbre_embeddings: tuple[SpeakerEmbedding, ...] = ()
    aggregated: tuple[SpeakerEmbedding, SpeakerEmbedding] | None = None

    def __post_init__(self):
        object.__setattr__(self, "gender", Gender(self.gender))
        object.__setattr__(self, "clips", tuple(self.clips))
        object.__setattr__(self, "prosody_embeddings", tuple(self.prosody_embeddings))
        object.__setattr__(self, "timbre_embeddings", tuple(self.timbre_embeddings))
        if not 1 <= len(self.clips) <= MAX_PROFILE_CLIPS:
            raise ShapeError(
                f"a profile holds 1..{MAX_PROFILE_CLIPS} clips, got {len(self.clips)}"
            )
        for e in self.prosody_embeddings:
            if e.kind is not Kind.PROSODY:
                raise KindError("prosody_embeddings must be prosody-kind")
        for e in self.timbre_embeddings:
            if e.kind is not Kind.TIMBRE:
                raise KindError("timbre_embeddings must be timbre-kind")
        if self.aggregated is not None:
            p, t = self.aggregated
            if p.kind is not Kind.PROSODY or t.kind is not Kind.TIMBRE:
                raise KindError("aggregated must be a (prosody, timbre) pair")

    @classmethod
    def from_embeddings(
        cls,
        speaker_id: str,
        gender: Gender | str,
        clips: Iterable[ClipRef],
        prosody: Sequence[SpeakerEmbedding],
        timbre: Sequence[SpeakerEmbedding],
    ) -> "SpeakerProfile":
        return cls(
            speaker_id=speaker_id,
            gender=Gender(gender),
            clips=tuple(clips),
            prosody_embeddings=tuple(prosody),
            timbre_embeddings=tuple(timbre),
            aggregated=(aggregate_profile(prosody), aggregate_profile(timbre)),
        )

    @property
    def prosody(self) -> SpeakerEmbedding:
        if self.aggregated is None:
            raise EmptyProfile(f"profile {self.speaker_id} has no embeddings")
        return self.aggregated[0]

    @property
    def timbre(self) -> SpeakerEmbedding:
        if self.aggregated is None:
            raise EmptyProfile(f"profile {self.speaker_id} has no embeddings")
        return self.aggregated[1]


# ---------------------------------------------------------------------------
# File format: little-endian float32 payload + ``.meta`` text sidecar.

META_KEYS = ("kind", "dim", "speaker_id", "clip_id", "encoder_name", "encoder_version")


def meta_path(path: str | Path) -> Path:
    return Path(path).with_suffix(".meta")


def write_meta(path: str | Path, meta: dict) -> None:
    lines = [f"{k}={meta[k]}" for k in meta]
    meta_path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_meta(path: str | Path) -> dict[str, str]:
    mp = meta_path(path)
    if not mp.exists():
        raise FormatError(f"missing sidecar {mp}")
    meta = {}
    for line in mp.read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise FormatError(f"bad sidecar line in {mp}: {line!r}")
        k, v = line.split("=", 1)
        meta[k.strip()] = v.strip()
    return meta


def save_vector(
    path: str | Path,
    values,
    *,
    kind: str,
    speaker_id: str = "",
    clip_id: str = "",
    encoder_name: str = "",
    encoder_version: str = "",
) -> None:
    """Write a raw vector (not necessarily unit-norm) in the embedding format."""
    v = np.asarray(values, dtype="<f4").ravel()
    Path(path).write_bytes(v.tobytes())
    write_meta(
        path,
        {
            "kind": kind,
            "dim": v.shape[0],
            "speaker_id": speaker_id,
            "clip_id": clip_id,
            "encoder_name": encoder_name,
            "encoder_version": encoder_version,
        },
    )


def load_vector(path: str | Path) -> tuple[np.ndarray, dict[str, str]]:
    meta = read_meta(path)
    for k in META_KEYS:
        if k not in meta:
            raise FormatError(f"sidecar for {path} lacks {k!r}")
    raw = Path(path).read_bytes()
    if len(raw) % 4:
        raise FormatError(f"{path}: payload is not a whole number of float32 values")
    v = np.frombuffer(raw, dtype="<f4").astype(np.float64)
    if v.shape[0] != int(meta["dim"]):
        raise FormatError(f"{path}: dim={meta['dim']} but payload has {v.shape[0]} values")
    return v, meta


def save_embedding(path: str | Path, emb: SpeakerEmbedding, **meta) -> None:
    save_vector(path, emb.values, kind=emb.kind.value, **meta)


def load_embedding(path: str | Path) -> tuple[SpeakerEmbedding, dict[str, str]]:
    """Load an embedding file; values are renormalized after float32 rounding."""
    v, meta = load_vector(path)
    try:
        kind = Kind(meta["kind"])
    except ValueError as exc:
        raise FormatError(f"{path}: unknown kind {meta['kind']!r}") from exc
    return SpeakerEmbedding.from_vector(kind, v), meta


_SHAPE_HEADER = struct.Struct("<II")


def save_matrix(path: str | Path, matrix, **meta) -> None:
    """Write a 2-D float32 matrix: ``<II`` shape header then row-major payload."""
    m = np.asarray(matrix, dtype="<f4")
    if m.ndim != 2:
        raise ShapeError(f"expected a matrix, got shape {m.shape}")
    Path(path).write_bytes(_SHAPE_HEADER.pack(*m.shape) + m.tobytes(order="C"))
    sidecar = {"kind": "mel", "dim": m.shape[1], "rows": m.shape[0]}
    sidecar.update(meta)
    write_meta(path, sidecar)


def load_matrix(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < _SHAPE_HEADER.size:
        raise FormatError(f"{path}: missing shape header")
    rows, cols = _SHAPE_HEADER.unpack_from(raw)
    body = raw[_SHAPE_HEADER.size:]
    if len(body) != rows * cols * 4:
        raise FormatError(f"{path}: header says {rows}x{cols} but payload differs")
    return np.frombuffer(body, dtype="<f4").reshape(rows, cols).astype(np.float64)
