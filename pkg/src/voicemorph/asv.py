"""Speaker-verification scoring, impostor trials and FAR-targeted thresholds.

The acceptance rule is strict everywhere: a trial is accepted when
``score > threshold``.
"""

from __future__ import annotations

import csv
import enum
import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .embedding import SpeakerEmbedding, cosine_similarity
from .errors import FormatError, InsufficientData

DEFAULT_FAR_TARGETS = (0.0001, 0.001, 0.01)


class Label(str, enum.Enum):
    MATED = "mated"
    NONMATED = "nonmated"


@dataclass(frozen=True)
class Trial:
    probe_id: str
    reference_id: str
    score: float
    label: Label = Label.NONMATED

    def __post_init__(self):
        object.__setattr__(self, "label", Label(self.label))
        s = float(self.score)
        if not math.isfinite(s):
            raise ValueError(f"trial score must be finite, got {self.score}")
        object.__setattr__(self, "score", s)


def score(probe: SpeakerEmbedding, reference: SpeakerEmbedding) -> float:
    """ASV match score: cosine similarity of verification embeddings."""
    return cosine_similarity(probe, reference)


def verify(score_value: float, threshold: float) -> bool:
    return score_value > threshold


def build_impostor_trials(
    references: Sequence[tuple[str, SpeakerEmbedding]],
    seed: int = 0,
    cap: int | None = None,
) -> list[Trial]:
    """Score every unordered pair of distinct speakers once.

    ``references`` holds ``(speaker_id, asv_embedding)`` items. When the number
    of pairs exceeds ``cap`` a seeded subsample of exactly ``cap`` pairs is kept,
    in canonical pair order.
    """
    refs = list(references)
    if len(refs) < 2:
        raise InsufficientData(f"need at least 2 speakers for impostor trials, got {len(refs)}")
    ids = [r[0] for r in refs]
    if len(set(ids)) != len(ids):
        raise ValueError("speaker ids must be distinct")
    ii, jj = np.triu_indices(len(refs), k=1)
    if cap is not None and ii.shape[0] > cap:
        keep = np.sort(np.random.default_rng(seed).choice(ii.shape[0], size=cap, replace=False))
        ii, jj = ii[keep], jj[keep]
    return [
        Trial(ids[i], ids[j], score(refs[i][1], refs[j][1]), Label.NONMATED)
        for i, j in zip(ii.tolist(), jj.tolist())
    ]


@dataclass(frozen=True)
class ThresholdTable:
    entries: dict[float, float]
    achieved_far: dict[float, float]
    calibration_size: int
    warnings: tuple[str, ...] = field(default=())

    def threshold(self, far_target: float) -> float:
        return self.entries[far_target]

    @property
    def targets(self) -> list[float]:
        return sorted(self.entries)

    def strictest_resolvable(self) -> float:
        """Smallest target with at least one expected false accept (N f >= 1)."""
        ok = [f for f in self.targets if self.calibration_size * f >= 1.0]
        if not ok:
            raise InsufficientData("no FAR target is resolvable with this calibration set")
        return ok[0]

    def to_dict(self) -> dict:
        return {
            "calibration_size": self.calibration_size,
            "operating_points": [
                {"far_target": f, "threshold": self.entries[f],
                 "achieved_far": self.achieved_far[f]}
                for f in self.targets
            ],
            "warnings": list(self.warnings),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ThresholdTable":
        try:
            pts = d["operating_points"]
            return cls(
                entries={float(p["far_target"]): float(p["threshold"]) for p in pts},
                achieved_far={float(p["far_target"]): float(p["achieved_far"]) for p in pts},
                calibration_size=int(d["calibration_size"]),
                warnings=tuple(d.get("warnings", ())),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"malformed threshold table: {exc}") from exc

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n",
                              encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "ThresholdTable":
        try:
            return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}: {exc}") from exc


def calibrate_thresholds(
    nonmated_scores: Iterable[float], far_targets: Sequence[float] = DEFAULT_FAR_TARGETS
) -> ThresholdTable:
    """Empirical-quantile thresholds that never exceed the target FAR.

    For each target ``f`` the threshold is the smallest observed score ``c``
    with ``#{s > c} / N <= f``. Since ``c = max`` always qualifies, a target
    with ``N f < 1`` resolves to the maximum score, achieved FAR 0, and a
    warning is recorded.
    """
    s = np.sort(np.asarray(list(nonmated_scores), dtype=np.float64))
    if s.shape[0] == 0:
        raise InsufficientData("cannot calibrate on an empty score set")
    if not np.all(np.isfinite(s)):
        raise ValueError("scores must be finite")
    n = s.shape[0]
    cand = np.unique(s)
    n_above = n - np.searchsorted(s, cand, side="right")
    far = n_above / n
    entries, achieved, notes = {}, {}, []
    for f in far_targets:
        f = float(f)
        if not 0.0 < f < 1.0:
            raise ValueError(f"FAR targets must lie in (0, 1), got {f}")
        k = int(np.argmax(far <= f))  # far is non-increasing and ends at 0
        entries[f] = float(cand[k])
        achieved[f] = float(far[k])
        if n * f < 1.0:
            msg = (f"FAR target {f:g} is unresolvable with {n} nonmated trials "
                   f"(N*f = {n * f:.3g} < 1); threshold set to the maximum score")
            notes.append(msg)
            warnings.warn(msg, stacklevel=2)
    return ThresholdTable(entries, achieved, n, tuple(notes))


# ---------------------------------------------------------------------------
# Score files

SCORE_COLUMNS = ("probe_id", "reference_id", "score", "label")


def write_scores(trials: Iterable[Trial], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(SCORE_COLUMNS)
        for t in trials:
            w.writerow([t.probe_id, t.reference_id, repr(t.score), t.label.value])


def read_scores(path: str | Path) -> list[Trial]:
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh, delimiter="\t"))
    if not rows or tuple(rows[0]) != SCORE_COLUMNS:
        raise FormatError(f"{path}: expected header {SCORE_COLUMNS}")
    try:
        return [Trial(r[0], r[1], float(r[2]), Label(r[3])) for r in rows[1:] if r]
    except (IndexError, ValueError) as exc:
        raise FormatError(f"{path}: bad score row: {exc}") from exc
