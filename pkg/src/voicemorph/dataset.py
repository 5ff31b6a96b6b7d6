"""LibriSpeech-style corpus ingestion, morph-pair sampling and clip selection.

Expected layout (audio pre-converted to 16-bit PCM WAV)::

    root/
      SPEAKERS.TXT                      ; ID | SEX | SUBSET | MINUTES | NAME
      <subset>/<speaker>/<chapter>/<speaker>-<chapter>-<utt>.wav
      <subset>/<speaker>/<chapter>/<speaker>-<chapter>.trans.txt
"""

from __future__ import annotations

import enum
import json
import logging
import zlib
from dataclasses import dataclass
from itertools import combinations
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .audio import wav_duration
from .embedding import MAX_PROFILE_CLIPS, Gender
from .errors import FormatError, InsufficientData

log = logging.getLogger(__name__)

V1_WINDOW = (5.0, 20.0)
V2_TARGET = (60.0, 120.0)
V2_MIN_CLIP = 5.0

_SEX_CODES = {"F": Gender.FEMALE, "M": Gender.MALE}


class Protocol(str, enum.Enum):
    V1 = "v1"
    V2 = "v2"


@dataclass(frozen=True)
class Speaker:
    speaker_id: str
    gender: Gender
    subset: str = ""


@dataclass(frozen=True)
class Utterance:
    speaker_id: str
    clip_id: str
    path: str  # relative to the manifest's source_root
    duration: float
    transcript: str | None = None


@dataclass(frozen=True)
class CorpusManifest:
    speakers: tuple[Speaker, ...]
    utterances: tuple[Utterance, ...]
    source_root: str
    skipped: int = 0

    def __post_init__(self):
        object.__setattr__(self, "speakers", tuple(self.speakers))
        object.__setattr__(self, "utterances", tuple(self.utterances))
        known = {s.speaker_id for s in self.speakers}
        for u in self.utterances:
            if u.speaker_id not in known:
                raise FormatError(f"utterance {u.clip_id} has unknown speaker {u.speaker_id}")
            if not u.duration > 0:
                raise FormatError(f"utterance {u.clip_id} has non-positive duration")

    def speaker(self, speaker_id: str) -> Speaker:
        for s in self.speakers:
            if s.speaker_id == speaker_id:
                return s
        raise KeyError(speaker_id)

    def clips_of(self, speaker_id: str) -> list[Utterance]:
        return [u for u in self.utterances if u.speaker_id == speaker_id]

    def utterance(self, clip_id: str) -> Utterance:
        for u in self.utterances:
            if u.clip_id == clip_id:
                return u
        raise KeyError(clip_id)

    def abspath(self, utt: Utterance) -> Path:
        return Path(self.source_root) / utt.path

    # -- line-delimited JSON ------------------------------------------------

    def to_jsonl(self) -> str:
        lines = [json.dumps({"record": "corpus", "source_root": self.source_root,
                             "skipped": self.skipped}, sort_keys=True)]
        for s in self.speakers:
            lines.append(json.dumps({"record": "speaker", "speaker_id": s.speaker_id,
                                     "gender": s.gender.value, "subset": s.subset},
                                    sort_keys=True))
        for u in self.utterances:
            lines.append(json.dumps({"record": "utterance", "speaker_id": u.speaker_id,
                                     "clip_id": u.clip_id, "path": u.path,
                                     "duration": u.duration, "transcript": u.transcript},
                                    sort_keys=True))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_jsonl(cls, text: str) -> "CorpusManifest":
        root, skipped, speakers, utts = None, 0, [], []
        try:
            for n, line in enumerate(text.splitlines(), 1):
                if not line.strip():
                    continue
                rec = json.loads(line)
                kind = rec.get("record")
                if kind == "corpus":
                    root, skipped = rec["source_root"], int(rec.get("skipped", 0))
                elif kind == "speaker":
                    speakers.append(Speaker(rec["speaker_id"], Gender(rec["gender"]),
                                            rec.get("subset", "")))
                elif kind == "utterance":
                    utts.append(Utterance(rec["speaker_id"], rec["clip_id"], rec["path"],
                                          float(rec["duration"]), rec.get("transcript")))
                else:
                    raise FormatError(f"line {n}: unknown record type {kind!r}")
        except (json.JSONDecodeError, KeyError, ValueError) as exc:
            raise FormatError(f"malformed manifest: {exc}") from exc
        if root is None:
            raise FormatError("manifest lacks its corpus header record")
        return cls(tuple(speakers), tuple(utts), root, skipped)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_jsonl(), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "CorpusManifest":
        try:
            return cls.from_jsonl(Path(path).read_text(encoding="utf-8"))
        except OSError as exc:
            raise FormatError(f"cannot read manifest {path}: {exc}") from exc


def parse_speaker_table(text: str) -> dict[str, Speaker]:
    """Parse a pipe-delimited speaker table; ``;`` starts a comment line."""
    out = {}
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith(";"):
            continue
        cols = [c.strip() for c in line.split("|")]
        if len(cols) < 3 or not cols[0]:
            raise FormatError(f"bad speaker row: {line!r}")
        out[cols[0]] = Speaker(cols[0], _SEX_CODES.get(cols[1].upper(), Gender.UNKNOWN), cols[2])
    return out


def _read_transcripts(root: Path) -> dict[str, str]:
    out = {}
    for tf in sorted(root.rglob("*.trans.txt")):
        try:
            for line in tf.read_text(encoding="utf-8").splitlines():
                parts = line.strip().split(maxsplit=1)
                if parts:
                    out[parts[0]] = parts[1] if len(parts) > 1 else ""
        except (OSError, UnicodeDecodeError) as exc:
            log.warning("skipping transcript file %s: %s", tf, exc)
    return out


def _speaker_of(rel: Path) -> str:
    stem = rel.stem
    if "-" in stem:
        return stem.split("-", 1)[0]
    if len(rel.parts) >= 3:
        return rel.parts[-3]
    raise FormatError(f"cannot infer speaker for {rel}")


def ingest(root: str | Path, metadata_file: str | Path | None = None) -> CorpusManifest:
    """Enumerate every WAV utterance under ``root`` with its header duration.

    Speakers without any readable audio are left out. Unreadable files and
    files whose speaker is absent from the metadata are skipped and counted.

    Raises:
        FormatError: if the metadata file is missing or malformed, or no
            audio is found.
    """
    root = Path(root)
    if not root.is_dir():
        raise FormatError(f"corpus root {root} is not a directory")
    meta_path = Path(metadata_file) if metadata_file else root / "SPEAKERS.TXT"
    try:
        table = parse_speaker_table(meta_path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise FormatError(f"cannot read speaker metadata {meta_path}: {exc}") from exc

    transcripts = _read_transcripts(root)
    utts, skipped = [], 0
    for wav in sorted(root.rglob("*.wav")):
        rel = wav.relative_to(root)
        spk = _speaker_of(rel)
        if spk not in table:
            log.warning("skipping %s: speaker %s not in metadata", rel, spk)
            skipped += 1
            continue
        try:
            dur = wav_duration(wav)
        except (FormatError, OSError) as exc:
            log.warning("skipping unreadable audio %s: %s", rel, exc)
            skipped += 1
            continue
        utts.append(Utterance(spk, wav.stem, rel.as_posix(), dur, transcripts.get(wav.stem)))
    if not utts:
        raise FormatError(f"no readable WAV audio under {root}")
    if skipped:
        log.warning("ingest skipped %d file(s)", skipped)
    present = {u.speaker_id for u in utts}
    speakers = tuple(table[s] for s in sorted(table) if s in present)
    return CorpusManifest(speakers, tuple(utts), str(root.resolve()), skipped)


# ---------------------------------------------------------------------------
# Pair sampling


@dataclass(frozen=True)
class MorphPairList:
    pairs: tuple[tuple[str, str], ...]
    seed: int
    gender_constraint: bool = True

    def __post_init__(self):
        object.__setattr__(self, "pairs", tuple(tuple(p) for p in self.pairs))
        seen = set()
        for a, b in self.pairs:
            if a == b:
                raise ValueError(f"pair ({a}, {b}) repeats a speaker")
            key = frozenset((a, b))
            if key in seen:
                raise ValueError(f"pair ({a}, {b}) appears twice")
            seen.add(key)

    def __len__(self):
        return len(self.pairs)

    def to_tsv(self) -> str:
        lines = [f"# seed={self.seed}",
                 f"# gender_constraint={str(self.gender_constraint).lower()}",
                 "speaker_a\tspeaker_b"]
        lines += [f"{a}\t{b}" for a, b in self.pairs]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_tsv(cls, text: str) -> "MorphPairList":
        seed, constraint, pairs = None, True, []
        for line in text.splitlines():
            if line.startswith("#"):
                key, _, val = line[1:].strip().partition("=")
                if key == "seed":
                    seed = int(val)
                elif key == "gender_constraint":
                    constraint = val.strip() == "true"
                continue
            if not line.strip() or line.startswith("speaker_a"):
                continue
            cols = line.split("\t")
            if len(cols) != 2:
                raise FormatError(f"bad pair row: {line!r}")
            pairs.append((cols[0], cols[1]))
        if seed is None:
            raise FormatError("pair list lacks its seed header")
        return cls(tuple(pairs), seed, constraint)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_tsv(), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "MorphPairList":
        try:
            return cls.from_tsv(Path(path).read_text(encoding="utf-8"))
        except OSError as exc:
            raise FormatError(f"cannot read pair list {path}: {exc}") from exc


def eligible_pairs(speakers: Sequence[Speaker], same_gender: bool) -> list[tuple[str, str]]:
    """Sorted unordered pairs; with ``same_gender`` unknown-gender speakers drop out."""
    ordered = sorted(speakers, key=lambda s: s.speaker_id)
    if same_gender:
        ordered = [s for s in ordered if s.gender is not Gender.UNKNOWN]
    return [(a.speaker_id, b.speaker_id) for a, b in combinations(ordered, 2)
            if not same_gender or a.gender is b.gender]


def _draw(pool: list, n: int, rng: np.random.Generator, what: str) -> list:
    if n > len(pool):
        raise InsufficientData(
            f"requested {n} {what} but only {len(pool)} are eligible (short by {n - len(pool)})")
    idx = np.sort(rng.choice(len(pool), size=n, replace=False))
    return [pool[i] for i in idx]


def sample_pairs(
    manifest: CorpusManifest,
    n_pairs: int,
    seed: int,
    same_gender: bool = True,
    female_fraction: float | None = None,
    speakers: Iterable[str] | None = None,
) -> MorphPairList:
    """Uniform sample without replacement over eligible unordered speaker pairs.

    ``speakers`` restricts the candidates (e.g. to those with a usable clip).
    ``female_fraction`` fixes the share of female pairs; by default every
    eligible pair is equally likely.
    """
    if n_pairs < 1:
        raise ValueError("n_pairs must be at least 1")
    pool = list(manifest.speakers)
    if speakers is not None:
        keep = set(speakers)
        pool = [s for s in pool if s.speaker_id in keep]
    rng = np.random.default_rng(seed)
    if female_fraction is None:
        chosen = _draw(eligible_pairs(pool, same_gender), n_pairs, rng, "pairs")
    else:
        if not same_gender:
            raise ValueError("female_fraction requires same_gender pairs")
        n_f = int(round(n_pairs * female_fraction))
        by_g = {g: eligible_pairs([s for s in pool if s.gender is g], True)
                for g in (Gender.FEMALE, Gender.MALE)}
        chosen = (_draw(by_g[Gender.FEMALE], n_f, rng, "female pairs")
                  + _draw(by_g[Gender.MALE], n_pairs - n_f, rng, "male pairs"))
    return MorphPairList(tuple(chosen), seed, same_gender)


# ---------------------------------------------------------------------------
# Reference clip selection


def _speaker_rng(seed: int, speaker_id: str) -> np.random.Generator:
    return np.random.default_rng([seed, zlib.crc32(speaker_id.encode("utf-8"))])


def select_clips(
    manifest: CorpusManifest, speaker_id: str, protocol: Protocol | str, seed: int
) -> list[str]:
    """Reference clip ids for one speaker under the single- or multi-clip protocol.

    v1 picks the first clip, in seeded-shuffle order, lasting 5 to 20 s. v2
    walks the same kind of order and keeps each clip of at least 5 s that fits
    under the 120 s total, stopping at seven clips.
    """
    protocol = Protocol(protocol)
    manifest.speaker(speaker_id)  # KeyError for unknown speakers
    clips = sorted(manifest.clips_of(speaker_id), key=lambda u: u.clip_id)
    order = [clips[i] for i in _speaker_rng(seed, speaker_id).permutation(len(clips))]
    if protocol is Protocol.V1:
        lo, hi = V1_WINDOW
        for u in order:
            if lo <= u.duration <= hi:
                return [u.clip_id]
        raise InsufficientData(f"speaker {speaker_id} has no clip lasting {lo:g}-{hi:g} s")
    chosen, total = [], 0.0
    for u in order:
        if len(chosen) == MAX_PROFILE_CLIPS:
            break
        if u.duration >= V2_MIN_CLIP and total + u.duration <= V2_TARGET[1]:
            chosen.append(u.clip_id)
            total += u.duration
    if not chosen:
        raise InsufficientData(f"speaker {speaker_id} has no clip usable for a v2 profile")
    return chosen
