"""Reproducible experiment runs over a run directory.

Layout of a run directory::

    config.json            effective configuration snapshot
    manifest.jsonl         corpus manifest
    pairs.tsv              sampled morph pairs (shared by every strategy)
    embeddings/            cached per-speaker profile and ASV embeddings
    morphs/<strategy>/     <job>.wav + <job>.json provenance
    clones/                <job>.A.wav / <job>.B.wav single-speaker renders (+ .json)
    scores/                impostor.tsv, <strategy>.tsv
    thresholds.json
    reports/               <strategy>.json / .txt, ablation.tsv / .txt
"""

from __future__ import annotations

import json
import logging
import os
import tempfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import asv, metrics
from .audio import Waveform, read_wav, write_wav
from .dataset import CorpusManifest, MorphPairList, Protocol, ingest, sample_pairs, select_clips
from .embedding import (
    ClipRef,
    SpeakerEmbedding,
    SpeakerProfile,
    aggregate_profile,
    load_embedding,
    save_embedding,
)
from .errors import BackendError, FormatError, InsufficientData, StageError, VoiceMorphError
from .interpolation import FusedEmbeddingPair, FusionStrategy
from .synthesis.backends import Backends, load_manifest, toy_backends
from .synthesis.pipeline import (
    MorphSpec,
    SynthesisConfig,
    asv_embedding,
    build_profile,
    digest,
    morph,
    synthesize,
)

log = logging.getLogger(__name__)

BACKENDS_ENV = "VOXMORPH_BACKENDS"
DEFAULT_TEXT = "the quick brown fox jumps over the lazy dog"

DEFAULTS = {
    "corpus_root": None,
    "metadata_file": None,
    "backends": None,
    "strategy": {"prosody_method": "slerp", "timbre_method": "slerp", "alpha": 0.5},
    "ablation_strategies": ["slerp", "lerp", "linear_average", "lerp+slerp", "slerp+lerp"],
    "protocol": "v1",
    "n_pairs": 20,
    "same_gender": True,
    "female_fraction": None,
    "far_targets": list(asv.DEFAULT_FAR_TARGETS),
    "seed": 0,
    "workers": 1,
    "text": None,
    "impostor_cap": 100000,
    "failure_budget": 0.1,
    "synthesis": SynthesisConfig().to_dict(),
}
# Keys that do not change any artifact.
_VOLATILE = ("workers", "output")


class UsageError(VoiceMorphError):
    """Bad invocation: missing prerequisite step, refused overwrite, bad config."""


class BatchFailed(VoiceMorphError):
    def __init__(self, message: str, backend_failures: int):
        super().__init__(message)
        self.backend_failures = backend_failures


# ---------------------------------------------------------------------------
# Config and files


def atomic_write_bytes(path: Path, data: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def atomic_write_text(path: Path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def atomic_write_wav(path: Path, wav: Waveform) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    os.close(fd)
    try:
        write_wav(wav, tmp)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def dumps(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def merge_config(*layers: dict) -> dict:
    out = json.loads(json.dumps(DEFAULTS))
    for layer in layers:
        for k, v in (layer or {}).items():
            if v is None and k in out and out[k] is not None:
                continue
            if isinstance(v, dict) and isinstance(out.get(k), dict):
                out[k] = {**out[k], **v}
            else:
                out[k] = v
    unknown = set(out) - set(DEFAULTS) - {"output"}
    if unknown:
        raise UsageError(f"unknown config keys: {sorted(unknown)}")
    return out


def validate_config(cfg: dict) -> None:
    try:
        FusionStrategy.from_dict(cfg["strategy"])
        Protocol(cfg["protocol"])
        for s in cfg["ablation_strategies"]:
            FusionStrategy.parse(s)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    if int(cfg["n_pairs"]) < 1:
        raise UsageError("n_pairs must be at least 1")
    if not cfg["far_targets"] or not all(0 < float(f) < 1 for f in cfg["far_targets"]):
        raise UsageError("far_targets must be non-empty fractions in (0, 1)")
    if int(cfg["workers"]) < 1:
        raise UsageError("workers must be at least 1")
    if not 0 <= float(cfg["failure_budget"]) <= 1:
        raise UsageError("failure_budget must lie in [0, 1]")


def config_digest(cfg: dict) -> str:
    return digest({k: v for k, v in cfg.items() if k not in _VOLATILE})


def resolve_backends(cfg: dict) -> Backends:
    path = cfg.get("backends") or os.environ.get(BACKENDS_ENV)
    if not path:
        return toy_backends()
    return load_manifest(path)


# ---------------------------------------------------------------------------
# Run directory


@dataclass
class Run:
    root: Path
    cfg: dict
    force: bool = False
    _backends: Backends | None = field(default=None, repr=False)

    @classmethod
    def open(cls, root: str | Path, overrides: dict | None = None, force: bool = False) -> "Run":
        root = Path(root)
        snapshot = {}
        if (root / "config.json").exists():
            try:
                snapshot = json.loads((root / "config.json").read_text(encoding="utf-8"))
            except json.JSONDecodeError as exc:
                raise FormatError(f"corrupt config snapshot: {exc}") from exc
        cfg = merge_config(snapshot, overrides or {})
        validate_config(cfg)
        run = cls(root, cfg, force)
        root.mkdir(parents=True, exist_ok=True)
        snap = {k: v for k, v in cfg.items() if k not in _VOLATILE}
        new = dumps(snap)
        cfg_path = root / "config.json"
        if not cfg_path.exists() or cfg_path.read_text(encoding="utf-8") != new:
            atomic_write_text(cfg_path, new)
        return run

    # -- paths --------------------------------------------------------------

    def path(self, *parts) -> Path:
        return self.root.joinpath(*parts)

    @property
    def backends(self) -> Backends:
        if self._backends is None:
            self._backends = resolve_backends(self.cfg)
        return self._backends

    @property
    def synthesis(self) -> SynthesisConfig:
        return SynthesisConfig(**self.cfg["synthesis"])

    @property
    def far_targets(self) -> list[float]:
        return sorted(float(f) for f in self.cfg["far_targets"])

    def manifest(self) -> CorpusManifest:
        p = self.path("manifest.jsonl")
        if not p.exists():
            raise UsageError(f"{p} not found; run the 'ingest' command first")
        return CorpusManifest.load(p)

    # -- ingest --------------------------------------------------------------

    def ingest(self) -> dict:
        out = self.path("manifest.jsonl")
        if out.exists() and not self.force:
            raise UsageError(f"{out} exists; pass --force to overwrite")
        root = self.cfg.get("corpus_root")
        if not root:
            raise UsageError("no corpus root given (config 'corpus_root' or --root)")
        m = ingest(root, self.cfg.get("metadata_file"))
        atomic_write_text(out, m.to_jsonl())
        return {"speakers": len(m.speakers), "utterances": len(m.utterances),
                "skipped": m.skipped}

    # -- profiles -------------------------------------------------------------

    def _clip_ids(self, m: CorpusManifest, speaker_id: str) -> list[str]:
        return select_clips(m, speaker_id, self.cfg["protocol"], int(self.cfg["seed"]))

    def usable_speakers(self, m: CorpusManifest) -> list[str]:
        out = []
        for s in m.speakers:
            try:
                self._clip_ids(m, s.speaker_id)
            except InsufficientData:
                continue
            out.append(s.speaker_id)
        return out

    def _embedding_path(self, speaker_id: str, kind: str) -> Path:
        return self.path("embeddings", f"{speaker_id}.{self.cfg['protocol']}.{kind}.f32")

    def _cached(self, speaker_id: str, kind: str, clip_key: str, encoder) -> SpeakerEmbedding | None:
        p = self._embedding_path(speaker_id, kind)
        if not p.exists():
            return None
        try:
            emb, meta = load_embedding(p)
        except FormatError:
            return None
        if (meta.get("clip_id") != clip_key or meta.get("encoder_name") != encoder.name
                or meta.get("encoder_version") != str(encoder.version)):
            return None
        return emb

    def _store(self, speaker_id: str, kind: str, clip_key: str, encoder, emb) -> None:
        p = self._embedding_path(speaker_id, kind)
        p.parent.mkdir(parents=True, exist_ok=True)
        save_embedding(p, emb, speaker_id=speaker_id, clip_id=clip_key,
                       encoder_name=encoder.name, encoder_version=str(encoder.version))

    def profile(self, m: CorpusManifest, speaker_id: str) -> tuple[SpeakerProfile, SpeakerEmbedding]:
        """Aggregated synthesis profile and ASV reference embedding for a speaker."""
        b = self.backends
        ids = self._clip_ids(m, speaker_id)
        key = ",".join(ids)
        utts = [m.utterance(c) for c in ids]
        clips = [ClipRef(u.clip_id, u.duration, str(m.abspath(u))) for u in utts]
        p = self._cached(speaker_id, "prosody", key, b.prosody_encoder)
        t = self._cached(speaker_id, "timbre", key, b.timbre_encoder)
        r = self._cached(speaker_id, "asv", key, b.asv_encoder)
        gender = m.speaker(speaker_id).gender
        if p is None or t is None or r is None:
            audio = [(c, read_wav(c.path)) for c in clips]
            prof = build_profile(speaker_id, gender, audio, b,
                                 self.synthesis.min_reference_duration)
            ref = aggregate_profile([asv_embedding(w, b) for _, w in audio])
            self._store(speaker_id, "prosody", key, b.prosody_encoder, prof.prosody)
            self._store(speaker_id, "timbre", key, b.timbre_encoder, prof.timbre)
            self._store(speaker_id, "asv", key, b.asv_encoder, ref)
            # Continue from the stored (float32) values so a fresh run and a
            # resumed one condition on exactly the same vectors.
            p = self._cached(speaker_id, "prosody", key, b.prosody_encoder)
            t = self._cached(speaker_id, "timbre", key, b.timbre_encoder)
            r = self._cached(speaker_id, "asv", key, b.asv_encoder)
        prof = SpeakerProfile(speaker_id, gender, tuple(clips), aggregated=(p, t))
        return prof, r

    # -- pairs -----------------------------------------------------------------

    def pairs(self, m: CorpusManifest) -> MorphPairList:
        p = self.path("pairs.tsv")
        if p.exists():
            pl = MorphPairList.load(p)
            if pl.seed == int(self.cfg["seed"]) and len(pl) == int(self.cfg["n_pairs"]):
                return pl
        pl = sample_pairs(m, int(self.cfg["n_pairs"]), int(self.cfg["seed"]),
                          bool(self.cfg["same_gender"]), self.cfg.get("female_fraction"),
                          speakers=self.usable_speakers(m))
        atomic_write_text(p, pl.to_tsv())
        return pl

    def _job_text(self, m: CorpusManifest, profile: SpeakerProfile) -> str:
        if self.cfg.get("text"):
            return self.cfg["text"]
        for c in profile.clips:
            t = m.utterance(c.clip_id).transcript
            if t and t.strip():
                return t.lower()
        return DEFAULT_TEXT

    # -- morph -----------------------------------------------------------------

    def morph(self, strategy: FusionStrategy | None = None) -> dict:
        strategy = strategy or FusionStrategy.from_dict(self.cfg["strategy"])
        m = self.manifest()
        pl = self.pairs(m)
        speakers = sorted({s for pair in pl.pairs for s in pair})
        profiles = {s: self.profile(m, s)[0] for s in speakers}
        out_dir = self.path("morphs", strategy.name)
        syn = self.synthesis
        b = self.backends
        base_seed = int(self.cfg["seed"])

        jobs = []
        for i, (a, bb) in enumerate(pl.pairs):
            job_id = f"{i:04d}_{a}_{bb}"
            seed = int(np.random.SeedSequence([base_seed, i]).generate_state(1)[0])
            spec = MorphSpec((profiles[a], profiles[bb]), self._job_text(m, profiles[a]),
                             strategy, seed)
            job_digest = digest(b.describe(), strategy.to_dict(), syn.to_dict(), seed, spec.text,
                                [profiles[a].prosody.values, profiles[a].timbre.values],
                                [profiles[bb].prosody.values, profiles[bb].timbre.values])
            jobs.append((job_id, spec, job_digest))

        def clone_digest(spec: MorphSpec, prof: SpeakerProfile) -> str:
            return digest(b.describe(), syn.to_dict(), spec.seed, spec.text,
                          prof.prosody.values, prof.timbre.values)

        def has(path: Path, key: str, value: str) -> bool:
            if not path.exists():
                return False
            try:
                return json.loads(path.read_text(encoding="utf-8")).get(key) == value
            except json.JSONDecodeError:
                return False

        def clone_ok(job_id: str, tag: str, spec: MorphSpec, prof: SpeakerProfile) -> bool:
            return (self.path("clones", f"{job_id}.{tag}.wav").exists()
                    and has(self.path("clones", f"{job_id}.{tag}.json"), "clone_digest",
                            clone_digest(spec, prof)))

        def done(job) -> bool:
            job_id, spec, job_digest = job
            return ((out_dir / f"{job_id}.wav").exists()
                    and has(out_dir / f"{job_id}.json", "job_digest", job_digest)
                    and all(clone_ok(job_id, t, spec, p) for t, p in zip("AB", spec.pair)))

        def run_job(job):
            job_id, spec, job_digest = job
            # Single-speaker clones do not depend on the fusion strategy, so
            # every strategy in an ablation shares them.
            for tag, prof in zip("AB", spec.pair):
                if clone_ok(job_id, tag, spec, prof):
                    continue
                clone = FusedEmbeddingPair(
                    prosody=prof.prosody.values, timbre=prof.timbre.values,
                    strategy=FusionStrategy(alpha=0.0), source_ids=(prof.speaker_id,) * 2,
                    omega_prosody=0.0, omega_timbre=0.0)
                wav = synthesize(clone, spec.text, b, spec.seed, syn)[2]
                atomic_write_wav(self.path("clones", f"{job_id}.{tag}.wav"), wav)
                atomic_write_text(self.path("clones", f"{job_id}.{tag}.json"),
                                  dumps({"speaker_id": prof.speaker_id,
                                         "clone_digest": clone_digest(spec, prof)}))
            if (out_dir / f"{job_id}.wav").exists() and has(
                    out_dir / f"{job_id}.json", "job_digest", job_digest):
                return
            res = morph(spec, b, syn)
            atomic_write_wav(out_dir / f"{job_id}.wav", res.waveform)
            record = {"job_id": job_id, "job_digest": job_digest,
                      "pair": list(res.fused.source_ids), "provenance": res.provenance}
            atomic_write_text(out_dir / f"{job_id}.json", dumps(record))

        todo = [j for j in jobs if not done(j)]
        failures: list[tuple[str, Exception]] = []

        def guarded(job):
            try:
                run_job(job)
                return None
            except VoiceMorphError as exc:
                log.error("job %s failed: %s", job[0], exc)
                return (job[0], exc)

        with ThreadPoolExecutor(max_workers=int(self.cfg["workers"])) as pool:
            for r in pool.map(guarded, todo):
                if r is not None:
                    failures.append(r)
        summary = {"strategy": strategy.name, "jobs": len(jobs),
                   "generated": len(todo) - len(failures), "skipped": len(jobs) - len(todo),
                   "failed": len(failures), "failed_jobs": [f[0] for f in failures]}
        if len(failures) > float(self.cfg["failure_budget"]) * len(jobs):
            n_backend = sum(_is_backend_error(e) for _, e in failures)
            raise BatchFailed(f"{len(failures)} of {len(jobs)} morph jobs failed "
                              f"(budget {self.cfg['failure_budget']:.0%}): "
                              f"{failures[0][0]}: {failures[0][1]}", n_backend)
        return summary

    # -- calibrate -------------------------------------------------------------

    def calibrate(self) -> dict:
        m = self.manifest()
        refs = [(s, self.profile(m, s)[1]) for s in self.usable_speakers(m)]
        trials = asv.build_impostor_trials(refs, int(self.cfg["seed"]),
                                           int(self.cfg["impostor_cap"]))
        table = asv.calibrate_thresholds([t.score for t in trials], self.far_targets)
        self.path("scores").mkdir(parents=True, exist_ok=True)
        tmp = self.path("scores", ".impostor.tsv.tmp")
        asv.write_scores(trials, tmp)
        os.replace(tmp, self.path("scores", "impostor.tsv"))
        atomic_write_text(self.path("thresholds.json"), dumps(table.to_dict()))
        return table.to_dict()

    def thresholds(self) -> asv.ThresholdTable:
        p = self.path("thresholds.json")
        if not p.exists():
            raise UsageError(f"{p} not found; run the 'calibrate' command first")
        return asv.ThresholdTable.load(p)

    # -- evaluate --------------------------------------------------------------

    def evaluate(self, strategy: FusionStrategy | None = None) -> metrics.MetricReport:
        strategy = strategy or FusionStrategy.from_dict(self.cfg["strategy"])
        table = self.thresholds()
        missing = [f for f in self.far_targets if f not in table.entries]
        if missing:
            raise UsageError(f"thresholds lack FAR targets {missing}; rerun 'calibrate'")
        m = self.manifest()
        pl = self.pairs(m)
        b = self.backends
        out_dir = self.path("morphs", strategy.name)
        refs: dict[str, tuple[SpeakerProfile, SpeakerEmbedding]] = {}
        for pair in pl.pairs:
            for s in pair:
                if s not in refs:
                    refs[s] = self.profile(m, s)

        morph_wavs, clone_wavs, scores, trials, klds = [], [], [], [], []
        errors_n = words_n = 0
        for i, (a, bb) in enumerate(pl.pairs):
            job_id = f"{i:04d}_{a}_{bb}"
            wav_path = out_dir / f"{job_id}.wav"
            if not wav_path.exists():
                continue
            record = json.loads((out_dir / f"{job_id}.json").read_text(encoding="utf-8"))
            w = read_wav(wav_path)
            morph_wavs.append(w)
            clone_wavs += [read_wav(self.path("clones", f"{job_id}.{x}.wav")) for x in "AB"]
            probe = asv_embedding(w, b)
            sa = asv.score(probe, refs[a][1])
            sb = asv.score(probe, refs[bb][1])
            scores.append((sa, sb))
            trials += [asv.Trial(job_id, a, sa, asv.Label.MATED),
                       asv.Trial(job_id, bb, sb, asv.Label.MATED)]
            src = [read_wav(refs[s][0].clips[0].path) for s in (a, bb)]
            klds.append(0.5 * (metrics.kld_logmel(w, src[0]) + metrics.kld_logmel(w, src[1])))
            if b.asr is not None:
                e, n = metrics.word_errors(record["provenance"]["text"], b.asr.transcribe(w))
                errors_n += e
                words_n += n
        if not scores:
            raise UsageError(f"no morphs found for strategy {strategy.name}; run 'morph' first")

        real = [read_wav(c.path) for s in sorted(refs) for c in refs[s][0].clips]
        report = metrics.MetricReport(
            fad_vs_real=metrics.fad(morph_wavs, real, b.fad_embedder),
            fad_vs_clone=metrics.fad(morph_wavs, clone_wavs, b.fad_embedder),
            kld=float(np.mean(klds)),
            wer=(errors_n / words_n) if b.asr is not None and words_n else None,
            mmpmr={f: metrics.mmpmr(scores, table.threshold(f)) for f in self.far_targets},
            fmmpmr={f: metrics.fmmpmr(scores, table.threshold(f)) for f in self.far_targets},
            n_morphs=len(scores),
            label=strategy.name,
        )
        scores_path = self.path("scores", f"{strategy.name}.tsv")
        scores_path.parent.mkdir(parents=True, exist_ok=True)
        tmp = scores_path.with_name(f".{scores_path.name}.tmp")
        asv.write_scores(trials, tmp)
        os.replace(tmp, scores_path)
        doc = report.to_dict()
        doc["pairs_digest"] = digest(pl.to_tsv())
        doc["config_digest"] = config_digest(self.cfg)
        doc["thresholds"] = {repr(f): table.threshold(f) for f in self.far_targets}
        doc["strategy"] = strategy.to_dict()
        metrics.validate_report(doc)
        atomic_write_text(self.path("reports", f"{strategy.name}.json"), dumps(doc))
        atomic_write_text(self.path("reports", f"{strategy.name}.txt"),
                          metrics.render_table([report]))
        return report

    # -- ablate / report -------------------------------------------------------

    def ablate(self, strategies: list[str] | None = None) -> list[metrics.MetricReport]:
        names = strategies or list(self.cfg["ablation_strategies"])
        alpha = float(self.cfg["strategy"].get("alpha", 0.5))
        parsed = [FusionStrategy.parse(s, alpha) for s in names]
        if len({p.name for p in parsed}) != len(parsed):
            raise UsageError("ablation strategies must be distinct")
        if not self.path("thresholds.json").exists():
            self.calibrate()
        reports = []
        for st in parsed:
            self.morph(st)
            reports.append(self.evaluate(st))
        m = self.manifest()
        header = f"# pairs_digest={digest(self.pairs(m).to_tsv())}\n"
        atomic_write_text(self.path("reports", "ablation.tsv"),
                          header + metrics.render_tsv(reports))
        atomic_write_text(self.path("reports", "ablation.txt"), metrics.render_table(reports))
        return reports

    def report(self) -> str:
        d = self.path("reports")
        paths = sorted(p for p in d.glob("*.json")) if d.exists() else []
        if not paths:
            raise UsageError(f"no reports under {d}; run 'evaluate' or 'ablate' first")
        reports = [metrics.load_report(p) for p in paths]
        text = metrics.render_table(reports)
        atomic_write_text(d / "summary.txt", text)
        return text


def _is_backend_error(exc: BaseException) -> bool:
    while isinstance(exc, StageError):
        exc = exc.cause
    return isinstance(exc, BackendError)


def exit_code_for(exc: BaseException) -> int:
    if isinstance(exc, UsageError):
        return 1
    if isinstance(exc, BatchFailed):
        return 3 if exc.backend_failures else 2
    if _is_backend_error(exc):
        return 3
    return 2

