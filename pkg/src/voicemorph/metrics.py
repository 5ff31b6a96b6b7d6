"""Morph evaluation: FAD, log-mel KLD, WER, MMPMR and FMMPMR, plus reports."""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .audio import Waveform, log_mel
from .errors import EmptyReference, InsufficientData, ShapeError

SYMMETRY_TOL = 1e-9
KLD_BINS = 100
KLD_EPS = 1e-10


# ---------------------------------------------------------------------------
# Frechet distance


@dataclass(frozen=True, eq=False)
class GaussianStats:
    mean: np.ndarray
    covariance: np.ndarray
    n: int

    def __post_init__(self):
        mu = np.asarray(self.mean, dtype=np.float64)
        cov = np.atleast_2d(np.asarray(self.covariance, dtype=np.float64))
        if mu.ndim != 1 or cov.shape != (mu.shape[0], mu.shape[0]):
            raise ShapeError(f"mean {mu.shape} and covariance {cov.shape} disagree")
        if np.max(np.abs(cov - cov.T), initial=0.0) > SYMMETRY_TOL:
            raise ShapeError("covariance is not symmetric")
        if self.n < 2:
            raise InsufficientData("Gaussian statistics need at least 2 samples")
        object.__setattr__(self, "mean", mu)
        object.__setattr__(self, "covariance", cov)


def gaussian_stats(embeddings) -> GaussianStats:
    """Sample mean and unbiased covariance of a set of embedding vectors."""
    rows = [np.asarray(e, dtype=np.float64) for e in embeddings]
    if len(rows) < 2:
        raise InsufficientData(f"need at least 2 embeddings, got {len(rows)}")
    dims = {r.shape for r in rows}
    if len(dims) != 1 or rows[0].ndim != 1:
        raise ShapeError(f"embeddings must share one 1-D shape, got {sorted(dims)}")
    x = np.stack(rows)
    mu = x.mean(axis=0)
    d = x - mu
    cov = d.T @ d / (x.shape[0] - 1)
    return GaussianStats(mu, 0.5 * (cov + cov.T), x.shape[0])


def _psd_sqrt(m: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh(0.5 * (m + m.T))
    return (v * np.sqrt(np.maximum(w, 0.0))) @ v.T


def frechet_distance(a: GaussianStats, b: GaussianStats) -> float:
    """``|mu_a - mu_b|^2 + Tr(S_a + S_b - 2 (S_a S_b)^(1/2))``, clamped at 0.

    The cross term uses the symmetric form ``(S_a^(1/2) S_b S_a^(1/2))^(1/2)``
    whose eigenvalues are real; small negative ones from rounding are zeroed.
    """
    if a.mean.shape != b.mean.shape:
        raise ShapeError(f"dimension mismatch: {a.mean.shape[0]} vs {b.mean.shape[0]}")
    for s in (a, b):
        if np.max(np.abs(s.covariance - s.covariance.T), initial=0.0) > SYMMETRY_TOL:
            raise ShapeError("covariance is not symmetric")
    ra = _psd_sqrt(a.covariance)
    cross = ra @ b.covariance @ ra
    ev = np.linalg.eigvalsh(0.5 * (cross + cross.T))
    tr_sqrt = float(np.sum(np.sqrt(np.maximum(ev, 0.0))))
    diff = a.mean - b.mean
    out = float(diff @ diff + np.trace(a.covariance) + np.trace(b.covariance) - 2.0 * tr_sqrt)
    return max(out, 0.0)


def embedding_stats(waveforms: Iterable[Waveform], embedder) -> GaussianStats:
    """Pool the per-window embeddings of every clip and fit a Gaussian."""
    rows = []
    for w in waveforms:
        e = np.asarray(embedder.embed(w), dtype=np.float64)
        rows.extend(np.atleast_2d(e))
    return gaussian_stats(rows)


def fad(generated: Iterable[Waveform], reference: Iterable[Waveform], embedder) -> float:
    return frechet_distance(embedding_stats(generated, embedder),
                            embedding_stats(reference, embedder))


# ---------------------------------------------------------------------------
# KL divergence of log-mel histograms


def kl_divergence(p_hist, q_hist, eps: float = KLD_EPS) -> float:
    """``KL(P || Q)`` in nats after adding ``eps`` to every bin and normalizing."""
    p = np.asarray(p_hist, dtype=np.float64) + eps
    q = np.asarray(q_hist, dtype=np.float64) + eps
    if p.shape != q.shape or p.ndim != 1:
        raise ShapeError(f"histograms must share one 1-D shape: {p.shape} vs {q.shape}")
    p /= p.sum()
    q /= q.sum()
    return max(float(np.sum(p * np.log(p / q))), 0.0)


def kld_logmel(generated: Waveform, reference: Waveform, bins: int = KLD_BINS) -> float:
    """KL divergence between pooled log-mel value histograms (generated vs reference)."""
    g = log_mel(generated).frames.ravel()
    r = log_mel(reference).frames.ravel()
    lo = min(g.min(), r.min())
    hi = max(g.max(), r.max())
    if hi <= lo:
        return 0.0
    hp, _ = np.histogram(g, bins=bins, range=(lo, hi))
    hq, _ = np.histogram(r, bins=bins, range=(lo, hi))
    return kl_divergence(hp, hq)


# ---------------------------------------------------------------------------
# Word error rate

_PUNCT = re.compile(r"[^\w\s']")
_LOOSE_APOSTROPHE = re.compile(r"(?<!\w)'|'(?!\w)")


def normalize_words(text: str) -> list[str]:
    """Case-fold, drop punctuation (keeping in-word apostrophes), split."""
    t = _PUNCT.sub(" ", text.casefold()).replace("_", " ")
    return _LOOSE_APOSTROPHE.sub(" ", t).split()


def edit_distance(ref: Sequence[str], hyp: Sequence[str]) -> int:
    prev = list(range(len(hyp) + 1))
    for i, r in enumerate(ref, 1):
        cur = [i] + [0] * len(hyp)
        for j, h in enumerate(hyp, 1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (r != h))
        prev = cur
    return prev[-1]


def word_errors(reference_text: str, hypothesis_text: str) -> tuple[int, int]:
    """``(edits, reference word count)``; sums of these merge across utterances."""
    ref = normalize_words(reference_text)
    if not ref:
        raise EmptyReference("reference transcript has no words")
    return edit_distance(ref, normalize_words(hypothesis_text)), len(ref)


def wer(reference_text: str, hypothesis_text: str) -> float:
    edits, n = word_errors(reference_text, hypothesis_text)
    return edits / n


# ---------------------------------------------------------------------------
# Morph acceptance rates


def _pairs(morph_scores) -> np.ndarray:
    s = np.asarray(morph_scores, dtype=np.float64).reshape(-1, 2)
    if s.shape[0] == 0:
        raise InsufficientData("no morph scores")
    return s


def mmpmr(morph_scores, threshold: float) -> float:
    """Percentage of morphs accepted against at least one source."""
    s = _pairs(morph_scores)
    return 100.0 * float(np.mean(s.max(axis=1) > threshold))


def fmmpmr(morph_scores, threshold: float) -> float:
    """Percentage of morphs accepted against both sources."""
    s = _pairs(morph_scores)
    return 100.0 * float(np.mean(s.min(axis=1) > threshold))


# ---------------------------------------------------------------------------
# Reports


def _far_key(f: float) -> str:
    return repr(float(f))


@dataclass(frozen=True)
class MetricReport:
    fad_vs_real: float
    fad_vs_clone: float
    kld: float
    wer: float | None
    mmpmr: dict[float, float]
    fmmpmr: dict[float, float]
    n_morphs: int
    label: str = ""

    def __post_init__(self):
        if set(self.mmpmr) != set(self.fmmpmr):
            raise ValueError("mmpmr and fmmpmr must cover the same FAR targets")
        for f in self.mmpmr:
            if not 0.0 <= self.fmmpmr[f] <= self.mmpmr[f] <= 100.0:
                raise ValueError(f"rate invariant violated at FAR {f}: "
                                 f"fmmpmr={self.fmmpmr[f]} mmpmr={self.mmpmr[f]}")
        if self.wer is not None and self.wer < 0:
            raise ValueError("wer must be non-negative")

    @property
    def far_targets(self) -> list[float]:
        return sorted(self.mmpmr)

    def to_dict(self) -> dict:
        return {
            "label": self.label,
            "n_morphs": self.n_morphs,
            "fad_vs_real": self.fad_vs_real,
            "fad_vs_clone": self.fad_vs_clone,
            "kld": self.kld,
            "wer": self.wer,
            "wer_units": "fraction",
            "mmpmr": {_far_key(f): self.mmpmr[f] for f in self.far_targets},
            "fmmpmr": {_far_key(f): self.fmmpmr[f] for f in self.far_targets},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MetricReport":
        return cls(
            fad_vs_real=d["fad_vs_real"], fad_vs_clone=d["fad_vs_clone"], kld=d["kld"],
            wer=d["wer"], n_morphs=d["n_morphs"], label=d.get("label", ""),
            mmpmr={float(k): v for k, v in d["mmpmr"].items()},
            fmmpmr={float(k): v for k, v in d["fmmpmr"].items()},
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def _pct_label(f: float) -> str:
    return f"{100 * f:g}%"


def table_columns(far_targets: Sequence[float]) -> list[str]:
    cols = ["strategy", "n_morphs", "fad_vs_real", "fad_vs_clone", "kld", "wer"]
    cols += [f"mmpmr@{_pct_label(f)}" for f in far_targets]
    cols += [f"fmmpmr@{_pct_label(f)}" for f in far_targets]
    return cols


def _cells(r: MetricReport) -> list[str]:
    def num(x, fmt):
        return "null" if x is None else format(x, fmt)

    row = [r.label or "-", str(r.n_morphs), num(r.fad_vs_real, ".4f"),
           num(r.fad_vs_clone, ".4f"), num(r.kld, ".4f"), num(r.wer, ".4f")]
    row += [format(r.mmpmr[f], ".2f") for f in r.far_targets]
    row += [format(r.fmmpmr[f], ".2f") for f in r.far_targets]
    return row


def render_table(reports: Sequence[MetricReport]) -> str:
    """Aligned plain-text table, one row per report."""
    if not reports:
        return ""
    cols = table_columns(reports[0].far_targets)
    rows = [cols] + [_cells(r) for r in reports]
    widths = [max(len(row[i]) for row in rows) for i in range(len(cols))]
    lines = ["  ".join(c.rjust(w) if k else c.ljust(w) for k, (c, w) in
                       enumerate(zip(row, widths))).rstrip() for row in rows]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def render_tsv(reports: Sequence[MetricReport]) -> str:
    """Tab-separated comparison rows (ablation layout)."""
    if not reports:
        return ""
    lines = ["\t".join(table_columns(reports[0].far_targets))]
    lines += ["\t".join(_cells(r)) for r in reports]
    return "\n".join(lines) + "\n"


def report_schema() -> dict:
    text = resources.files("voicemorph").joinpath("schemas/metric_report.schema.json")
    return json.loads(text.read_text(encoding="utf-8"))


def validate_report(doc: dict) -> None:
    """Raise ``jsonschema.ValidationError`` if ``doc`` does not match the schema."""
    import jsonschema

    jsonschema.validate(doc, report_schema())


def load_report(path: str | Path) -> MetricReport:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    validate_report(doc)
    return MetricReport.from_dict(doc)
