import itertools
import json
import math
import random

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from jsonschema import ValidationError
from scipy.stats import ortho_group

from oracles import count_rate, frechet_1d, frechet_diag, recursive_edit_distance
from voicemorph.audio import Waveform
from voicemorph.errors import EmptyReference, InsufficientData, ShapeError
from voicemorph.metrics import (
    GaussianStats,
    MetricReport,
    edit_distance,
    fad,
    fmmpmr,
    frechet_distance,
    gaussian_stats,
    kl_divergence,
    kld_logmel,
    load_report,
    mmpmr,
    normalize_words,
    render_table,
    render_tsv,
    table_columns,
    validate_report,
    wer,
    word_errors,
)

GRID = (0.0, 0.25, 0.5, 0.75, 1.0)
EXAMPLE = [(0.9, 0.2), (0.4, 0.5), (0.1, 0.1)]


class TestGaussianStats:
    def test_hand_example(self):
        g = gaussian_stats([(0, 0), (2, 0)])
        np.testing.assert_array_equal(g.mean, [1, 0])
        np.testing.assert_array_equal(g.covariance, [[2, 0], [0, 0]])
        assert g.n == 2

    def test_copies(self):
        g = gaussian_stats([np.array([0.3, -1.0, 2.0])] * 5)
        np.testing.assert_allclose(g.mean, [0.3, -1.0, 2.0])
        np.testing.assert_allclose(g.covariance, 0, atol=1e-15)

    def test_errors(self):
        with pytest.raises(ShapeError):
            gaussian_stats([(0, 0), (1, 2, 3)])
        with pytest.raises(InsufficientData):
            gaussian_stats([(0, 0)])
        with pytest.raises(ShapeError):
            GaussianStats(np.zeros(2), np.array([[1.0, 0.5], [0.0, 1.0]]), 3)

    def test_matches_numpy(self, rng):
        x = rng.standard_normal((40, 6))
        g = gaussian_stats(x)
        np.testing.assert_allclose(g.covariance, np.cov(x, rowvar=False), atol=1e-12)


def stats(mean, cov, n=10):
    return GaussianStats(np.atleast_1d(np.asarray(mean, float)), np.asarray(cov, float), n)


class TestFrechet:
    def test_identity(self, rng):
        g = gaussian_stats(rng.standard_normal((30, 8)))
        assert frechet_distance(g, g) == pytest.approx(0.0, abs=1e-8)

    def test_closed_forms(self):
        assert frechet_distance(stats([0], [[1]]), stats([1], [[1]])) == pytest.approx(1.0,
                                                                                      abs=1e-12)
        d = frechet_distance(stats([0, 0], np.eye(2)), stats([1, 1], 4 * np.eye(2)))
        assert d == pytest.approx(4.0, abs=1e-12)

    def test_dim_mismatch(self):
        with pytest.raises(ShapeError):
            frechet_distance(stats([0], [[1]]), stats([0, 0], np.eye(2)))

    def test_rank_deficient(self, rng):
        a = gaussian_stats(rng.standard_normal((3, 16)))
        b = gaussian_stats(rng.standard_normal((4, 16)))
        assert frechet_distance(a, b) >= 0.0

    @given(st.floats(-5, 5), st.floats(0.01, 9), st.floats(-5, 5), st.floats(0.01, 9))
    def test_1d_oracle(self, m1, v1, m2, v2):
        d = frechet_distance(stats([m1], [[v1]]), stats([m2], [[v2]]))
        assert d == pytest.approx(frechet_1d(m1, v1, m2, v2), abs=1e-8)

    @given(st.integers(0, 2**32 - 1), st.integers(1, 12))
    def test_diag_oracle(self, seed, dim):
        r = np.random.default_rng(seed)
        mu1, mu2 = r.normal(size=dim), r.normal(size=dim)
        v1, v2 = r.uniform(0.01, 4, dim), r.uniform(0.01, 4, dim)
        d = frechet_distance(stats(mu1, np.diag(v1)), stats(mu2, np.diag(v2)))
        assert d == pytest.approx(frechet_diag(mu1, v1, mu2, v2), abs=1e-8)

    @given(st.integers(0, 2**32 - 1), st.sampled_from([2, 5, 16]))
    def test_symmetry_and_rotation(self, seed, dim):
        r = np.random.default_rng(seed)
        xa = r.standard_normal((25, dim)) * r.uniform(0.5, 2, dim)
        xb = r.standard_normal((30, dim)) + 0.5
        a, b = gaussian_stats(xa), gaussian_stats(xb)
        d = frechet_distance(a, b)
        assert frechet_distance(b, a) == pytest.approx(d, abs=1e-8)
        q = ortho_group.rvs(dim, random_state=int(seed % 2**31))
        rot = frechet_distance(gaussian_stats(xa @ q.T), gaussian_stats(xb @ q.T))
        assert abs(rot - d) < 1e-6

    def test_fad_with_embedder(self, rng):
        class Identity:
            def embed(self, w):
                return w.samples.reshape(-1, 4)

        gen = [Waveform(rng.uniform(-0.5, 0.5, 40)) for _ in range(3)]
        assert fad(gen, gen, Identity()) == pytest.approx(0.0, abs=1e-8)
        ref = [Waveform(0.5 * w.samples + 0.2) for w in gen]
        assert fad(gen, ref, Identity()) > 0.1


class TestKLD:
    def test_hook_value(self):
        expected = 0.5 * math.log(2) + 0.5 * math.log(2 / 3)
        assert kl_divergence([0.5, 0.5], [0.25, 0.75]) == pytest.approx(expected, abs=1e-9)
        assert expected == pytest.approx(0.1438, abs=5e-5)

    def test_self_zero_and_gibbs(self, rng):
        for _ in range(1000):
            k = int(rng.integers(2, 30))
            p, q = rng.random(k), rng.random(k)
            p[rng.random(k) < 0.2] = 0.0
            assert kl_divergence(p, p) == pytest.approx(0.0, abs=1e-12)
            assert kl_divergence(p, q) >= 0.0

    def test_direction(self):
        p, q = [0.9, 0.1], [0.5, 0.5]
        assert kl_divergence(p, q) != pytest.approx(kl_divergence(q, p), abs=1e-6)

    def test_waveforms(self, rng):
        w = Waveform(rng.uniform(-0.3, 0.3, 8000))
        assert kld_logmel(w, w) == pytest.approx(0.0, abs=1e-12)
        other = Waveform(np.sin(np.arange(8000) * 0.05) * 0.3)
        assert kld_logmel(w, other) > 0.0

    def test_silence_pair(self):
        z = Waveform(np.zeros(4000))
        assert kld_logmel(z, z) == 0.0


class TestWER:
    def test_examples(self):
        assert wer("the cat sat", "the cat sat") == 0.0
        assert wer("the cat sat", "the bat sat") == pytest.approx(1 / 3)
        assert wer("a b", "") == 1.0
        with pytest.raises(EmptyReference):
            wer(" ,. ", "x")

    def test_normalization(self):
        assert normalize_words("Don't STOP, 'believing'!") == ["don't", "stop", "believing"]
        assert wer("Hello, world.", "hello world") == 0.0

    def test_insertions_can_exceed_one(self):
        assert wer("a", "b c d") == 3.0

    def test_oracle(self):
        r = random.Random(0)
        vocab = ["x", "y", "z"]
        for _ in range(500):
            ref = [r.choice(vocab) for _ in range(r.randint(0, 8))]
            hyp = [r.choice(vocab) for _ in range(r.randint(0, 8))]
            assert edit_distance(ref, hyp) == recursive_edit_distance(ref, hyp)
            if ref:
                assert wer(" ".join(ref), " ".join(hyp)) == pytest.approx(
                    recursive_edit_distance(ref, hyp) / len(ref))

    def test_corpus_merge(self):
        parts = [word_errors("a b c", "a c"), word_errors("d e", "d e f g")]
        assert sum(e for e, _ in parts) / sum(n for _, n in parts) == pytest.approx(3 / 5)


class TestRates:
    def test_examples(self):
        assert mmpmr(EXAMPLE, 0.45) == pytest.approx(200 / 3)
        assert mmpmr(EXAMPLE, -1) == 100.0
        assert mmpmr(EXAMPLE, 1) == 0.0
        assert fmmpmr(EXAMPLE, 0.45) == 0.0
        assert fmmpmr(EXAMPLE, 0.05) == 100.0
        assert fmmpmr([(1.0, 1.0)], 1.0) == 0.0

    def test_empty(self):
        with pytest.raises(InsufficientData):
            mmpmr([], 0.5)
        with pytest.raises(InsufficientData):
            fmmpmr([], 0.5)

    def test_small_lists_on_grid(self):
        """Exhaustive over unordered per-morph pairs; order and A/B swap are covered below."""
        kinds = list(itertools.combinations_with_replacement(GRID, 2))
        taus = (-1.0, 0.0, 0.25, 0.5, 0.6, 0.75, 1.0)
        n_lists = 0
        for size in range(1, 7):
            for lst in itertools.combinations_with_replacement(kinds, size):
                for tau in taus:
                    m, fm = mmpmr(lst, tau), fmmpmr(lst, tau)
                    assert m == pytest.approx(count_rate(lst, tau, both=False), abs=1e-9)
                    assert fm == pytest.approx(count_rate(lst, tau, both=True), abs=1e-9)
                    assert fm <= m
                n_lists += 1
        assert n_lists == 54263

    @given(st.lists(st.tuples(st.sampled_from(GRID), st.sampled_from(GRID)), min_size=1,
                    max_size=6), st.randoms())
    def test_order_and_swap_invariant(self, lst, r):
        shuffled = [(b, a) if r.random() < 0.5 else (a, b) for a, b in lst]
        r.shuffle(shuffled)
        for tau in GRID:
            assert mmpmr(shuffled, tau) == mmpmr(lst, tau)
            assert fmmpmr(shuffled, tau) == fmmpmr(lst, tau)

    @given(st.lists(st.tuples(st.floats(-1, 1), st.floats(-1, 1)), min_size=1, max_size=30),
           st.floats(-1, 1), st.floats(-1, 1))
    def test_monotone_in_threshold(self, lst, t1, t2):
        lo, hi = sorted((t1, t2))
        assert mmpmr(lst, hi) <= mmpmr(lst, lo)
        assert fmmpmr(lst, hi) <= fmmpmr(lst, lo)
        assert fmmpmr(lst, lo) <= mmpmr(lst, lo)


def report(**kw):
    base = dict(fad_vs_real=1.25, fad_vs_clone=0.5, kld=0.125, wer=None,
                mmpmr={0.0001: 80.0, 0.01: 100.0}, fmmpmr={0.0001: 60.0, 0.01: 95.0},
                n_morphs=20, label="slerp")
    base.update(kw)
    return MetricReport(**base)


class TestReport:
    def test_invariant(self):
        with pytest.raises(ValueError):
            report(fmmpmr={0.0001: 90.0, 0.01: 95.0})
        with pytest.raises(ValueError):
            report(fmmpmr={0.01: 95.0})
        with pytest.raises(ValueError):
            report(wer=-0.1)

    def test_dict_round_trip_and_schema(self, tmp_path):
        r = report(wer=0.19)
        d = r.to_dict()
        validate_report(d)
        assert d["wer_units"] == "fraction"
        assert MetricReport.from_dict(json.loads(r.to_json())) == r
        p = tmp_path / "r.json"
        p.write_text(r.to_json())
        assert load_report(p) == r

    def test_schema_rejects(self):
        d = report().to_dict()
        del d["kld"]
        with pytest.raises(ValidationError):
            validate_report(d)
        d = report().to_dict()
        d["mmpmr"]["0.01"] = 120.0
        with pytest.raises(ValidationError):
            validate_report(d)

    def test_table(self):
        rows = [report(), report(label="lerp", kld=0.25)]
        tsv = render_tsv(rows).splitlines()
        assert tsv[0].split("\t") == table_columns([0.0001, 0.01])
        assert tsv[0].split("\t")[-2:] == ["fmmpmr@0.01%", "fmmpmr@1%"]
        assert [line.split("\t")[0] for line in tsv[1:]] == ["slerp", "lerp"]
        assert tsv[1].split("\t")[5] == "null"
        text = render_table(rows).splitlines()
        assert len(text) == 4 and set(text[1]) <= {"-", " "}
        assert render_table([]) == ""
