import itertools
import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import brute_threshold, random_unit
from voicemorph.asv import (
    Label,
    ThresholdTable,
    Trial,
    build_impostor_trials,
    calibrate_thresholds,
    read_scores,
    score,
    verify,
    write_scores,
)
from voicemorph.embedding import SpeakerEmbedding
from voicemorph.errors import FormatError, InsufficientData

TENTHS = [round(0.1 * k, 10) for k in range(1, 11)]


def emb(*v):
    return SpeakerEmbedding.from_vector("timbre", v)


def quiet_calibrate(scores, targets):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return calibrate_thresholds(scores, targets)


class TestScore:
    def test_examples(self):
        assert score(emb(1, 0), emb(1, 0)) == 1.0
        assert score(emb(1, 0), emb(0, 1)) == 0.0

    def test_matches_dot_product(self, rng):
        for _ in range(100):
            a, b = random_unit(rng, 16), random_unit(rng, 16)
            s = score(SpeakerEmbedding.from_vector("timbre", a),
                      SpeakerEmbedding.from_vector("timbre", b))
            assert abs(s) <= 1.0
            assert s == pytest.approx(float(a @ b), abs=1e-12)


class TestVerify:
    def test_strict(self):
        assert verify(0.91, 0.9)
        assert not verify(0.9, 0.9)
        assert not verify(-1.0, 0.0)


class TestImpostorTrials:
    def refs(self, rng, n):
        return [(f"s{i}", SpeakerEmbedding.from_vector("timbre", random_unit(rng, 8)))
                for i in range(n)]

    def test_three_speakers(self, rng):
        trials = build_impostor_trials(self.refs(rng, 3))
        assert [(t.probe_id, t.reference_id) for t in trials] == [
            ("s0", "s1"), ("s0", "s2"), ("s1", "s2")]
        assert all(t.label is Label.NONMATED for t in trials)

    def test_identical_embeddings(self):
        trials = build_impostor_trials([("a", emb(0.6, 0.8)), ("b", emb(0.6, 0.8))])
        assert len(trials) == 1 and trials[0].score == pytest.approx(1.0)

    def test_seeded_subsample(self, rng):
        refs = self.refs(rng, 142)  # 10011 pairs
        a = build_impostor_trials(refs, seed=4, cap=1000)
        b = build_impostor_trials(refs, seed=4, cap=1000)
        assert len(a) == 1000 and a == b
        assert a != build_impostor_trials(refs, seed=5, cap=1000)
        assert len({(t.probe_id, t.reference_id) for t in a}) == 1000

    def test_too_few(self, rng):
        with pytest.raises(InsufficientData):
            build_impostor_trials(self.refs(rng, 1))

    def test_trial_score_finite(self):
        with pytest.raises(ValueError):
            Trial("a", "b", float("nan"))


class TestCalibration:
    def test_tenths_at_ten_percent(self):
        t = calibrate_thresholds(TENTHS, [0.1])
        assert t.threshold(0.1) == pytest.approx(0.9)
        assert t.achieved_far[0.1] == pytest.approx(0.1)
        assert brute_threshold(TENTHS, 0.1)[0] == pytest.approx(0.9)

    def test_unresolvable_warns(self):
        with pytest.warns(UserWarning, match="unresolvable"):
            t = calibrate_thresholds(TENTHS, [0.0001])
        assert t.threshold(0.0001) == 1.0
        assert t.achieved_far[0.0001] == 0.0
        assert t.warnings

    def test_all_equal(self):
        t = quiet_calibrate([0.3] * 7, [0.0001, 0.01, 0.5])
        assert set(t.entries.values()) == {0.3}
        assert set(t.achieved_far.values()) == {0.0}

    def test_errors(self):
        with pytest.raises(InsufficientData):
            calibrate_thresholds([], [0.01])
        with pytest.raises(ValueError):
            calibrate_thresholds([0.1], [1.5])

    def test_strictest_resolvable(self):
        t = quiet_calibrate(np.linspace(0, 1, 500), [0.0001, 0.001, 0.01])
        assert t.strictest_resolvable() == 0.01
        t = quiet_calibrate(np.linspace(0, 1, 20), [0.0001])
        with pytest.raises(InsufficientData):
            t.strictest_resolvable()

    def test_table_round_trip(self, tmp_path):
        t = quiet_calibrate(np.linspace(-0.2, 0.8, 301), [0.0001, 0.001, 0.01])
        p = tmp_path / "thr.json"
        t.save(p)
        assert ThresholdTable.load(p) == t
        p.write_text("{}")
        with pytest.raises(FormatError):
            ThresholdTable.load(p)

    def test_exhaustive_small_sets(self):
        """Every multiset of size <= 12 over a 5-value grid against the brute-force scan."""
        grid = (0.0, 0.25, 0.5, 0.75, 1.0)
        targets = (0.0001, 0.01, 0.05, 0.1, 1 / 12, 0.2, 0.25, 1 / 3, 0.5, 0.75, 0.99)
        checked = 0
        for n in range(1, 13):
            for scores in itertools.combinations_with_replacement(grid, n):
                t = quiet_calibrate(scores, targets)
                for f in targets:
                    tau, far = brute_threshold(scores, f)
                    assert t.threshold(f) == tau
                    assert t.achieved_far[f] == pytest.approx(far)
                    assert t.achieved_far[f] <= f
                checked += 1
        assert checked == 6187

    @given(st.lists(st.floats(-1, 1), min_size=1, max_size=40),
           st.lists(st.floats(0.001, 0.999), min_size=2, max_size=5, unique=True))
    def test_monotone_and_sound(self, scores, targets):
        t = quiet_calibrate(scores, targets)
        fs = t.targets
        taus = [t.threshold(f) for f in fs]
        assert all(x >= y for x, y in zip(taus, taus[1:]))
        n = len(scores)
        for f in fs:
            assert sum(s > t.threshold(f) for s in scores) / n <= f

    @given(st.lists(st.floats(-1, 1), min_size=1, max_size=40), st.randoms())
    def test_permutation_invariant(self, scores, r):
        shuffled = list(scores)
        r.shuffle(shuffled)
        targets = [0.01, 0.1, 0.5]
        assert quiet_calibrate(scores, targets) == quiet_calibrate(shuffled, targets)


class TestScoreFiles:
    def test_round_trip(self, tmp_path, rng):
        trials = [Trial(f"p{i}", f"r{i}", float(rng.uniform(-1, 1)),
                        "mated" if i % 3 == 0 else "nonmated") for i in range(25)]
        p = tmp_path / "s.tsv"
        write_scores(trials, p)
        assert p.read_text().splitlines()[0] == "probe_id\treference_id\tscore\tlabel"
        assert read_scores(p) == trials

    def test_bad_header(self, tmp_path):
        p = tmp_path / "s.tsv"
        p.write_text("a\tb\n")
        with pytest.raises(FormatError):
            read_scores(p)
