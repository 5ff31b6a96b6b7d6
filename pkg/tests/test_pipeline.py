import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from voicemorph.audio import Waveform, log_mel
from voicemorph.embedding import ClipRef, SpeakerEmbedding, SpeakerProfile, cosine_similarity
from voicemorph.errors import (
    BackendError,
    ContractViolation,
    DegenerateEmbedding,
    NumericalError,
    StageError,
    TooShortError,
)
from voicemorph.interpolation import FusionStrategy
from voicemorph.synthesis import (
    MorphSpec,
    TokenSequence,
    asv_embedding,
    build_profile,
    extract_embeddings,
    generate_tokens,
    integrate_flow,
    morph,
    tokenize_text,
    toy_backends,
    vocode,
)
from voicemorph.synthesis import toy as toy_world
from voicemorph.synthesis.pipeline import guided, render_voice, stage_seeds

TEXT = "she sells sea shells by the sea shore"


@pytest.fixture(scope="module")
def voices():
    r = np.random.default_rng(3)
    a = toy_world.random_voice("a", "female", r)
    b = toy_world.random_voice("b", "female", r,
                               timbre=toy_world.timbre_at_angle(a.timbre, math.pi / 2, r))
    return a, b


@pytest.fixture(scope="module")
def profiles(voices, toy):
    out = []
    for v in voices:
        w = render_voice(v, TEXT, toy, seed=11)
        out.append(build_profile(v.speaker_id, v.gender, [(ClipRef("c", w.duration), w)], toy,
                                 min_duration=0.5))
    return out


class TestFlow:
    def test_constant_field_exact(self, rng):
        x0 = rng.standard_normal((5, 3))
        c = rng.standard_normal((5, 3))
        for steps in (1, 2, 7, 32):
            out = integrate_flow(x0, lambda x, t, cond: c, None, steps)
            np.testing.assert_allclose(out, x0 + c, atol=1e-12)

    def test_linear_path_field(self, rng):
        x0, target = rng.standard_normal((4, 4)), rng.standard_normal((4, 4))
        out = integrate_flow(x0, lambda x, t, cond: target - x0, None, 3)
        np.testing.assert_allclose(out, target, atol=1e-12)

    def test_exponential_convergence(self):
        x0 = np.array([1.0, -2.0])
        err = {}
        for n in (50, 100, 200):
            out = integrate_flow(x0, lambda x, t, c: x, None, n)
            err[n] = np.max(np.abs(out - x0 * math.e) / np.abs(x0 * math.e))
        assert err[100] <= 0.015
        assert err[100] / err[200] == pytest.approx(2.0, rel=0.2)
        assert math.log2(err[50] / err[100]) >= 0.8

    def test_cfg_algebra(self, rng):
        vu, vc = rng.standard_normal(6), rng.standard_normal(6)
        assert guided(vu, vc, 1.0) is vc
        assert guided(vu, vc, 0.0) is vu
        g = [guided(vu, vc, w) for w in (0.5, 1.5, 2.5)]
        np.testing.assert_allclose(g[1] - g[0], g[2] - g[1], atol=1e-12)

    def test_guidance_uses_both_fields(self):
        seen = []

        def field(x, t, cond):
            seen.append(cond)
            return np.ones_like(x) * (2.0 if cond is not None else 1.0)

        out = integrate_flow(np.zeros(2), field, "c", steps=2, guidance_scale=3.0)
        np.testing.assert_allclose(out, 1.0 + 3.0 * (2.0 - 1.0))
        assert None in seen and "c" in seen
        seen.clear()
        integrate_flow(np.zeros(2), field, "c", steps=2, guidance_scale=1.0)
        assert None not in seen

    def test_nonfinite(self):
        with pytest.raises(NumericalError, match="step 2"):
            integrate_flow(np.zeros(2), lambda x, t, c: np.array([1.0, np.nan if t > 0.4 else 0]),
                           None, 4)

    def test_bad_steps(self):
        with pytest.raises(ValueError):
            integrate_flow(np.zeros(2), lambda x, t, c: x, None, 0)


class TestTokens:
    def test_deterministic(self, voices):
        lm = toy_world.ToyTokenLM()
        tt = tokenize_text(TEXT)
        a = generate_tokens(tt, voices[0].prosody, lm, seed=5)
        b = generate_tokens(tt, voices[0].prosody, lm, seed=5)
        assert a == b and len(a) == 2 * len(tt)

    def test_empty_text(self, voices):
        assert len(generate_tokens([], voices[0].prosody, toy_world.ToyTokenLM(), 0)) == 0

    def test_prosody_changes_pitch_tokens(self):
        lm = toy_world.ToyTokenLM()
        tt = tokenize_text(TEXT)
        hi = generate_tokens(tt, toy_world.prosody_vector(22, 1, 0, 2), lm, 0)
        lo = generate_tokens(tt, toy_world.prosody_vector(8, 1, 0, 2), lm, 0)
        pc_hi = np.array(hi.tokens) // toy_world.N_LEVELS
        pc_lo = np.array(lo.tokens) // toy_world.N_LEVELS
        assert pc_hi.mean() > pc_lo.mean() + 10
        # loudness levels come from the text only
        np.testing.assert_array_equal(np.array(hi.tokens) % 4, np.array(lo.tokens) % 4)

    def test_prefix_only_dependency(self):
        """A token depends on history, text and prefix only (causality)."""
        lm = toy_world.ToyTokenLM()
        tt = tokenize_text(TEXT)
        prefix = lm.prosody_prefix(toy_world.prosody_vector(15, 1, -1, 3))
        hist = [5, 9, 13]
        a = lm.next_logits(prefix, tt, hist)
        tt2 = list(tt)
        tt2[-1] = (tt2[-1] + 1) % len(toy_world.ALPHABET)
        b = lm.next_logits(prefix, tt2, hist)
        np.testing.assert_array_equal(a, b)  # future text beyond position 3 is irrelevant here

    def test_out_of_vocab(self):
        class BadLM:
            name, vocab_size = "bad", 4

            def generate(self, text_tokens, prosody, seed, guidance):
                return [1, 2, 9]

        with pytest.raises(ContractViolation):
            generate_tokens([1, 2], np.array([1.0, 0.0]), BadLM(), 0)
        with pytest.raises(ContractViolation):
            TokenSequence((0, 4), 4)

    def test_requires_unit_prosody(self):
        with pytest.raises(DegenerateEmbedding):
            generate_tokens([1], np.array([1.0, 1.0]), toy_world.ToyTokenLM(), 0)

    def test_tokenize(self):
        assert tokenize_text("  A b!  ") == [1, 0, 2]
        assert tokenize_text("") == []


class TestExtraction:
    def test_deterministic_and_gain_invariant(self, voices, toy):
        w = render_voice(voices[0], TEXT, toy, 1)
        p1, t1 = extract_embeddings(w, toy, 0.5)
        p2, t2 = extract_embeddings(w, toy, 0.5)
        assert p1 == p2 and t1 == t2
        _, th = extract_embeddings(Waveform(0.5 * w.samples), toy, 0.5)
        assert cosine_similarity(t1, th) >= 0.999

    def test_default_floor(self, voices, toy):
        w = render_voice(voices[0], "a short one", toy, 1)
        assert w.duration < 5.0
        with pytest.raises(TooShortError):
            extract_embeddings(w, toy)

    def test_recovers_ground_truth(self, voices, toy):
        w = render_voice(voices[0], TEXT, toy, 1)
        p, t = extract_embeddings(w, toy, 0.5)
        assert cosine_similarity(t.values, voices[0].timbre) >= 0.99
        est = toy_world.prosody_stats(p.values)
        assert est[0] == pytest.approx(voices[0].prosody_stats[0], abs=1.5)

    def test_backend_failure_wrapped(self, voices, toy):
        class Broken:
            name, version, dim = "broken", "0", 16

            def encode(self, w):
                raise RuntimeError("model exploded")

        b = toy_backends(timbre_encoder=Broken())
        w = render_voice(voices[0], TEXT, toy, 1)
        with pytest.raises(BackendError, match="exploded"):
            extract_embeddings(w, b, 0.5)

    def test_declared_dim_enforced(self, voices, toy):
        class Wrong:
            name, version, dim = "wrong", "0", 8

            def encode(self, w):
                return np.ones(16)

        w = render_voice(voices[0], TEXT, toy, 1)
        with pytest.raises(ContractViolation):
            extract_embeddings(w, toy_backends(timbre_encoder=Wrong()), 0.5)


class TestVocoder:
    def test_round_trip_correlation(self, voices):
        tokens = generate_tokens(tokenize_text(TEXT), voices[0].prosody,
                                 toy_world.ToyTokenLM(), 2)
        m = toy_world.target_mel(tokens.tokens, voices[0].timbre)
        w = vocode(m, toy_world.ToyVocoder())
        back = log_mel(w).frames
        n = min(back.shape[0], m.shape[0])
        r = np.corrcoef(back[:n].ravel(), m[:n].ravel())[0, 1]
        assert r >= 0.9

    def test_floor_is_silent(self):
        m = np.full((30, 80), math.log(1e-10))
        w = vocode(m, toy_world.ToyVocoder())
        assert np.sqrt(np.mean(w.samples ** 2)) <= 1e-3

    def test_deterministic(self, voices):
        m = toy_world.target_mel([5, 9, 14, 2, 7], voices[0].timbre)
        a = vocode(m, toy_world.ToyVocoder())
        b = vocode(m, toy_world.ToyVocoder())
        np.testing.assert_array_equal(a.samples, b.samples)

    def test_rejects_nonfinite(self):
        with pytest.raises(NumericalError):
            vocode(np.full((3, 80), np.nan), toy_world.ToyVocoder())


class TestMorph:
    def sims(self, res, profiles, toy):
        e = asv_embedding(res.waveform, toy)
        return [cosine_similarity(e, p.timbre) for p in profiles]

    def test_alpha_zero_is_a(self, profiles, toy):
        res = morph(MorphSpec(tuple(profiles), TEXT, FusionStrategy(alpha=0.0), 1), toy)
        assert self.sims(res, profiles, toy)[0] >= 0.99

    def test_alpha_one_is_b(self, profiles, toy):
        res = morph(MorphSpec(tuple(profiles), TEXT, FusionStrategy(alpha=1.0), 1), toy)
        assert self.sims(res, profiles, toy)[1] >= 0.99

    def test_half_way(self, profiles, toy):
        res = morph(MorphSpec(tuple(profiles), TEXT, FusionStrategy(), 1), toy)
        omega = res.fused.omega_timbre
        for s in self.sims(res, profiles, toy):
            assert s == pytest.approx(math.cos(omega / 2), abs=0.05)

    def test_replay_bit_identical(self, profiles, toy):
        spec = MorphSpec(tuple(profiles), TEXT, FusionStrategy(), 99)
        a, b = morph(spec, toy), morph(spec, toy)
        np.testing.assert_array_equal(a.waveform.samples, b.waveform.samples)
        assert a.provenance == b.provenance
        for key in ("backends", "seed", "config_digest", "waveform_digest", "strategy"):
            assert key in a.provenance

    def test_stage_isolation(self, profiles, toy):
        """Prosody method moves the tokens only; timbre method moves the mel only."""
        pa, pb = profiles
        # alpha != 0.5 so that slerp and lerp differ
        base = morph(MorphSpec((pa, pb), TEXT, FusionStrategy("slerp", "slerp", 0.3), 4), toy)
        p_swap = morph(MorphSpec((pa, pb), TEXT, FusionStrategy("lerp", "slerp", 0.3), 4), toy)
        t_swap = morph(MorphSpec((pa, pb), TEXT, FusionStrategy("slerp", "lerp", 0.3), 4), toy)
        assert p_swap.provenance["prosody_conditioning"] != base.provenance["prosody_conditioning"]
        assert p_swap.provenance["timbre_conditioning"] == base.provenance["timbre_conditioning"]
        assert t_swap.provenance["timbre_conditioning"] != base.provenance["timbre_conditioning"]
        assert t_swap.provenance["prosody_conditioning"] == base.provenance["prosody_conditioning"]
        assert t_swap.tokens == base.tokens

    def test_errors_carry_stage(self, profiles, toy):
        class BadVocoder:
            name, version = "bad", "0"

            def vocode(self, mel):
                raise BackendError("no GPU", "cuda missing")

        with pytest.raises(StageError) as ei:
            morph(MorphSpec(tuple(profiles), TEXT, FusionStrategy(), 1),
                  toy_backends(vocoder=BadVocoder()))
        assert ei.value.stage == "vocode"
        assert ei.value.cause.diagnostics == "cuda missing"

    def test_antipodal_is_fuse_error(self, toy):
        x = np.zeros(16)
        x[0], x[1] = 1.0, -1.0
        mk = lambda sid, t: SpeakerProfile(sid, "male", (ClipRef("c", 5),), aggregated=(
            SpeakerEmbedding.from_vector("prosody", toy_prosody()),
            SpeakerEmbedding.from_vector("timbre", t)))
        with pytest.raises(StageError) as ei:
            morph(MorphSpec((mk("a", x), mk("b", -x)), TEXT, FusionStrategy(), 0), toy)
        assert ei.value.stage == "fuse"

    def test_empty_text_rejected(self, profiles):
        with pytest.raises(ValueError):
            MorphSpec(tuple(profiles), "   ")

    def test_seeds_split(self):
        a, b = stage_seeds(3)
        assert a != b and stage_seeds(3) == (a, b)


def toy_prosody():
    return toy_world.prosody_vector(12, 1, -0.5, 3)


@given(st.integers(0, 2**31))
def test_token_sequence_in_vocab(seed):
    r = np.random.default_rng(seed)
    stats = toy_world.random_prosody_stats("female" if seed % 2 else "male", r)
    seq = generate_tokens(tokenize_text("hello world"), toy_world.prosody_vector(*stats),
                          toy_world.ToyTokenLM(), seed)
    assert all(0 <= t < toy_world.VOCAB_SIZE for t in seq.tokens)
