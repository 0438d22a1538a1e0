import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import big_random, exhaustive_best, gnmt_coverage, teacher_forced
from dda.decode import (DecodeConfig, NmtScorer, ShallowScorer, beam_search, coverage_penalty, greedy_decode,
                        make_scorer, rescore, translate)
from dda.fusion import FusionModel
from dda.lm import LanguageModel, LmConfig
from dda.nmt import NmtConfig, TranslationModel
from dda.text import BOS, EOS


def toy_models(seed, V=4, H=4):
    nmt = big_random(TranslationModel(NmtConfig(V, H, H, 1)), seed)
    lm_in = big_random(LanguageModel(LmConfig(V, H, H, 1)), seed + 100)
    lm_out = big_random(LanguageModel(LmConfig(V, H, H, 1)), seed + 200)
    return nmt, lm_in, lm_out


def test_coverage_penalty_examples():
    assert coverage_penalty([[0.2, 0.8]], 0.0) == 0.0
    assert coverage_penalty([[0.5, 0.5], [0.5, 0.5], [0.1, 0.9]], 0.3) == 0.0
    hist = [[0.25, 0.75], [0.25, 0.45]]  # column sums 0.5, 1.2
    assert coverage_penalty(hist, 0.2) == pytest.approx(0.2 * math.log(0.5), abs=1e-15)
    assert coverage_penalty(hist, 0.2) == pytest.approx(-0.13863, abs=5e-6)


@given(st.integers(0, 10_000), st.floats(0, 1))
@settings(max_examples=60, deadline=None)
def test_coverage_penalty_matches_direct_sum(seed, beta):
    rng = np.random.default_rng(seed)
    rows = rng.dirichlet(np.ones(rng.integers(1, 6)), size=rng.integers(1, 5))
    value = coverage_penalty(rows, beta)
    assert value == pytest.approx(gnmt_coverage(list(rows), beta), abs=1e-12)
    assert value <= 0


def test_beam_one_is_greedy():
    for seed in range(5):
        nmt, _, _ = toy_models(seed, V=7, H=6)
        sc = NmtScorer(nmt)
        src = [4, 5, 6]
        h = beam_search(sc, src, DecodeConfig(beam_size=1, max_len=8))[0]
        assert h.tokens == greedy_decode(sc, src, 8)


def test_dda_shallow_with_zero_beta_matches_plain_decoding():
    nmt, lm_in, lm_out = toy_models(3, V=8, H=6)
    srcs = [[4, 5], [7, 6, 5, 4], [3]]
    plain = translate(NmtScorer(nmt), srcs, DecodeConfig(beam_size=3, max_len=6))
    fused = translate(ShallowScorer(nmt, lm_in, lm_out, 0.0), srcs, DecodeConfig(beam_size=3, max_len=6))
    assert [h.tokens for h in plain] == [h.tokens for h in fused]
    assert [h.score for h in plain] == [h.score for h in fused]


@pytest.mark.parametrize("mode", ["none", "lm-shallow", "dda-shallow"])
@pytest.mark.parametrize("cov", [0.0, 0.2])
def test_wide_beam_matches_exhaustive_search(mode, cov):
    # K=64 >= 4^3 keeps every prefix alive, so the search is exact on any model
    for seed in range(6):
        nmt, lm_in, lm_out = toy_models(seed)
        cfg = DecodeConfig(beam_size=64, max_len=3, fusion=mode, beta=0.7, coverage_beta=cov)
        sc = make_scorer(cfg, nmt, lm_in, lm_out)
        best = beam_search(sc, [2, 3, 1], cfg)[0]
        score, seq = exhaustive_best(sc, [2, 3, 1], 4, 3, cov)
        assert best.tokens[1:] == seq
        assert best.score == pytest.approx(score, abs=1e-9)


def test_returned_hypotheses_rescore_consistently():
    nmt, lm_in, lm_out = toy_models(5, V=9, H=6)
    for mode in ("none", "lm-shallow", "dda-shallow"):
        cfg = DecodeConfig(beam_size=4, max_len=7, fusion=mode, beta=0.5, coverage_beta=0.1)
        sc = make_scorer(cfg, nmt, lm_in, lm_out)
        for h in beam_search(sc, [4, 5, 6, 7], cfg):
            lp, score = rescore(sc, [4, 5, 6, 7], h.tokens, cfg)
            assert h.logprob == pytest.approx(lp, abs=1e-9)
            assert h.score == pytest.approx(score, abs=1e-9)
            lps, _ = teacher_forced(sc, [4, 5, 6, 7], h.tokens)
            assert h.logprob == pytest.approx(sum(lps), abs=1e-9)
            np.testing.assert_allclose(h.step_logprobs, lps, atol=1e-12)
            assert h.finished == (h.tokens[-1] == EOS)


def test_results_sorted_and_deterministic():
    nmt, lm_in, lm_out = toy_models(6, V=9, H=6)
    cfg = DecodeConfig(beam_size=5, max_len=6, fusion="dda-shallow", beta=0.3)
    sc = make_scorer(cfg, nmt, lm_in, lm_out)
    a = beam_search(sc, [4, 8], cfg)
    b = beam_search(sc, [4, 8], cfg)
    assert [h.tokens for h in a] == [h.tokens for h in b]
    assert [h.score for h in a] == sorted((h.score for h in a), reverse=True)
    assert len(a) <= 5


def test_wider_beam_not_worse_on_toy_models():
    for seed in range(10):
        nmt, _, _ = toy_models(seed, V=6, H=5)
        sc = NmtScorer(nmt)
        b1 = beam_search(sc, [4, 5], DecodeConfig(beam_size=1, max_len=5))[0]
        b8 = beam_search(sc, [4, 5], DecodeConfig(beam_size=8, max_len=5))[0]
        if b1.finished:
            assert b8.score >= b1.score - 1e-12


def test_unfinished_hypothesis_is_flagged():
    nmt = TranslationModel(NmtConfig(6, 4, 4, 1))
    nmt.out_b.data[:] = 0.0
    nmt.out_b.data[5] = 10.0  # always prefer token 5, never EOS
    h = beam_search(NmtScorer(nmt), [4], DecodeConfig(beam_size=2, max_len=3))
    assert len(h) == 1 and not h[0].finished and h[0].tokens == [BOS, 5, 5, 5]


def _constant_lm(V, logp):
    lm = LanguageModel(LmConfig(V, 4, 4, 1))
    lm.out_b.data[:] = logp
    return lm


def test_dda_shallow_prefers_in_domain_word():
    V, w, w2 = 6, 4, 5
    nmt = TranslationModel(NmtConfig(V, 4, 4, 1))
    nmt.out_b.data[:] = np.log([1e-3, 1e-3, 0.1, 1e-3, 0.44, 0.45])
    lp_in = np.log([0.1, 0.1, 0.1, 0.1, 0.5, 0.1])
    lp_out = lp_in.copy()
    lp_out[w] = np.log(0.05)
    lm_in, lm_out = _constant_lm(V, lp_in), _constant_lm(V, lp_out)
    plain = beam_search(NmtScorer(nmt), [4], DecodeConfig(beam_size=1, max_len=1))[0]
    fused_sc = ShallowScorer(nmt, lm_in, lm_out, 1.0)
    fused = beam_search(fused_sc, [4], DecodeConfig(beam_size=1, max_len=1))[0]
    assert plain.tokens[1] == w2 and fused.tokens[1] == w
    logp_nmt, _, _ = NmtScorer(nmt).step(NmtScorer(nmt).start([4]), np.array([BOS]))
    logp_f, _, _ = fused_sc.step(fused_sc.start([4]), np.array([BOS]))
    shift = (logp_f[0, w] - logp_f[0, w2]) - (logp_nmt[0, w] - logp_nmt[0, w2])
    assert shift == pytest.approx(math.log(10.0), abs=1e-12)


def test_deep_scorer_decodes(tiny_models):
    nmt, lm_in, lm_out = tiny_models
    fm = FusionModel(nmt, [lm_out, lm_in])
    cfg = DecodeConfig(beam_size=3, max_len=5, fusion="deep")
    sc = make_scorer(cfg, fusion_model=fm)
    h = beam_search(sc, [4, 5], cfg)[0]
    assert h.logprob == pytest.approx(rescore(sc, [4, 5], h.tokens, cfg)[0], abs=1e-9)


def test_length_normalisation_changes_ranking_only_when_enabled():
    nmt, _, _ = toy_models(2, V=7, H=5)
    sc = NmtScorer(nmt)
    h = beam_search(sc, [4, 5], DecodeConfig(beam_size=4, max_len=6, length_alpha=0.6))[0]
    lp, score = rescore(sc, [4, 5], h.tokens, DecodeConfig(length_alpha=0.6))
    assert h.score == pytest.approx(score, abs=1e-9) and h.logprob == pytest.approx(lp, abs=1e-9)


def test_config_validation():
    with pytest.raises(ValueError):
        DecodeConfig(beam_size=0)
    with pytest.raises(ValueError):
        DecodeConfig(max_len=0)
    with pytest.raises(ValueError):
        DecodeConfig(fusion="cold")
    with pytest.raises(ValueError):
        DecodeConfig(coverage_beta=-0.1)
    with pytest.raises(ValueError):
        make_scorer(DecodeConfig(fusion="dda-shallow"), TranslationModel(NmtConfig(5, 4, 4, 1)))
