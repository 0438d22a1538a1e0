"""Beam search over a translation model or any fusion configuration."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np

from . import autograd as ag
from .fusion import FusionModel, FusionState, dda_shallow_log_probs, lm_shallow_log_probs
from .lm import LanguageModel
from .nmt import EncoderOutput, TranslationModel
from .nn import State, select_state
from .text import BOS, EOS, pad

log = logging.getLogger(__name__)

FUSION_MODES = ("none", "lm-shallow", "dda-shallow", "deep")


@dataclass
class DecodeConfig:
    beam_size: int = 5
    max_len: int = 100
    fusion: str = "none"
    beta: float = 0.4
    coverage_beta: float = 0.0
    length_alpha: float = 0.0  # 0 disables length normalisation

    def __post_init__(self):
        if self.beam_size < 1:
            raise ValueError("beam_size must be >= 1")
        if self.max_len < 1:
            raise ValueError("max_len must be >= 1")
        if self.fusion not in FUSION_MODES:
            raise ValueError(f"unknown fusion mode {self.fusion!r}")
        if self.coverage_beta < 0:
            raise ValueError("coverage_beta must be >= 0")


@dataclass
class Hypothesis:
    tokens: list[int]
    logprob: float
    score: float
    attention: list[np.ndarray] = field(default_factory=list)
    step_logprobs: list[float] = field(default_factory=list)
    finished: bool = False
    states: object | None = None

    @property
    def output(self) -> list[int]:
        """Generated ids without BOS/EOS."""
        return [t for t in self.tokens[1:] if t != EOS]


def coverage_penalty(attention_history, beta: float) -> float:
    """beta * sum_j log(min(sum_t a[t, j], 1)); zero when every source position is covered."""
    if beta == 0:
        return 0.0
    hist = np.asarray(attention_history, dtype=np.float64)
    if hist.size == 0:
        return 0.0
    sums = hist.reshape(-1, hist.shape[-1]).sum(axis=0)
    return float(beta * np.sum(np.log(np.minimum(sums, 1.0))))


def _coverage_rows(colsums: np.ndarray, beta: float) -> np.ndarray:
    if beta == 0:
        return np.zeros(colsums.shape[0])
    with np.errstate(divide="ignore"):
        return beta * np.sum(np.log(np.minimum(colsums, 1.0)), axis=1)


def length_penalty(length: int, alpha: float) -> float:
    return ((5.0 + length) / 6.0) ** alpha


class Scorer(Protocol):
    def start(self, src: Sequence[int]): ...

    def step(self, state, prev: np.ndarray) -> tuple[np.ndarray, np.ndarray, object]: ...

    def select(self, state, rows: np.ndarray): ...


def _encode_one(nmt: TranslationModel, src: Sequence[int]) -> EncoderOutput:
    ids, mask = pad([list(src)])
    return nmt.encode(ids, mask)


class NmtScorer:
    def __init__(self, nmt: TranslationModel):
        self.nmt = nmt

    def start(self, src):
        with ag.no_grad():
            enc = _encode_one(self.nmt, src)
        return enc, self.nmt.initial_decoder_state(enc)

    def step(self, state, prev):
        enc, dec = state
        with ag.no_grad():
            out = self.nmt.decoder_step(enc, prev, dec)
            logp = ag.log_softmax_np(self.nmt.logits(out.hidden).data)
        return logp, out.attention, (enc, out.state)

    def select(self, state, rows):
        enc, dec = state
        return enc.select(rows), dec.select(rows)


class ShallowScorer:
    """NMT distribution rescored by LM-in (lm-shallow) or by LM-in minus LM-out (dda-shallow)."""

    def __init__(self, nmt: TranslationModel, lm_in: LanguageModel, lm_out: LanguageModel | None,
                 beta: float, mode: str = "dda-shallow"):
        if mode == "dda-shallow" and lm_out is None:
            raise ValueError("dda-shallow needs an out-of-domain LM")
        self.base = NmtScorer(nmt)
        self.lm_in = lm_in
        self.lm_out = lm_out if mode == "dda-shallow" else None
        self.beta = beta
        self.mode = mode

    def _lm_logp(self, lm: LanguageModel, prev, state: State):
        h, state, _ = lm.step(prev, state)
        return ag.log_softmax_np(lm.logits(h).data), state

    def start(self, src):
        lms = [self.lm_in] + ([self.lm_out] if self.lm_out is not None else [])
        return self.base.start(src), [lm.initial_state(1) for lm in lms]

    def step(self, state, prev):
        base_state, lm_states = state
        logp, attn, base_state = self.base.step(base_state, prev)
        with ag.no_grad():
            lp_in, s_in = self._lm_logp(self.lm_in, prev, lm_states[0])
            new_lm = [s_in]
            if self.mode == "dda-shallow":
                lp_out, s_out = self._lm_logp(self.lm_out, prev, lm_states[1])
                new_lm.append(s_out)
                fused = dda_shallow_log_probs(logp, lp_in, lp_out, self.beta)
            else:
                fused = lm_shallow_log_probs(logp, lp_in, self.beta)
        return fused, attn, (base_state, new_lm)

    def select(self, state, rows):
        base_state, lm_states = state
        return self.base.select(base_state, rows), [select_state(s, rows) for s in lm_states]


class DeepScorer:
    def __init__(self, model: FusionModel):
        self.model = model

    def start(self, src):
        with ag.no_grad():
            return self.model.start(_encode_one(self.model.nmt, src))

    def step(self, state: FusionState, prev):
        with ag.no_grad():
            logits, attn, state, _ = self.model.step(state, prev)
            logp = ag.log_softmax_np(logits.data)
        return logp, attn, state

    def select(self, state: FusionState, rows):
        return state.select(rows)


def make_scorer(cfg: DecodeConfig, nmt: TranslationModel | None = None, lm_in: LanguageModel | None = None,
                lm_out: LanguageModel | None = None, fusion_model: FusionModel | None = None) -> Scorer:
    if cfg.fusion == "deep":
        if fusion_model is None:
            raise ValueError("deep fusion decoding needs a fusion model")
        return DeepScorer(fusion_model)
    if nmt is None:
        raise ValueError("decoding needs a translation model")
    if cfg.fusion == "none":
        return NmtScorer(nmt)
    if lm_in is None:
        raise ValueError(f"{cfg.fusion} needs an in-domain LM")
    for lm in (lm_in, lm_out):
        if lm is not None and lm.config.vocab_size != nmt.config.vocab_size:
            raise ValueError("component vocabularies differ")
    return ShallowScorer(nmt, lm_in, lm_out, cfg.beta, cfg.fusion)


def _rank_score(cum: np.ndarray, length: int, cfg: DecodeConfig) -> np.ndarray:
    if cfg.length_alpha:
        return cum / length_penalty(length, cfg.length_alpha)
    return cum


def beam_search(scorer: Scorer, src: Sequence[int], cfg: DecodeConfig) -> list[Hypothesis]:
    """Return up to ``beam_size`` finished hypotheses, best first.

    At each step every live hypothesis is expanded over the whole
    vocabulary and the top ``beam_size`` candidates survive, ranked by
    cumulative log-probability plus coverage penalty; ties go to the lower
    token id, then the lower parent index. Candidates ending in EOS retire,
    shrinking the beam. If nothing finishes within ``max_len`` the best
    unfinished hypothesis is returned with ``finished=False``.
    """
    K = cfg.beam_size
    S = len(src)
    state = scorer.start(src)
    tokens = [[BOS]]
    cum = np.zeros(1)
    colsums = np.zeros((1, S))
    attn_hist: list[list[np.ndarray]] = [[]]
    step_lps: list[list[float]] = [[]]
    finished: list[Hypothesis] = []
    live_scores = np.zeros(1)
    for t in range(cfg.max_len):
        slots = K - len(finished)
        if slots <= 0 or not tokens:
            break
        prev = np.array([tk[-1] for tk in tokens], dtype=np.int64)
        logp, attn, state = scorer.step(state, prev)
        n, V = logp.shape
        new_cols = colsums + attn
        cand_cum = cum[:, None] + logp
        score = _rank_score(cand_cum, t + 1, cfg) + _coverage_rows(new_cols, cfg.coverage_beta)[:, None]
        flat = score.ravel()
        tok = np.tile(np.arange(V), n)
        par = np.repeat(np.arange(n), V)
        order = np.lexsort((par, tok, -flat))[:slots]
        keep_rows, next_tokens, next_cum, next_scores = [], [], [], []
        next_attn, next_lps = [], []
        for k in order:
            i, v = int(par[k]), int(tok[k])
            hist = attn_hist[i] + [attn[i]]
            lps = step_lps[i] + [float(logp[i, v])]
            if v == EOS:
                finished.append(Hypothesis(tokens[i] + [v], float(cand_cum[i, v]), float(flat[k]),
                                           hist, lps, True))
            else:
                keep_rows.append(i)
                next_tokens.append(tokens[i] + [v])
                next_cum.append(cand_cum[i, v])
                next_scores.append(flat[k])
                next_attn.append(hist)
                next_lps.append(lps)
        if not keep_rows:
            tokens = []
            break
        rows = np.asarray(keep_rows)
        state = scorer.select(state, rows)
        tokens, attn_hist, step_lps = next_tokens, next_attn, next_lps
        cum = np.asarray(next_cum)
        colsums = new_cols[rows]
        live_scores = np.asarray(next_scores)
    if finished:
        return sorted(finished, key=lambda h: (-h.score, h.tokens))
    log.debug("no hypothesis finished within %d steps; returning best unfinished", cfg.max_len)
    best = int(np.lexsort((np.arange(len(tokens)), -live_scores))[0])
    return [Hypothesis(tokens[best], float(cum[best]), float(live_scores[best]), attn_hist[best],
                       step_lps[best], False)]


def greedy_decode(scorer: Scorer, src: Sequence[int], max_len: int) -> list[int]:
    """Step-wise argmax; reference behaviour for beam size 1."""
    state = scorer.start(src)
    out = [BOS]
    for _ in range(max_len):
        logp, _, state = scorer.step(state, np.array([out[-1]]))
        v = int(np.argmax(logp[0]))
        out.append(v)
        if v == EOS:
            break
    return out


def rescore(scorer: Scorer, src: Sequence[int], tokens: Sequence[int], cfg: DecodeConfig) -> tuple[float, float]:
    """Teacher-force ``tokens`` (BOS-prefixed) through ``scorer``; returns (log-prob, score)."""
    state = scorer.start(src)
    total = 0.0
    hist = []
    for prev, nxt in zip(tokens[:-1], tokens[1:]):
        logp, attn, state = scorer.step(state, np.array([prev]))
        total += float(logp[0, nxt])
        hist.append(attn[0])
    n = len(tokens) - 1
    score = (total / length_penalty(n, cfg.length_alpha) if cfg.length_alpha else total)
    return total, score + coverage_penalty(hist, cfg.coverage_beta)


def translate(scorer: Scorer, sources: Sequence[Sequence[int]], cfg: DecodeConfig) -> list[Hypothesis]:
    """Best hypothesis per source sentence; sentences are decoded independently."""
    out = []
    for src in sources:
        if len(src) == 0:
            out.append(Hypothesis([BOS, EOS], 0.0, 0.0, finished=True))
            continue
        out.append(beam_search(scorer, src, cfg)[0])
    unfinished = sum(not h.finished for h in out)
    if unfinished:
        log.warning("%d of %d sentences hit max_len=%d without EOS", unfinished, len(out), cfg.max_len)
    return out
