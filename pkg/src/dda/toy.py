"""Synthetic two-domain translation task for end-to-end adaptation experiments.

Both domains share a 60-token vocabulary: 4 reserved ids, 26 common tokens
and two disjoint 15-token content sets (``a*`` for the out-of-domain side,
``b*`` for the in-domain side). Target sentences come from a per-domain
peaked Markov chain. Sources are produced from targets by a fixed per-token
map that collapses common tokens in pairs, so choosing between the two
readings of a common source token depends on target-side context, which is
exactly what the domain LMs differ on.
"""

from __future__ import annotations

import collections
import copy
import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .decode import DecodeConfig, NmtScorer, ShallowScorer, DeepScorer, translate
from .evaluation import (FreqTable, adaptation_accuracy, adaptation_extent, domain_diff_correlation,
                         domain_specific_counts, evaluation_vocab, token_accuracy)
from .fusion import train_deep_fusion
from .lm import LanguageModel, LmConfig, train_lm
from .nmt import NmtConfig, TranslationModel, train_nmt
from .nn import TrainConfig
from .text import SPECIALS, Vocabulary

log = logging.getLogger(__name__)

N_COMMON = 26
N_CONTENT = 15


def toy_vocab() -> Vocabulary:
    tokens = list(SPECIALS)
    tokens += [f"c{i:02d}" for i in range(N_COMMON)]
    tokens += [f"a{i:02d}" for i in range(N_CONTENT)]
    tokens += [f"b{i:02d}" for i in range(N_CONTENT)]
    return Vocabulary(tokens)


COMMON = np.arange(4, 4 + N_COMMON)
CONTENT_A = np.arange(4 + N_COMMON, 4 + N_COMMON + N_CONTENT)
CONTENT_B = np.arange(4 + N_COMMON + N_CONTENT, 4 + N_COMMON + 2 * N_CONTENT)
VOCAB_SIZE = 4 + N_COMMON + 2 * N_CONTENT


@dataclass
class MarkovDomain:
    """First-order chain: with prob ``peak`` jump to a fixed successor, else draw from a base distribution."""

    tokens: np.ndarray
    successor: dict[int, int]
    base: np.ndarray
    peak: float

    def sample(self, rng: np.random.Generator, length: int) -> list[int]:
        out, prev = [], -1
        for _ in range(length):
            if prev in self.successor and rng.random() < self.peak:
                tok = self.successor[prev]
            else:
                tok = int(self.tokens[rng.choice(len(self.tokens), p=self.base)])
            out.append(tok)
            prev = tok
        return out


def make_domain(rng: np.random.Generator, content: np.ndarray, peak: float, content_mass: float) -> MarkovDomain:
    tokens = np.concatenate([COMMON, content])
    w_common = rng.dirichlet(np.full(len(COMMON), 0.7)) * (1.0 - content_mass)
    w_content = rng.dirichlet(np.full(len(content), 2.0)) * content_mass
    base = np.concatenate([w_common, w_content])
    succ = {-1: int(rng.choice(tokens))}
    for t in tokens:
        succ[int(t)] = int(rng.choice(tokens))
    return MarkovDomain(tokens, succ, base, peak)


def source_map(rng: np.random.Generator, permute_in_domain: bool = False) -> np.ndarray:
    """Target id -> source id. Common tokens collapse in pairs; out-domain content is permuted;
    in-domain content maps to itself unless ``permute_in_domain``."""
    m = np.arange(VOCAB_SIZE)
    perm = rng.permutation(COMMON)
    for k in range(0, len(perm), 2):
        m[perm[k]] = COMMON[k // 2]
        m[perm[k + 1]] = COMMON[k // 2]
    m[CONTENT_A] = rng.permutation(CONTENT_A)
    if permute_in_domain:
        m[CONTENT_B] = rng.permutation(CONTENT_B)
    return m


@dataclass
class ToyConfig:
    seed: int = 0
    n_parallel: int = 2000
    n_mono: int = 2000
    n_test: int = 300
    n_dev: int = 100
    n_copy: int = 2000
    min_len: int = 4
    max_len: int = 9
    peak: float = 0.6
    content_mass: float = 0.3
    emb_dim: int = 24
    hidden_dim: int = 24
    num_layers: int = 1
    lm_epochs: int = 6
    nmt_epochs: int = 12
    fusion_epochs: int = 8
    batch_size: int = 32
    lr: float = 0.01
    fusion_lr: float = 0.003
    beta_grid: tuple[float, ...] = (0.25, 0.5, 1.0, 2.0)
    beam_size: int = 2
    top_n: int = N_COMMON
    permute_in_domain: bool = False


@dataclass
class ToyData:
    vocab: Vocabulary
    src_map: np.ndarray
    pairs_out: list[tuple[list[int], list[int]]]
    pairs_in: list[tuple[list[int], list[int]]]
    mono_out: list[list[int]]
    mono_in: list[list[int]]
    test_in: list[tuple[list[int], list[int]]]
    dev_in: list[tuple[list[int], list[int]]]


def make_data(cfg: ToyConfig) -> ToyData:
    rng = np.random.default_rng(cfg.seed)
    dom_a = make_domain(rng, CONTENT_A, cfg.peak, cfg.content_mass)
    dom_b = make_domain(rng, CONTENT_B, cfg.peak, cfg.content_mass)
    smap = source_map(rng, cfg.permute_in_domain)

    def sents(dom, n):
        return [dom.sample(rng, int(rng.integers(cfg.min_len, cfg.max_len + 1))) for _ in range(n)]

    def pairs(ts):
        return [([int(smap[t]) for t in y], y) for y in ts]

    return ToyData(
        vocab=toy_vocab(),
        src_map=smap,
        pairs_out=pairs(sents(dom_a, cfg.n_parallel)),
        pairs_in=pairs(sents(dom_b, cfg.n_parallel)),
        mono_out=sents(dom_a, cfg.n_mono),
        mono_in=sents(dom_b, cfg.n_mono),
        test_in=pairs(sents(dom_b, cfg.n_test)),
        dev_in=pairs(sents(dom_b, cfg.n_dev)),
    )


@dataclass
class ToyResult:
    seed: int
    accuracy: dict[str, float] = field(default_factory=dict)
    domain_counts: dict[str, int] = field(default_factory=dict)
    ae: dict[str, float] = field(default_factory=dict)
    aa: dict[str, float] = field(default_factory=dict)
    pearson_r: float = float("nan")
    beta: float = float("nan")
    seconds: float = 0.0

    @property
    def shallow_beats_baseline(self) -> bool:
        return self.accuracy["dda-shallow"] > self.accuracy["baseline"]

    @property
    def deep_counts_ok(self) -> bool:
        return self.domain_counts["dda-deep"] >= self.domain_counts["baseline"]

    @property
    def deep_aa_ok(self) -> bool:
        return self.aa["dda-deep"] >= self.aa["lm-deep"]

    @property
    def correlation_ok(self) -> bool:
        return self.pearson_r > 0.5


def _train_cfg(cfg: ToyConfig, epochs: int, salt: int, lr: float | None = None) -> TrainConfig:
    return TrainConfig(epochs=epochs, batch_size=cfg.batch_size, lr=cfg.lr if lr is None else lr,
                       seed=cfg.seed * 17 + salt, max_len=cfg.max_len + 2)


def _accuracy(scorer, pairs, dec: DecodeConfig) -> float:
    hyps = [h.output for h in translate(scorer, [s for s, _ in pairs], dec)]
    return token_accuracy([[str(t) for t in h] for h in hyps], [[str(t) for t in y] for _, y in pairs])


def tune_beta(nmt, lm_in, lm_out, dev, grid, dec: DecodeConfig, mode: str = "dda-shallow") -> float:
    """Pick the shallow-fusion weight with the best dev accuracy (first best wins)."""
    scores = [_accuracy(ShallowScorer(nmt, lm_in, lm_out, b, mode), dev, dec) for b in grid]
    return grid[int(np.argmax(scores))]


def run_toy_experiment(cfg: ToyConfig, systems: tuple[str, ...] | None = None) -> ToyResult:
    """Train every model for one seed and score each system on the in-domain test set."""
    t0 = time.perf_counter()
    data = make_data(cfg)
    V = len(data.vocab)
    E, H, L = cfg.emb_dim, cfg.hidden_dim, cfg.num_layers

    def new_lm(salt):
        return LanguageModel(LmConfig(V, E, H, L, seed=cfg.seed * 17 + salt), data.vocab)

    def new_nmt(salt):
        return TranslationModel(NmtConfig(V, E, H, L, seed=cfg.seed * 17 + salt), data.vocab)

    lm_in, lm_out = new_lm(1), new_lm(2)
    train_lm(lm_in, data.mono_in, _train_cfg(cfg, cfg.lm_epochs, 1))
    train_lm(lm_out, data.mono_out, _train_cfg(cfg, cfg.lm_epochs, 2))
    nmt_out = new_nmt(3)
    train_nmt(nmt_out, data.pairs_out, _train_cfg(cfg, cfg.nmt_epochs, 3))
    nmt_in = new_nmt(4)
    train_nmt(nmt_in, data.pairs_in, _train_cfg(cfg, cfg.nmt_epochs, 4))

    # copied in-domain monolingual data: (y, y) pairs
    copies = [(list(y), list(y)) for y in data.mono_in[: cfg.n_copy]]
    augmented = data.pairs_out + copies
    fusion_cfg = _train_cfg(cfg, cfg.fusion_epochs, 5, cfg.fusion_lr)
    dda_deep, _ = train_deep_fusion(copy.deepcopy(nmt_out), [lm_out, lm_in], augmented, fusion_cfg, "dda")
    lm_deep, _ = train_deep_fusion(copy.deepcopy(nmt_out), [lm_in], augmented, fusion_cfg, "lm-deep")

    dec = DecodeConfig(beam_size=cfg.beam_size, max_len=cfg.max_len + 3)
    beta_lm = tune_beta(nmt_out, lm_in, None, data.dev_in, cfg.beta_grid, dec, "lm-shallow")
    beta_dda = tune_beta(nmt_out, lm_in, lm_out, data.dev_in, cfg.beta_grid, dec)
    scorers = {
        "baseline": NmtScorer(nmt_out),
        "lm-shallow": ShallowScorer(nmt_out, lm_in, None, beta_lm, "lm-shallow"),
        "dda-shallow": ShallowScorer(nmt_out, lm_in, lm_out, beta_dda, "dda-shallow"),
        "lm-deep": DeepScorer(lm_deep),
        "dda-deep": DeepScorer(dda_deep),
    }
    if systems is not None:
        scorers = {k: v for k, v in scorers.items() if k in systems}

    tok = data.vocab.token
    refs = [[tok(t) for t in y] for _, y in data.test_in]
    freq_in = FreqTable.from_corpus([[tok(t) for t in y] for y in data.mono_in])
    freq_out = FreqTable.from_corpus([[tok(t) for t in y] for _, y in data.pairs_out])
    ev_vocab = evaluation_vocab(data.vocab.tokens)
    result = ToyResult(cfg.seed, beta=beta_dda)
    sources = [s for s, _ in data.test_in]
    for name, scorer in scorers.items():
        hyps = [[tok(t) for t in h.output] for h in translate(scorer, sources, dec)]
        result.accuracy[name] = token_accuracy(hyps, refs)
        result.domain_counts[name] = domain_specific_counts(hyps, freq_in.vocab(), freq_out.vocab())
        result.ae[name] = adaptation_extent(hyps, freq_in, freq_out, ev_vocab)
        result.aa[name] = adaptation_accuracy(hyps, refs, freq_in, freq_out, ev_vocab)

    cnt_in = collections.Counter(t for y in data.mono_in for t in y)
    cnt_out = collections.Counter(t for _, y in data.pairs_out for t in y)
    corr = domain_diff_correlation(lm_in, lm_out, nmt_in, nmt_out, data.test_in, cfg.top_n, cnt_in, cnt_out)
    result.pearson_r = corr.pearson_r
    result.seconds = time.perf_counter() - t0
    log.info("toy seed %d: %s", cfg.seed, asdict(result))
    return result
