"""Corpus metrics and adaptation analyses."""

from __future__ import annotations

import collections
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .text import SPECIALS

Tokens = Sequence[str]


class MetricError(ValueError):
    pass


def _check_aligned(a: Sequence, b: Sequence, what: str = "hypotheses and references") -> None:
    if len(a) != len(b):
        raise MetricError(f"{what} differ in length: {len(a)} vs {len(b)}")


def _split(corpus: Iterable[str | Tokens]) -> list[list[str]]:
    return [s.split() if isinstance(s, str) else list(s) for s in corpus]


# ---------------------------------------------------------------- BLEU

def _ngrams(tokens: Tokens, n: int) -> collections.Counter:
    return collections.Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu_stats(hyp: Tokens, ref: Tokens, order: int = 4) -> np.ndarray:
    """[matches_1..n, totals_1..n, hyp_len, ref_len] for one sentence pair."""
    stats = np.zeros(2 * order + 2)
    for n in range(1, order + 1):
        h, r = _ngrams(hyp, n), _ngrams(ref, n)
        stats[n - 1] = sum(min(c, r[g]) for g, c in h.items())
        stats[order + n - 1] = max(len(hyp) - n + 1, 0)
    stats[-2] = len(hyp)
    stats[-1] = len(ref)
    return stats


def bleu_from_stats(stats: np.ndarray, order: int = 4) -> float:
    matches, totals = stats[:order], stats[order:2 * order]
    hyp_len, ref_len = stats[-2], stats[-1]
    if hyp_len == 0 or np.any(matches == 0):
        return 0.0
    log_prec = float(np.mean(np.log(matches / totals)))
    bp = 1.0 if hyp_len > ref_len else math.exp(1.0 - ref_len / hyp_len)
    return 100.0 * bp * math.exp(log_prec)


def bleu(hypotheses: Sequence[str | Tokens], references: Sequence[str | Tokens], order: int = 4) -> float:
    """Corpus BLEU-4 with brevity penalty and no smoothing, in [0, 100]."""
    _check_aligned(hypotheses, references)
    hyps, refs = _split(hypotheses), _split(references)
    stats = sum((bleu_stats(h, r, order) for h, r in zip(hyps, refs)), np.zeros(2 * order + 2))
    return bleu_from_stats(stats, order)


def paired_bootstrap(hyps_a, hyps_b, refs, n_samples: int = 1000, seed: int = 0) -> float:
    """Fraction of resampled test sets on which system A does not beat system B."""
    _check_aligned(hyps_a, refs)
    _check_aligned(hyps_b, refs)
    if n_samples < 100:
        raise MetricError("n_samples must be >= 100")
    ref_t = _split(refs)
    sa = np.stack([bleu_stats(h, r) for h, r in zip(_split(hyps_a), ref_t)])
    sb = np.stack([bleu_stats(h, r) for h, r in zip(_split(hyps_b), ref_t)])
    rng = np.random.default_rng(seed)
    n = len(ref_t)
    not_better = 0
    for _ in range(n_samples):
        idx = rng.integers(0, n, size=n)
        if bleu_from_stats(sa[idx].sum(axis=0)) <= bleu_from_stats(sb[idx].sum(axis=0)):
            not_better += 1
    return not_better / n_samples


# ---------------------------------------------------------------- subword metrics

@dataclass
class FreqTable:
    counts: collections.Counter
    total: int

    @classmethod
    def from_corpus(cls, corpus: Iterable[str | Tokens]) -> "FreqTable":
        counts = collections.Counter(t for s in _split(corpus) for t in s)
        return cls(counts, sum(counts.values()))

    def __getitem__(self, w: str) -> int:
        return self.counts.get(w, 0)

    def vocab(self) -> set[str]:
        return {w for w, c in self.counts.items() if c > 0}


def evaluation_vocab(tokens: Iterable[str], in_domain_only: bool = False, freq_out: FreqTable | None = None
                     ) -> list[str]:
    """Vocabulary for AE/AA with reserved tokens removed."""
    vocab = sorted(set(tokens) - set(SPECIALS))
    if in_domain_only:
        if freq_out is None:
            raise MetricError("in_domain_only needs the out-of-domain frequency table")
        vocab = [w for w in vocab if freq_out[w] == 0]
    return vocab


def domain_weight(w: str, freq_in: FreqTable, freq_out: FreqTable) -> float:
    return freq_in[w] / (freq_out[w] + 1.0)


def adaptation_extent(hyp_corpus, freq_in: FreqTable, freq_out: FreqTable, vocab: Sequence[str]) -> float:
    """Mean over the vocabulary of the in/out frequency ratio times the generated count."""
    if not vocab:
        return 0.0
    counts = collections.Counter(t for s in _split(hyp_corpus) for t in s)
    return sum(domain_weight(w, freq_in, freq_out) * counts.get(w, 0) for w in vocab) / len(vocab)


def subword_f1_table(hyps, refs) -> dict[str, float]:
    """Corpus-level F1 per token with per-sentence clipped matching."""
    _check_aligned(hyps, refs)
    match: collections.Counter = collections.Counter()
    n_hyp: collections.Counter = collections.Counter()
    n_ref: collections.Counter = collections.Counter()
    for h, r in zip(_split(hyps), _split(refs)):
        ch, cr = collections.Counter(h), collections.Counter(r)
        n_hyp.update(ch)
        n_ref.update(cr)
        for w, c in ch.items():
            if w in cr:
                match[w] += min(c, cr[w])
    table = {}
    for w in set(n_hyp) | set(n_ref):
        m = match[w]
        table[w] = 0.0 if m == 0 else 2.0 * m / (n_hyp[w] + n_ref[w])
    return table


def subword_f1(hyps, refs, w: str) -> float:
    return subword_f1_table(hyps, refs).get(w, 0.0)


def adaptation_accuracy(hyps, refs, freq_in: FreqTable, freq_out: FreqTable, vocab: Sequence[str]) -> float:
    """Mean over the vocabulary of the in/out frequency ratio times per-token F1."""
    f1 = subword_f1_table(hyps, refs)
    if not vocab:
        return 0.0
    return sum(domain_weight(w, freq_in, freq_out) * f1.get(w, 0.0) for w in vocab) / len(vocab)


def domain_specific_counts(hyp_corpus, in_vocab: Iterable[str], out_vocab: Iterable[str]) -> int:
    """Occurrences in the hypotheses of tokens seen only in the in-domain data."""
    exclusive = set(in_vocab) - set(out_vocab)
    return sum(1 for s in _split(hyp_corpus) for t in s if t in exclusive)


def token_accuracy(hyps, refs) -> float:
    """Position-wise exact-match rate, normalised by reference length."""
    _check_aligned(hyps, refs)
    hit = total = 0
    for h, r in zip(_split(hyps), _split(refs)):
        hit += sum(1 for a, b in zip(h, r) if a == b)
        total += len(r)
    return hit / total if total else 0.0


# ---------------------------------------------------------------- correlation analysis

@dataclass
class CorrelationResult:
    words: list[str]
    delta_nmt: np.ndarray
    delta_lm: np.ndarray
    pearson_r: float
    degenerate: bool = False
    rows: list[tuple[str, float, float, float, float, float, float]] = field(default_factory=list)

    def table(self) -> list[str]:
        """Two numeric columns (delta_nmt, delta_lm) with the word as a trailing comment."""
        return [f"{a:.6f} {b:.6f} # {w}" for w, a, b in zip(self.words, self.delta_nmt, self.delta_lm)]


def pearson(x: np.ndarray, y: np.ndarray) -> tuple[float, bool]:
    x, y = np.asarray(x, float), np.asarray(y, float)
    sx, sy = x.std(), y.std()
    if sx == 0 or sy == 0:
        return math.nan, True
    return float(np.mean((x - x.mean()) * (y - y.mean())) / (sx * sy)), False


def correlate_word_deltas(gold: Sequence[Sequence[int]], lp_lm_in, lp_lm_out, lp_nmt_in, lp_nmt_out,
                          words: Sequence[int], names: Sequence[str] | None = None) -> CorrelationResult:
    """Per word, mean gold log-prob under each model; correlate the NMT and LM in-minus-out gaps."""
    sums = collections.defaultdict(lambda: np.zeros(4))
    hits: collections.Counter = collections.Counter()
    wanted = set(words)
    for k, seq in enumerate(gold):
        for t, w in enumerate(seq):
            if w in wanted:
                sums[w] += (lp_lm_in[k][t], lp_lm_out[k][t], lp_nmt_in[k][t], lp_nmt_out[k][t])
                hits[w] += 1
    present = [w for w in words if hits[w] > 0]
    if len(present) < 3:
        raise MetricError(f"need at least 3 qualifying words, found {len(present)}")
    means = np.array([sums[w] / hits[w] for w in present])
    d_lm = means[:, 0] - means[:, 1]
    d_nmt = means[:, 2] - means[:, 3]
    r, degenerate = pearson(d_nmt, d_lm)
    labels = [names[w] if names is not None else str(w) for w in present]
    rows = [(lab, *map(float, m), float(a), float(b)) for lab, m, a, b in zip(labels, means, d_nmt, d_lm)]
    return CorrelationResult(labels, d_nmt, d_lm, r, degenerate, rows)


def frequent_shared_words(freq_a: collections.Counter, freq_b: collections.Counter, top_n: int,
                          exclude: Iterable = ()) -> list:
    """The ``top_n`` most frequent items present in both tables (ranked by the smaller count)."""
    skip = set(exclude)
    shared = [w for w in freq_a if freq_a[w] > 0 and freq_b.get(w, 0) > 0 and w not in skip]
    shared.sort(key=lambda w: (-min(freq_a[w], freq_b[w]), -(freq_a[w] + freq_b[w]), w))
    return shared[:top_n]


def domain_diff_correlation(lm_in, lm_out, nmt_in, nmt_out, eval_pairs, top_n: int = 100,
                            freq_in: collections.Counter | None = None,
                            freq_out: collections.Counter | None = None) -> CorrelationResult:
    """Teacher-force all four models over ``eval_pairs`` (id sequences) and correlate their domain gaps.

    Words are the ``top_n`` most frequent in both domains when the two
    frequency tables are given, else the most frequent gold tokens of the
    evaluation corpus.
    """
    from .lm import token_log_probs
    from .nmt import gold_log_probs

    V = nmt_out.config.vocab_size
    for m in (lm_in, lm_out, nmt_in):
        if m.config.vocab_size != V:
            raise MetricError("all four models must share one vocabulary")
    from .text import EOS

    gold = [list(t) + [EOS] for _, t in eval_pairs]
    targets = [list(t) for _, t in eval_pairs]
    reserved = range(len(SPECIALS))
    if freq_in is not None and freq_out is not None:
        words = frequent_shared_words(freq_in, freq_out, top_n, exclude=reserved)
    else:
        counts = collections.Counter(w for s in targets for w in s)
        words = frequent_shared_words(counts, counts, top_n, exclude=reserved)
    names = None
    vocab = getattr(nmt_out, "vocab", None)
    if vocab is not None:
        names = vocab.tokens
    return correlate_word_deltas(
        gold,
        token_log_probs(lm_in, targets), token_log_probs(lm_out, targets),
        gold_log_probs(nmt_in, eval_pairs), gold_log_probs(nmt_out, eval_pairs),
        words, names,
    )


# ---------------------------------------------------------------- report

@dataclass
class EvalReport:
    values: dict[str, object] = field(default_factory=dict)
    f1_table: dict[str, float] = field(default_factory=dict)

    def lines(self) -> list[str]:
        out = []
        for k, v in self.values.items():
            if isinstance(v, float):
                if not math.isfinite(v):
                    raise MetricError(f"report value {k} is not finite")
                out.append(f"{k}={v:.6f}")
            else:
                out.append(f"{k}={v}")
        return out

    @staticmethod
    def parse(lines: Iterable[str]) -> dict[str, str]:
        result = {}
        for line in lines:
            line = line.strip()
            if line and not line.startswith("#"):
                k, _, v = line.partition("=")
                result[k] = v
        return result
