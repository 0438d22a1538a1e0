"""Subword segmentation, vocabularies, corpora and batching."""

from __future__ import annotations

import collections
import hashlib
import logging
import os
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Sequence

import numpy as np

log = logging.getLogger(__name__)

PAD, BOS, EOS, UNK = 0, 1, 2, 3
SPECIALS = ("<pad>", "<s>", "</s>", "<unk>")
EOW = "</w>"

VOCAB_HEADER = "#dda-vocab v1"
MERGES_HEADER = "#dda-merges v1"

ORIGINAL, COPIED, BACK_TRANSLATED = "original", "copied", "back-translated"


class CorpusError(ValueError):
    pass


# ---------------------------------------------------------------- corpora

@dataclass(frozen=True)
class MonoCorpus:
    sentences: tuple[str, ...]
    provenance: str = ORIGINAL

    def __len__(self) -> int:
        return len(self.sentences)


@dataclass(frozen=True)
class ParallelCorpus:
    sources: tuple[str, ...]
    targets: tuple[str, ...]
    provenance: tuple[str, ...] = ()

    def __post_init__(self):
        if len(self.sources) != len(self.targets):
            raise CorpusError(f"parallel corpus sides differ: {len(self.sources)} vs {len(self.targets)}")
        if not self.provenance:
            object.__setattr__(self, "provenance", (ORIGINAL,) * len(self.sources))
        elif len(self.provenance) != len(self.sources):
            raise CorpusError("provenance tags must align with sentence pairs")

    def __len__(self) -> int:
        return len(self.sources)

    def __add__(self, other: "ParallelCorpus") -> "ParallelCorpus":
        return ParallelCorpus(self.sources + other.sources, self.targets + other.targets,
                              self.provenance + other.provenance)

    def pairs(self) -> list[tuple[str, str]]:
        return list(zip(self.sources, self.targets))


def read_lines(path: str | os.PathLike) -> list[str]:
    with open(path, encoding="utf-8") as f:
        return [line.rstrip("\n") for line in f]


def read_mono(path: str | os.PathLike, provenance: str = ORIGINAL) -> MonoCorpus:
    lines = [s.strip() for s in read_lines(path)]
    return MonoCorpus(tuple(s for s in lines if s), provenance)


def read_parallel(src_path, tgt_path) -> ParallelCorpus:
    src = [s.strip() for s in read_lines(src_path)]
    tgt = [s.strip() for s in read_lines(tgt_path)]
    if len(src) != len(tgt):
        raise CorpusError(f"{src_path} has {len(src)} lines but {tgt_path} has {len(tgt)}")
    keep = [(s, t) for s, t in zip(src, tgt) if s and t]
    return ParallelCorpus(tuple(s for s, _ in keep), tuple(t for _, t in keep))


def write_lines(path: str | os.PathLike, lines: Iterable[str]) -> None:
    """Write atomically: temp file then rename."""
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as f:
        for line in lines:
            f.write(line + "\n")
    os.replace(tmp, path)


def copy_augment(mono_in: MonoCorpus, parallel_out: ParallelCorpus) -> ParallelCorpus:
    """Append pseudo-parallel pairs (y, y) built from in-domain target text."""
    copied = ParallelCorpus(mono_in.sentences, mono_in.sentences, (COPIED,) * len(mono_in))
    return parallel_out + copied


# ---------------------------------------------------------------- BPE

@dataclass(frozen=True)
class MergeTable:
    merges: tuple[tuple[str, str], ...]

    @property
    def ranks(self) -> dict[tuple[str, str], int]:
        return {pair: i for i, pair in enumerate(self.merges)}

    def __len__(self) -> int:
        return len(self.merges)

    def save(self, path) -> None:
        write_lines(path, [MERGES_HEADER] + [f"{a} {b}" for a, b in self.merges])

    def serialize(self) -> str:
        return "\n".join([MERGES_HEADER] + [f"{a} {b}" for a, b in self.merges]) + "\n"

    @classmethod
    def parse(cls, text: str, origin: str = "merge table") -> "MergeTable":
        lines = [ln for ln in text.split("\n") if ln]
        if not lines or lines[0] != MERGES_HEADER:
            raise CorpusError(f"{origin}: missing header {MERGES_HEADER!r}")
        merges = []
        for line in lines[1:]:
            a, b = line.split(" ")
            merges.append((a, b))
        return cls(tuple(merges))

    @classmethod
    def load(cls, path) -> "MergeTable":
        with open(path, encoding="utf-8") as f:
            return cls.parse(f.read(), str(path))


def _word_symbols(word: str) -> tuple[str, ...]:
    return tuple(word[:-1]) + (word[-1] + EOW,)


def learn_bpe(corpus: MonoCorpus | Sequence[str], num_merges: int) -> MergeTable:
    """Greedy most-frequent-pair merges; ties go to the lexicographically smallest pair."""
    sentences = corpus.sentences if isinstance(corpus, MonoCorpus) else tuple(corpus)
    if num_merges < 0:
        raise ValueError("num_merges must be >= 0")
    words = collections.Counter(w for s in sentences for w in s.split())
    if not words:
        raise CorpusError("cannot learn BPE from an empty corpus")
    vocab = {_word_symbols(w): c for w, c in words.items()}
    merges: list[tuple[str, str]] = []
    for _ in range(num_merges):
        pairs: collections.Counter = collections.Counter()
        for symbols, count in vocab.items():
            for pair in zip(symbols, symbols[1:]):
                pairs[pair] += count
        if not pairs:
            break
        best = min(pairs.items(), key=lambda kv: (-kv[1], kv[0]))[0]
        merges.append(best)
        merged = best[0] + best[1]
        new_vocab = {}
        for symbols, count in vocab.items():
            out = []
            i = 0
            while i < len(symbols):
                if i + 1 < len(symbols) and (symbols[i], symbols[i + 1]) == best:
                    out.append(merged)
                    i += 2
                else:
                    out.append(symbols[i])
                    i += 1
            new_vocab[tuple(out)] = new_vocab.get(tuple(out), 0) + count
        vocab = new_vocab
    return MergeTable(tuple(merges))


def segment_word(word: str, ranks: dict[tuple[str, str], int]) -> list[str]:
    symbols = list(_word_symbols(word))
    while len(symbols) > 1:
        ranked = [(ranks.get(p, len(ranks)), i) for i, p in enumerate(zip(symbols, symbols[1:]))]
        rank, i = min(ranked)
        if rank == len(ranks):
            break
        symbols[i:i + 2] = [symbols[i] + symbols[i + 1]]
    return symbols


def detokenize(tokens: Sequence[str]) -> str:
    """Join subwords, turning end-of-word markers into spaces.

    Tokens without any marker (whitespace segmentation) are joined by spaces.
    """
    if not any(t.endswith(EOW) for t in tokens):
        return " ".join(tokens)
    text = "".join(t if not t.endswith(EOW) else t[: -len(EOW)] + " " for t in tokens)
    return text.strip()


# ---------------------------------------------------------------- vocabulary

@dataclass
class Vocabulary:
    tokens: list[str]
    index: dict[str, int] = field(init=False)

    def __post_init__(self):
        if tuple(self.tokens[:4]) != SPECIALS:
            self.tokens = list(SPECIALS) + [t for t in self.tokens if t not in SPECIALS]
        self.index = {t: i for i, t in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise CorpusError("vocabulary contains duplicate tokens")

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self.index

    def id(self, token: str) -> int:
        return self.index.get(token, UNK)

    def token(self, i: int) -> str:
        return self.tokens[i]

    def content_ids(self) -> range:
        return range(4, len(self.tokens))

    def serialize(self) -> str:
        return "\n".join([VOCAB_HEADER] + self.tokens) + "\n"

    @property
    def digest(self) -> str:
        return hashlib.sha256(self.serialize().encode("utf-8")).hexdigest()

    def save(self, path) -> None:
        write_lines(path, [VOCAB_HEADER] + self.tokens)

    @classmethod
    def parse(cls, text: str) -> "Vocabulary":
        lines = text.split("\n")
        if lines and lines[-1] == "":
            lines = lines[:-1]
        if not lines or lines[0] != VOCAB_HEADER:
            raise CorpusError(f"vocabulary text lacks header {VOCAB_HEADER!r}")
        return cls(lines[1:])

    @classmethod
    def load(cls, path) -> "Vocabulary":
        with open(path, encoding="utf-8") as f:
            return cls.parse(f.read())

    @classmethod
    def from_counts(cls, counts: collections.Counter | dict[str, int]) -> "Vocabulary":
        ordered = sorted((t for t in counts if t not in SPECIALS), key=lambda t: (-counts[t], t))
        return cls(list(SPECIALS) + ordered)


class Tokenizer:
    """Maps sentences to id sequences. ``merges=None`` means whitespace tokens are the units."""

    def __init__(self, vocab: Vocabulary, merges: MergeTable | None = None):
        self.vocab = vocab
        self.merges = merges
        self._ranks = merges.ranks if merges is not None else None
        self._cache: dict[str, list[str]] = {}

    def segment(self, sentence: str) -> list[str]:
        if self._ranks is None:
            return sentence.split()
        out: list[str] = []
        for w in sentence.split():
            seg = self._cache.get(w)
            if seg is None:
                seg = self._cache[w] = segment_word(w, self._ranks)
            out.extend(seg)
        return out

    def encode(self, sentence: str) -> list[int]:
        return [self.vocab.id(t) for t in self.segment(sentence)]

    def decode_tokens(self, ids: Iterable[int]) -> list[str]:
        return [self.vocab.token(i) for i in ids if i not in (PAD, BOS, EOS)]

    def decode(self, ids: Iterable[int]) -> str:
        tokens = self.decode_tokens(ids)
        if self.merges is None:
            return " ".join(tokens)
        text = "".join(t[: -len(EOW)] + " " if t.endswith(EOW) else t for t in tokens)
        return text.strip()


def build_vocab(corpus: MonoCorpus | Iterable[str], merges: MergeTable | None = None) -> Vocabulary:
    """Reserved tokens first, then by descending frequency with lexicographic ties."""
    sentences = corpus.sentences if isinstance(corpus, MonoCorpus) else corpus
    ranks = merges.ranks if merges is not None else None
    counts: collections.Counter = collections.Counter()
    for s in sentences:
        for w in s.split():
            counts.update(segment_word(w, ranks) if ranks is not None else [w])
    return Vocabulary.from_counts(counts)


def encode(sentence: str, merges: MergeTable | None, vocab: Vocabulary) -> list[int]:
    return Tokenizer(vocab, merges).encode(sentence)


def filter_long(seqs: Sequence[Sequence[int]], max_len: int) -> list[int]:
    """Indices of sequences within ``max_len``; logs how many were dropped."""
    keep = [i for i, s in enumerate(seqs) if 0 < len(s) <= max_len]
    dropped = len(seqs) - len(keep)
    if dropped:
        log.info("filtered %d sentences longer than %d subwords (or empty)", dropped, max_len)
    return keep


# ---------------------------------------------------------------- batching

@dataclass
class Batch:
    indices: np.ndarray
    ids: list[np.ndarray]
    masks: list[np.ndarray]


def pad(seqs: Sequence[Sequence[int]]) -> tuple[np.ndarray, np.ndarray]:
    width = max(len(s) for s in seqs)
    ids = np.full((len(seqs), width), PAD, dtype=np.int64)
    mask = np.zeros((len(seqs), width))
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = s
        mask[i, : len(s)] = 1.0
    return ids, mask


def batch_iter(columns: Sequence[Sequence[Sequence[int]]], batch_size: int, seed: int,
               pool: int = 16) -> Iterator[Batch]:
    """One epoch of padded batches over aligned ``columns`` (e.g. ``[sources, targets]``).

    Sentences are shuffled with ``seed``, sorted by length inside pools of
    ``pool * batch_size``, and the resulting batches are shuffled again.
    Every sentence appears exactly once.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    if len({len(c) for c in columns}) > 1:
        raise CorpusError("batch columns have different lengths")
    n = len(columns[0])
    rng = np.random.default_rng(seed)
    order = rng.permutation(n)
    chunk = pool * batch_size
    batches = []
    for start in range(0, n, chunk):
        part = order[start:start + chunk]
        part = sorted(part, key=lambda i: (max(len(c[i]) for c in columns), i))
        for b in range(0, len(part), batch_size):
            batches.append(np.asarray(part[b:b + batch_size], dtype=np.int64))
    for k in rng.permutation(len(batches)):
        idx = batches[k]
        ids, masks = [], []
        for c in columns:
            a, m = pad([c[i] for i in idx])
            ids.append(a)
            masks.append(m)
        yield Batch(idx, ids, masks)
