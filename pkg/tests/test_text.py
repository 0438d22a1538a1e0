import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dda.text import (BOS, COPIED, EOS, ORIGINAL, PAD, SPECIALS, UNK, CorpusError, MergeTable, MonoCorpus,
                      ParallelCorpus, Tokenizer, Vocabulary, batch_iter, build_vocab, copy_augment, detokenize,
                      encode, filter_long, learn_bpe, pad, read_mono, read_parallel, write_lines)

words = st.text(alphabet="abcde", min_size=1, max_size=6)
sentences = st.lists(words, min_size=1, max_size=5).map(" ".join)


def test_reserved_ids():
    assert (PAD, BOS, EOS, UNK) == (0, 1, 2, 3)
    v = Vocabulary(["x"])
    assert v.tokens[:4] == list(SPECIALS) and v.id("x") == 4


def test_bpe_single_pair_corpus():
    table = learn_bpe(["aa aa"], 1)
    assert table.merges == (("a", "a</w>"),)
    vocab = build_vocab(["aa aa"], table)
    assert encode("aa", table, vocab) == [vocab.id("aa</w>")]


def test_bpe_hand_traced_merges():
    # counts: (l,o)=3 first; then (lo,w) and (w,e) tie at 2, lexicographic order picks (lo,w)
    table = learn_bpe(["low lower lowest"], 3)
    assert table.merges == (("l", "o"), ("lo", "w"), ("low", "e"))


def test_zero_merges_is_character_level():
    tok = Tokenizer(build_vocab(["abc"], MergeTable(())), MergeTable(()))
    assert tok.segment("abc") == ["a", "b", "c</w>"]


def test_bpe_empty_corpus_fails():
    with pytest.raises(CorpusError):
        learn_bpe([], 5)
    with pytest.raises(ValueError):
        learn_bpe(["a"], -1)


@given(st.lists(sentences, min_size=1, max_size=6), st.integers(0, 20))
@settings(max_examples=60, deadline=None)
def test_bpe_determinism_and_roundtrip(corpus, n):
    t1, t2 = learn_bpe(corpus, n), learn_bpe(corpus, n)
    assert t1 == t2
    tok = Tokenizer(build_vocab(corpus, t1), t1)
    for s in corpus:
        ids = tok.encode(s)
        assert UNK not in ids
        assert tok.decode(ids) == s


def test_unseen_symbol_maps_to_unk():
    table = learn_bpe(["ab ab"], 2)
    vocab = build_vocab(["ab ab"], table)
    assert encode("z", table, vocab) == [UNK]
    assert encode("z", None, build_vocab(["ab"])) == [UNK]


def test_build_vocab_ordering():
    assert len(build_vocab([])) == 4
    v = build_vocab(["b a b a b a b a b a c"])
    assert v.tokens[4:] == ["a", "b", "c"]


def test_vocab_and_merges_file_roundtrip(tmp_path):
    v = build_vocab(["x y y z"])
    v.save(tmp_path / "v.txt")
    loaded = Vocabulary.load(tmp_path / "v.txt")
    assert loaded.tokens == v.tokens and loaded.index == v.index and loaded.digest == v.digest
    m = learn_bpe(["hello world"], 4)
    m.save(tmp_path / "m.txt")
    assert MergeTable.load(tmp_path / "m.txt") == m
    assert MergeTable.parse(m.serialize()) == m


def test_vocab_file_requires_header(tmp_path):
    (tmp_path / "v.txt").write_text("a\nb\n")
    with pytest.raises(CorpusError):
        Vocabulary.load(tmp_path / "v.txt")


def test_duplicate_tokens_rejected():
    with pytest.raises(CorpusError):
        Vocabulary(list(SPECIALS) + ["a", "a"])


def test_copy_augment_semantics():
    out = copy_augment(MonoCorpus(("a b",)), ParallelCorpus((), ()))
    assert out.pairs() == [("a b", "a b")] and out.provenance == (COPIED,)


@given(st.lists(st.tuples(sentences, sentences), max_size=5), st.lists(sentences, max_size=5))
def test_copy_augment_prefix_and_size(pairs, mono):
    base = ParallelCorpus(tuple(s for s, _ in pairs), tuple(t for _, t in pairs))
    out = copy_augment(MonoCorpus(tuple(mono)), base)
    assert len(out) == len(pairs) + len(mono)
    assert out.pairs()[: len(pairs)] == base.pairs()
    assert out.provenance[: len(pairs)] == (ORIGINAL,) * len(pairs)
    for s, t in out.pairs()[len(pairs):]:
        assert s.split() == t.split()


def test_parallel_corpus_length_mismatch():
    with pytest.raises(CorpusError):
        ParallelCorpus(("a",), ())


def test_corpus_io(tmp_path):
    write_lines(tmp_path / "s", ["a b", "", "c"])
    write_lines(tmp_path / "t", ["x", "y", "z w"])
    par = read_parallel(tmp_path / "s", tmp_path / "t")
    assert par.pairs() == [("a b", "x"), ("c", "z w")]
    assert read_mono(tmp_path / "s").sentences == ("a b", "c")
    write_lines(tmp_path / "u", ["only"])
    with pytest.raises(CorpusError):
        read_parallel(tmp_path / "s", tmp_path / "u")


def test_batch_size_one_has_no_padding():
    seqs = [[4, 5], [6], [7, 8, 9]]
    for b in batch_iter([seqs], 1, seed=0):
        assert b.ids[0].shape[0] == 1 and b.masks[0].all()


def test_pad_mask():
    ids, mask = pad([[4, 5, 6], [4, 5, 6, 7, 8]])
    np.testing.assert_array_equal(mask[0], [1, 1, 1, 0, 0])
    assert ids.shape == (2, 5) and ids[0, 3] == PAD


@given(st.lists(st.lists(st.integers(4, 9), min_size=1, max_size=7), min_size=1, max_size=40),
       st.integers(1, 8), st.integers(0, 1000))
@settings(max_examples=50, deadline=None)
def test_batch_iter_covers_each_sentence_once(seqs, bs, seed):
    seen = []
    for b in batch_iter([seqs], bs, seed):
        seen.extend(b.indices.tolist())
        for row, i in enumerate(b.indices):
            assert b.ids[0][row, : len(seqs[i])].tolist() == seqs[i]
    assert sorted(seen) == list(range(len(seqs)))
    again = [b.indices.tolist() for b in batch_iter([seqs], bs, seed)]
    assert again == [b.indices.tolist() for b in batch_iter([seqs], bs, seed)]


def test_filter_long():
    assert filter_long([[1] * 3, [1] * 70, []], 64) == [0]


def test_detokenize_whitespace_mode():
    assert detokenize(["a", "b"]) == "a b"
    assert detokenize(["he", "llo</w>", "w", "orld</w>"]) == "hello world"
