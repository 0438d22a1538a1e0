import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays, array_shapes

from dda.checkpoint import (MAGIC, VERSION, Checkpoint, CheckpointError, decode_checkpoint, encode_checkpoint,
                            load_model, read_checkpoint, save_model)
from dda.lm import LanguageModel, LmConfig
from dda.nmt import NmtConfig, TranslationModel
from dda.text import Vocabulary, build_vocab, learn_bpe

floats = st.floats(allow_nan=False, allow_infinity=False, width=64)
param_maps = st.dictionaries(st.from_regex(r"[a-z][a-z0-9_.]{0,12}", fullmatch=True),
                             arrays(np.float64, array_shapes(min_dims=0, max_dims=3, max_side=4), elements=floats),
                             max_size=5)


@given(param_maps, st.sampled_from(["lm", "nmt", "fusion"]))
@settings(max_examples=60, deadline=None)
def test_encode_decode_is_bit_exact(params, kind):
    vocab = Vocabulary(["x", "y"])
    ck = Checkpoint(kind, {"a": 1, "b": [2, 3]}, params, vocab, None, {"lm_digests": ["d"]})
    back = decode_checkpoint(encode_checkpoint(ck))
    assert back.kind == kind and back.config == ck.config and back.components == ck.components
    assert back.vocab.tokens == vocab.tokens and back.merges is None
    assert set(back.params) == set(params)
    for k, v in params.items():
        assert back.params[k].shape == v.shape
        assert back.params[k].tobytes() == np.asarray(v, dtype="<f8", order="C").tobytes()


def test_layout_is_little_endian_with_magic():
    data = encode_checkpoint(Checkpoint("lm", {}, {"w": np.array([1.0])}))
    assert data[:8] == MAGIC and len(MAGIC) == 8
    assert struct.unpack("<I", data[8:12])[0] == VERSION
    assert data.endswith(struct.pack("<d", 1.0))


def test_corruptions_are_rejected():
    data = encode_checkpoint(Checkpoint("lm", {}, {"w": np.arange(3.0)}, Vocabulary(["a"])))
    with pytest.raises(CheckpointError, match="magic"):
        decode_checkpoint(b"X" + data[1:])
    with pytest.raises(CheckpointError, match="version"):
        decode_checkpoint(data[:8] + struct.pack("<I", VERSION + 1) + data[12:])
    with pytest.raises(CheckpointError, match="truncated"):
        decode_checkpoint(data[:-3])
    with pytest.raises(CheckpointError, match="trailing"):
        decode_checkpoint(data + b"\0")
    with pytest.raises(CheckpointError, match="unknown"):
        encode_checkpoint(Checkpoint("gpt", {}, {}))


def test_vocab_hash_tamper_detected():
    ck = Checkpoint("lm", {}, {}, Vocabulary(["a", "b"]))
    data = encode_checkpoint(ck)
    tampered = data.replace(b"\na\nb", b"\nb\na")
    assert tampered != data
    with pytest.raises(CheckpointError, match="hash"):
        decode_checkpoint(tampered)


def test_kind_and_vocab_mismatch_fail_fast(tmp_path):
    vocab = build_vocab(["a b c"])
    lm = LanguageModel(LmConfig(len(vocab), 4, 4, 1), vocab)
    save_model(lm, tmp_path / "lm.ckpt")
    with pytest.raises(CheckpointError, match="expected a nmt"):
        load_model(tmp_path / "lm.ckpt", "nmt")
    with pytest.raises(CheckpointError, match="vocabulary hash"):
        load_model(tmp_path / "lm.ckpt", "lm", vocab_hash=build_vocab(["x y z"]).digest)
    with pytest.raises(CheckpointError, match="cannot read"):
        read_checkpoint(tmp_path / "missing.ckpt")


def test_model_roundtrip_keeps_merges_and_digest(tmp_path):
    corpus = ["lower lowest newer", "low new"]
    merges = learn_bpe(corpus, 6)
    vocab = build_vocab(corpus, merges)
    nmt = TranslationModel(NmtConfig(len(vocab), 6, 6, 2, bidirectional=True, input_feed=True, seed=4), vocab, merges)
    sha = save_model(nmt, tmp_path / "n.ckpt")
    assert len(sha) == 64
    back = load_model(tmp_path / "n.ckpt", "nmt")
    assert back.param_digest() == nmt.param_digest()
    assert back.merges == merges and back.vocab.digest == vocab.digest
    assert back.config == nmt.config
    assert save_model(back, tmp_path / "again.ckpt") == sha
