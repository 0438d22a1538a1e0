"""Versioned little-endian binary checkpoints for LM, NMT and fusion models.

Layout::

    magic (8 bytes) | version u32 | kind str | config str (JSON)
    | vocab str | merges str | vocab hash str | components str (JSON)
    | n_params u32 | n_params x (name str | ndim u32 | dims u64* | float64 data)

Strings are a u32 byte length followed by UTF-8 bytes. Empty vocab or
merges strings mean "none".
"""

from __future__ import annotations

import hashlib
import io
import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from typing import BinaryIO

import numpy as np

from .lm import LanguageModel, LmConfig
from .nmt import NmtConfig, TranslationModel
from .text import MergeTable, Vocabulary

MAGIC = b"DDACKPT\x00"
VERSION = 1
KINDS = ("lm", "nmt", "fusion")


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    kind: str
    config: dict
    params: dict[str, np.ndarray]
    vocab: Vocabulary | None = None
    merges: MergeTable | None = None
    components: dict = field(default_factory=dict)

    @property
    def vocab_hash(self) -> str:
        return self.vocab.digest if self.vocab is not None else ""


def _write_str(f: BinaryIO, s: str) -> None:
    b = s.encode("utf-8")
    f.write(struct.pack("<I", len(b)))
    f.write(b)


def _read_exact(f: BinaryIO, n: int) -> bytes:
    b = f.read(n)
    if len(b) != n:
        raise CheckpointError("truncated checkpoint")
    return b


def _read_str(f: BinaryIO) -> str:
    (n,) = struct.unpack("<I", _read_exact(f, 4))
    return _read_exact(f, n).decode("utf-8")


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    if ckpt.kind not in KINDS:
        raise CheckpointError(f"unknown model kind {ckpt.kind!r}")
    f = io.BytesIO()
    f.write(MAGIC)
    f.write(struct.pack("<I", VERSION))
    _write_str(f, ckpt.kind)
    _write_str(f, json.dumps(ckpt.config, sort_keys=True))
    _write_str(f, ckpt.vocab.serialize() if ckpt.vocab is not None else "")
    _write_str(f, ckpt.merges.serialize() if ckpt.merges is not None else "")
    _write_str(f, ckpt.vocab_hash)
    _write_str(f, json.dumps(ckpt.components, sort_keys=True))
    f.write(struct.pack("<I", len(ckpt.params)))
    for name in sorted(ckpt.params):
        arr = np.asarray(ckpt.params[name], dtype="<f8", order="C")
        _write_str(f, name)
        f.write(struct.pack("<I", arr.ndim))
        f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        f.write(arr.tobytes())
    return f.getvalue()


def decode_checkpoint(data: bytes, origin: str = "checkpoint") -> Checkpoint:
    f = io.BytesIO(data)
    if f.read(8) != MAGIC:
        raise CheckpointError(f"{origin}: not a checkpoint (bad magic)")
    (version,) = struct.unpack("<I", _read_exact(f, 4))
    if version != VERSION:
        raise CheckpointError(f"{origin}: unsupported checkpoint version {version}")
    kind = _read_str(f)
    config = json.loads(_read_str(f))
    vocab_text = _read_str(f)
    merges_text = _read_str(f)
    vocab_hash = _read_str(f)
    components = json.loads(_read_str(f))
    vocab = Vocabulary.parse(vocab_text) if vocab_text else None
    merges = MergeTable.parse(merges_text) if merges_text else None
    if (vocab.digest if vocab else "") != vocab_hash:
        raise CheckpointError(f"{origin}: vocabulary hash does not match its contents")
    (n,) = struct.unpack("<I", _read_exact(f, 4))
    params = {}
    for _ in range(n):
        name = _read_str(f)
        (ndim,) = struct.unpack("<I", _read_exact(f, 4))
        shape = struct.unpack(f"<{ndim}Q", _read_exact(f, 8 * ndim))
        count = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(_read_exact(f, 8 * count), dtype="<f8").reshape(shape)
        params[name] = arr.astype(np.float64)
    if f.read(1):
        raise CheckpointError(f"{origin}: trailing bytes after parameters")
    return Checkpoint(kind, config, params, vocab, merges, components)


def atomic_write_bytes(path: str | os.PathLike, data: bytes) -> None:
    path = os.fspath(path)
    d = os.path.dirname(path) or "."
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def file_digest(path: str | os.PathLike) -> str:
    with open(path, "rb") as f:
        return hashlib.sha256(f.read()).hexdigest()


def read_checkpoint(path: str | os.PathLike, kind: str | None = None) -> Checkpoint:
    try:
        with open(path, "rb") as f:
            data = f.read()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e.strerror}") from e
    ckpt = decode_checkpoint(data, str(path))
    if kind is not None and ckpt.kind != kind:
        raise CheckpointError(f"{path}: expected a {kind} checkpoint, found {ckpt.kind}")
    return ckpt


# ---------------------------------------------------------------- model-level helpers

def to_checkpoint(model, components: dict | None = None) -> Checkpoint:
    # Fusion models hold no LM parameters; those are referenced by digest in ``components``.
    return Checkpoint(model.kind, model.config_dict(), model.state_dict(), model.vocab, model.merges,
                      components or {})


def save_model(model, path: str | os.PathLike, components: dict | None = None) -> str:
    """Write ``model`` atomically; returns the sha256 of the file."""
    data = encode_checkpoint(to_checkpoint(model, components))
    atomic_write_bytes(path, data)
    return hashlib.sha256(data).hexdigest()


def build_model(ckpt: Checkpoint, lms: list[LanguageModel] | None = None):
    """Reconstruct a model from a decoded checkpoint.

    Fusion checkpoints need their LMs; each must match the parameter digest
    recorded at save time.
    """
    if ckpt.kind == "lm":
        model = LanguageModel(LmConfig(**ckpt.config), ckpt.vocab, ckpt.merges)
    elif ckpt.kind == "nmt":
        model = TranslationModel(NmtConfig(**ckpt.config), ckpt.vocab, ckpt.merges)
    elif ckpt.kind == "fusion":
        from .fusion import FusionModel

        cfg = ckpt.config
        expected = ckpt.components.get("lm_digests", [])
        if lms is None or len(lms) != len(expected):
            raise CheckpointError(f"fusion checkpoint needs {len(expected)} language models")
        for i, (lm, digest) in enumerate(zip(lms, expected)):
            if lm.param_digest() != digest:
                raise CheckpointError(f"language model {i} does not match the one this fusion model was trained with")
            if ckpt.vocab is not None and lm.vocab is not None and lm.vocab.digest != ckpt.vocab.digest:
                raise CheckpointError(f"language model {i} vocabulary differs from the fusion checkpoint")
        nmt = TranslationModel(NmtConfig(**cfg["nmt"]), ckpt.vocab, ckpt.merges)
        model = FusionModel(nmt, lms, cfg["variant"], cfg["fusion_point"], cfg["nonlinearity"], cfg["seed"])
    else:
        raise CheckpointError(f"unknown model kind {ckpt.kind!r}")
    model.load_state_dict(ckpt.params)
    return model


def load_model(path: str | os.PathLike, kind: str | None = None, lms: list[LanguageModel] | None = None,
               vocab_hash: str | None = None):
    ckpt = read_checkpoint(path, kind)
    if vocab_hash is not None and ckpt.vocab_hash != vocab_hash:
        raise CheckpointError(f"{path}: vocabulary hash {ckpt.vocab_hash[:12]} != expected {vocab_hash[:12]}")
    return build_model(ckpt, lms)


def fusion_components(model, lm_paths: list[str] | None = None, nmt_path: str | None = None) -> dict:
    comp = {"lm_digests": model.lm_digests()}
    if lm_paths:
        comp["lm_files"] = [file_digest(p) for p in lm_paths]
    if nmt_path:
        comp["nmt_file"] = file_digest(nmt_path)
    return comp
