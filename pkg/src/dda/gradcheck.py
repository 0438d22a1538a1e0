"""Finite-difference checks for every primitive and each full model."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .fusion import FusionModel, gate_and_sum
from .lm import LanguageModel, LmConfig, lm_io
from .nmt import NmtConfig, TranslationModel, nmt_io
from .text import pad

TOLERANCE = 1e-4


@dataclass
class CheckResult:
    name: str
    error: float
    seconds: float

    @property
    def ok(self) -> bool:
        return self.error < TOLERANCE


Case = tuple[Callable[[], Tensor], list[Tensor]]


def _p(rng, *shape, scale=1.0) -> Tensor:
    return Tensor(rng.uniform(-scale, scale, shape), requires_grad=True)


def _weighted(out: Tensor, rng) -> Tensor:
    """Random linear functional so every output coordinate matters."""
    w = Tensor(rng.normal(size=out.shape))
    return ag.sum_(out * w)


def primitive_cases(seed: int = 0) -> dict[str, Case]:
    rng = np.random.default_rng(seed)
    a, b = _p(rng, 3, 4), _p(rng, 3, 4)
    m1, m2 = _p(rng, 3, 4), _p(rng, 4, 2)
    bias = _p(rng, 4)
    x = _p(rng, 2, 5, scale=2.0)
    pos = Tensor(rng.uniform(0.5, 2.0, (3, 4)), requires_grad=True)
    emb = _p(rng, 6, 3)
    ids = np.array([[0, 2, 2], [5, 1, 0]])
    logits = _p(rng, 5, 6, scale=2.0)
    targets = rng.integers(0, 6, size=5)
    tw = np.array([1.0, 1.0, 0.0, 1.0, 0.5])
    smask = np.array([[1, 1, 1, 0, 0], [1, 1, 1, 1, 1.0]])
    c1, c2 = _p(rng, 2, 3), _p(rng, 2, 2)
    s1, s2 = _p(rng, 2, 3), _p(rng, 2, 3)
    big = _p(rng, 4, 6)
    r = lambda out: _weighted(out, np.random.default_rng(seed + 1))  # noqa: E731
    return {
        "add": (lambda: r(a + b), [a, b]),
        "add_broadcast": (lambda: r(a + bias), [a, bias]),
        "sub": (lambda: r(a - b), [a, b]),
        "mul": (lambda: r(a * b), [a, b]),
        "neg": (lambda: r(-a), [a]),
        "matmul": (lambda: r(m1 @ m2), [m1, m2]),
        "sigmoid": (lambda: r(ag.sigmoid(x)), [x]),
        "tanh": (lambda: r(ag.tanh(x)), [x]),
        "exp": (lambda: r(ag.exp(x)), [x]),
        "log": (lambda: r(ag.log(pos)), [pos]),
        "sum_axis": (lambda: r(ag.sum_(a, axis=0)), [a]),
        "mean": (lambda: ag.mean(a * b), [a, b]),
        "reshape": (lambda: r(ag.reshape(a, (4, 3))), [a]),
        "concat": (lambda: r(ag.concat([c1, c2], axis=-1)), [c1, c2]),
        "stack": (lambda: r(ag.stack([s1, s2], axis=1)), [s1, s2]),
        "slice": (lambda: r(ag.slice_(big, (slice(1, 3), slice(0, 4)))), [big]),
        "split": (lambda: r(ag.split(big, 3, axis=-1)[1]) + r(ag.split(big, 3, axis=-1)[2] * 2.0), [big]),
        "embedding": (lambda: r(ag.embedding(emb, ids)), [emb]),
        "softmax": (lambda: r(ag.softmax(x)), [x]),
        "masked_softmax": (lambda: r(ag.softmax(x, mask=smask)), [x]),
        "log_softmax": (lambda: r(ag.log_softmax(x)), [x]),
        "cross_entropy": (lambda: ag.cross_entropy(logits, targets, tw), [logits]),
        "cross_entropy_sum": (lambda: ag.cross_entropy(logits, targets, reduction="sum"), [logits]),
    }


def _randomize_outputs(model, rng, scale=0.5) -> None:
    # output layers start at zero, which would hide gradients of everything upstream
    for name, p in model.parameters().items():
        if name.endswith("out.W") or name.endswith("out.b"):
            p.data = rng.uniform(-scale, scale, p.shape)


def model_cases(seed: int = 0, dim: int = 8, vocab: int = 7) -> dict[str, Case]:
    rng = np.random.default_rng(seed)
    lm = LanguageModel(LmConfig(vocab, dim, dim, 2, seed=seed))
    _randomize_outputs(lm, rng)
    seqs = [[4, 5, 6], [5, 4]]
    inp, out = lm_io(seqs)
    x, m = pad(inp)
    y, _ = pad(out)

    nmt = TranslationModel(NmtConfig(vocab, dim, dim, 1, seed=seed + 1))
    _randomize_outputs(nmt, rng)
    pairs = [([4, 5], [6, 5, 4]), ([6, 6, 5], [4])]
    src, tin, tout = nmt_io(pairs)
    s, sm = pad(src)
    ti, tm = pad(tin)
    to, _ = pad(tout)

    nmt_b = TranslationModel(NmtConfig(vocab, dim, dim, 1, bidirectional=True, input_feed=True, seed=seed + 2))
    _randomize_outputs(nmt_b, rng)

    lm_in = LanguageModel(LmConfig(vocab, dim, dim, 1, seed=seed + 3))
    lm_out = LanguageModel(LmConfig(vocab, dim, dim, 1, seed=seed + 4))
    fnmt = TranslationModel(NmtConfig(vocab, dim, dim, 1, seed=seed + 5))
    _randomize_outputs(fnmt, rng)
    fusion = FusionModel(fnmt, [lm_out, lm_in], "dda", "hidden", "sigmoid", seed=seed)
    fusion_emb = FusionModel(fnmt, [lm_out, lm_in], "dda", "both", "identity", seed=seed)

    H = 4
    gF = _p(rng, 3 * H, 3 * H, scale=0.5)
    gb = _p(rng, 3 * H, scale=0.5)
    states = [_p(rng, 2, H) for _ in range(3)]
    out_W, out_b = _p(rng, H, 5), _p(rng, 5)
    gtargets = np.array([1, 3])

    def gate_loss():
        fused, _ = gate_and_sum(states, gF, gb, "sigmoid")
        return ag.cross_entropy(fused @ out_W + out_b, gtargets)

    def train_params(model):
        return [p for p in model.parameters().values() if p.requires_grad]

    return {
        "lm": (lambda: lm.sequence_loss(x, y, m), train_params(lm)),
        "nmt": (lambda: nmt.sequence_loss(s, sm, ti, to, tm), train_params(nmt)),
        "nmt_bidir_feed": (lambda: nmt_b.sequence_loss(s, sm, ti, to, tm), train_params(nmt_b)),
        "gate_and_sum": (gate_loss, [gF, gb, *states, out_W, out_b]),
        "fusion_hidden": (lambda: fusion.sequence_loss(s, sm, ti, to, tm), train_params(fusion)),
        "fusion_both": (lambda: fusion_emb.sequence_loss(s, sm, ti, to, tm), train_params(fusion_emb)),
    }


def run_suite(which: str = "all", seed: int = 0, max_coords: int | None = 6) -> list[CheckResult]:
    """Run the selected group (``primitives``, ``models`` or ``all``)."""
    cases: dict[str, Case] = {}
    if which in ("all", "primitives"):
        cases.update({f"op:{k}": v for k, v in primitive_cases(seed).items()})
    if which in ("all", "models"):
        cases.update({f"model:{k}": v for k, v in model_cases(seed).items()})
    if not cases:
        raise ValueError(f"unknown grad-check group {which!r}")
    results = []
    for name, (fn, params) in cases.items():
        t0 = time.perf_counter()
        coords = None if name.startswith("op:") else max_coords
        err = ag.grad_check(fn, params, max_coords=coords, seed=seed)
        results.append(CheckResult(name, err, time.perf_counter() - t0))
    return results
