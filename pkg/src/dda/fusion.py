"""Combining a translation model with in-domain and out-of-domain language models.

Shallow strategies rescore the per-step distributions at decoding time. Deep
strategies learn a gate over the concatenated component states and feed the
gated sum through the translation model's output layer; the language models
stay frozen while the gate and the translation model are trained.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .lm import LanguageModel
from .nmt import DecoderState, EncoderOutput, TranslationModel, VocabMismatch, nmt_io
from .nn import Module, State, TrainConfig, TrainResult, run_training, select_state
from .text import batch_iter, filter_long, pad

log = logging.getLogger(__name__)

PROB_FLOOR = 1e-12
LOG_FLOOR = float(np.log(PROB_FLOOR))

# LM roles per deep variant, in the order their states enter the concatenation
VARIANTS: dict[str, tuple[str, ...]] = {
    "dda": ("lm_out", "lm_in"),
    "lm-deep": ("lm_in",),
    "two-lm-in": ("lm_in", "lm_in"),
    "two-lm-out": ("lm_out", "lm_out"),
    "two-lm-general": ("lm_general", "lm_general"),
}
FUSION_POINTS = ("hidden", "embedding", "both", "output")
NONLINEARITIES = ("sigmoid", "identity")


class FusionError(ValueError):
    pass


# ---------------------------------------------------------------- shallow

def _floor_log(logp: np.ndarray) -> np.ndarray:
    return np.maximum(logp, LOG_FLOOR)


def _normalize_log(x: np.ndarray) -> np.ndarray:
    m = np.max(x, axis=-1, keepdims=True)
    return x - (m + np.log(np.sum(np.exp(x - m), axis=-1, keepdims=True)))


def fuse_log_probs(logp_nmt: np.ndarray, bonus: np.ndarray) -> np.ndarray:
    """Add a per-token log-space ``bonus`` to ``logp_nmt`` and renormalise.

    Rows whose bonus is identically zero are returned unchanged, so the
    degenerate settings reproduce the translation model bit for bit.
    """
    logp_nmt = np.asarray(logp_nmt, dtype=np.float64)
    bonus = np.broadcast_to(bonus, logp_nmt.shape)
    out = _normalize_log(_floor_log(logp_nmt) + bonus)
    same = ~np.any(bonus != 0.0, axis=-1)
    if np.any(same):
        out = np.where(same[..., None], logp_nmt, out)
    if not np.all(np.isfinite(out)):
        raise FusionError("fused log-probabilities are not finite")
    return out


def dda_shallow_log_probs(logp_nmt, logp_lm_in, logp_lm_out, beta: float) -> np.ndarray:
    """log p ∝ log p_nmt + beta * (log p_lm_in - log p_lm_out), renormalised."""
    if beta < 0 or not np.isfinite(beta):
        raise FusionError(f"beta must be finite and >= 0, got {beta}")
    if beta == 0:
        return np.array(logp_nmt, dtype=np.float64)
    diff = _floor_log(np.asarray(logp_lm_in)) - _floor_log(np.asarray(logp_lm_out))
    return fuse_log_probs(logp_nmt, beta * diff)


def lm_shallow_log_probs(logp_nmt, logp_lm_in, beta: float) -> np.ndarray:
    if beta < 0 or not np.isfinite(beta):
        raise FusionError(f"beta must be finite and >= 0, got {beta}")
    if beta == 0:
        return np.array(logp_nmt, dtype=np.float64)
    return fuse_log_probs(logp_nmt, beta * _floor_log(np.asarray(logp_lm_in)))


def _check_simplex(name: str, p: np.ndarray) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    if not np.all(np.isfinite(p)) or np.any(p < 0):
        raise FusionError(f"{name} is not a probability distribution")
    return p


def _to_probs(logp: np.ndarray) -> np.ndarray:
    return np.exp(logp)


def dda_shallow_combine(p_nmt, p_lm_in, p_lm_out, beta: float) -> np.ndarray:
    """Shallow domain-differential combination of three distributions."""
    p_nmt = _check_simplex("p_nmt", p_nmt)
    p_lm_in = _check_simplex("p_lm_in", p_lm_in)
    p_lm_out = _check_simplex("p_lm_out", p_lm_out)
    if beta == 0:
        return p_nmt.copy()
    with np.errstate(divide="ignore"):
        diff = _floor_log(np.log(p_lm_in)) - _floor_log(np.log(p_lm_out))
    if not np.any(diff != 0.0):
        return p_nmt.copy()
    with np.errstate(divide="ignore"):
        logp = np.log(p_nmt)
    return _to_probs(fuse_log_probs(logp, beta * diff))


def lm_shallow_combine(p_nmt, p_lm_in, beta: float) -> np.ndarray:
    """Classic shallow fusion with the in-domain LM only."""
    p_nmt = _check_simplex("p_nmt", p_nmt)
    p_lm_in = _check_simplex("p_lm_in", p_lm_in)
    if beta == 0:
        return p_nmt.copy()
    with np.errstate(divide="ignore"):
        logp = np.log(p_nmt)
        bonus = beta * _floor_log(np.log(p_lm_in))
    return _to_probs(fuse_log_probs(logp, bonus))


# ---------------------------------------------------------------- deep

@dataclass
class DeepFusionParams:
    F: np.ndarray  # (k*D, k*D)
    bias: np.ndarray  # (k*D,)
    nonlinearity: str = "sigmoid"
    fusion_point: str = "hidden"
    variant: str = "dda"


@dataclass
class FusedStep:
    state: np.ndarray
    gates: list[np.ndarray]
    distribution: np.ndarray | None = None


def gate_and_sum(components: Sequence[Tensor], F: Tensor, bias: Tensor, nonlinearity: str
                 ) -> tuple[Tensor, list[Tensor]]:
    """Concatenate, transform linearly, split into one gate per component, and sum the gated states."""
    dims = {c.shape[-1] for c in components}
    if len(dims) != 1:
        raise FusionError(f"component state sizes differ: {[c.shape[-1] for c in components]}")
    k = len(components)
    concat = ag.concat(list(components), axis=-1)
    if F.shape != (concat.shape[-1], concat.shape[-1]):
        raise FusionError(f"gate transform has shape {F.shape}, expected {(concat.shape[-1],) * 2}")
    pre = concat @ F + bias
    if nonlinearity == "sigmoid":
        pre = ag.sigmoid(pre)
    elif nonlinearity != "identity":
        raise FusionError(f"unknown gate nonlinearity {nonlinearity!r}")
    gates = ag.split(pre, k, axis=-1)
    fused = gates[0] * components[0]
    for g, c in zip(gates[1:], components[1:]):
        fused = fused + g * c
    return fused, gates


def deep_fuse_step(s_lm_out, s_lm_in, s_nmt, params: DeepFusionParams,
                   out_W: np.ndarray | None = None, out_b: np.ndarray | None = None) -> FusedStep:
    """Gate three states and optionally project the result to a distribution."""
    arrays = [np.asarray(s, dtype=np.float64) for s in (s_lm_out, s_lm_in, s_nmt)]
    single = all(a.ndim == 1 for a in arrays)
    comps = [Tensor(np.atleast_2d(a)) for a in arrays]
    with ag.no_grad():
        fused, gates = gate_and_sum(comps, Tensor(params.F), Tensor(params.bias), params.nonlinearity)
    state, gate_arrays = fused.data, [g.data for g in gates]
    dist = None
    if out_W is not None:
        logits = state @ out_W + (0.0 if out_b is None else out_b)
        dist = np.exp(ag.log_softmax_np(logits))
    if single:
        state, gate_arrays = state[0], [g[0] for g in gate_arrays]
        dist = None if dist is None else dist[0]
    return FusedStep(state, gate_arrays, dist)


@dataclass
class FusionState:
    enc: EncoderOutput
    dec: DecoderState
    lms: list[State]

    def select(self, rows: np.ndarray) -> "FusionState":
        return FusionState(self.enc.select(rows), self.dec.select(rows), [select_state(s, rows) for s in self.lms])


class FusionModel(Module):
    """Translation model plus frozen LMs joined by a learned gate."""

    kind = "fusion"

    def __init__(self, nmt: TranslationModel, lms: Sequence[LanguageModel], variant: str = "dda",
                 fusion_point: str = "hidden", nonlinearity: str = "sigmoid", seed: int = 0):
        super().__init__()
        if variant not in VARIANTS:
            raise FusionError(f"unknown variant {variant!r}; choose from {sorted(VARIANTS)}")
        if len(lms) != len(VARIANTS[variant]):
            raise FusionError(f"variant {variant!r} needs {len(VARIANTS[variant])} LMs, got {len(lms)}")
        if fusion_point not in FUSION_POINTS:
            raise FusionError(f"unknown fusion point {fusion_point!r}")
        if nonlinearity not in NONLINEARITIES:
            raise FusionError(f"unknown gate nonlinearity {nonlinearity!r}")
        for lm in lms:
            if lm.config.vocab_size != nmt.config.vocab_size:
                raise VocabMismatch("LM and NMT vocabulary sizes differ")
            if lm.vocab is not None and nmt.vocab is not None and lm.vocab.digest != nmt.vocab.digest:
                raise VocabMismatch("LM and NMT vocabularies differ")
            if fusion_point in ("hidden", "both") and lm.hidden_dim != nmt.hidden_dim:
                raise FusionError(f"LM hidden size {lm.hidden_dim} != NMT hidden size {nmt.hidden_dim}")
            if fusion_point in ("embedding", "both") and lm.config.emb_dim != nmt.config.emb_dim:
                raise FusionError("LM and NMT embedding sizes differ")
        if fusion_point in ("embedding", "both") and nmt.config.emb_dim != nmt.hidden_dim:
            raise FusionError("embedding fusion needs emb_dim == hidden_dim to reuse the output layer")
        if fusion_point == "output":
            log.warning("fusing output probabilities is numerically unstable; prefer hidden states")
        self.nmt = nmt
        self.lms = list(lms)
        self.variant = variant
        self.fusion_point = fusion_point
        self.nonlinearity = nonlinearity
        self.seed = seed
        k = len(lms) + 1
        if fusion_point == "both":
            k *= 2
        D = nmt.config.vocab_size if fusion_point == "output" else nmt.hidden_dim
        rng = np.random.default_rng(seed)
        self.F = self.add_param("fusion.F", ag.uniform_init(rng, (k * D, k * D)))
        self.bias = self.add_param("fusion.b", np.zeros(k * D))
        for name, p in nmt.params.items():
            self.params[f"nmt.{name}"] = p
        self.vocab = nmt.vocab
        self.merges = nmt.merges

    @property
    def roles(self) -> tuple[str, ...]:
        return VARIANTS[self.variant]

    def fusion_params(self) -> DeepFusionParams:
        return DeepFusionParams(self.F.data.copy(), self.bias.data.copy(), self.nonlinearity,
                                self.fusion_point, self.variant)

    def lm_digests(self) -> list[str]:
        return [lm.param_digest() for lm in self.lms]

    def config_dict(self) -> dict:
        return {"variant": self.variant, "fusion_point": self.fusion_point,
                "nonlinearity": self.nonlinearity, "seed": self.seed, "nmt": self.nmt.config_dict(),
                "lms": [lm.config_dict() for lm in self.lms]}

    def _components(self, lm_outs: list[tuple[Tensor, Tensor, np.ndarray | None]],
                    nmt_hidden: Tensor, nmt_emb: Tensor) -> list[Tensor]:
        if self.fusion_point == "hidden":
            return [h for h, _, _ in lm_outs] + [nmt_hidden]
        if self.fusion_point == "embedding":
            return [e for _, e, _ in lm_outs] + [nmt_emb]
        if self.fusion_point == "both":
            return [e for _, e, _ in lm_outs] + [nmt_emb] + [h for h, _, _ in lm_outs] + [nmt_hidden]
        nmt_logp = ag.log_softmax(self.nmt.logits(nmt_hidden))
        return [Tensor(lp) for _, _, lp in lm_outs] + [nmt_logp]

    def _lm_step(self, lm: LanguageModel, prev_ids, state: State, mask=None):
        with ag.no_grad():
            h, state, emb = lm.step(prev_ids, state, mask)
            lp = ag.log_softmax_np(lm.logits(h).data) if self.fusion_point == "output" else None
        return (Tensor(h.data), Tensor(emb.data), lp), state

    def output_logits(self, fused: Tensor) -> Tensor:
        if self.fusion_point == "output":
            return fused
        return self.nmt.logits(fused)

    def start(self, enc: EncoderOutput) -> FusionState:
        B = enc.mask.shape[0]
        return FusionState(enc, self.nmt.initial_decoder_state(enc), [lm.initial_state(B) for lm in self.lms])

    def step(self, state: FusionState, prev_ids, mask=None) -> tuple[Tensor, np.ndarray, FusionState, list[Tensor]]:
        """Returns (logits, attention, new state, gates)."""
        dec = self.nmt.decoder_step(state.enc, prev_ids, state.dec, mask)
        lm_outs, lm_states = [], []
        for lm, s in zip(self.lms, state.lms):
            out, s = self._lm_step(lm, prev_ids, s, mask)
            lm_outs.append(out)
            lm_states.append(s)
        comps = self._components(lm_outs, dec.hidden, dec.embedding)
        fused, gates = gate_and_sum(comps, self.F, self.bias, self.nonlinearity)
        return self.output_logits(fused), dec.attention, FusionState(state.enc, dec.state, lm_states), gates

    def sequence_loss(self, src, src_mask, tgt_in, tgt_out, tgt_mask, reduction: str = "mean") -> Tensor:
        enc = self.nmt.encode(src, src_mask)
        state = self.start(enc)
        logits = []
        for t in range(tgt_in.shape[1]):
            lg, _, state, _ = self.step(state, tgt_in[:, t], tgt_mask[:, t])
            logits.append(lg)
        B, T = tgt_in.shape
        stacked = ag.reshape(ag.stack(logits, axis=1), (B * T, logits[0].shape[-1]))
        return ag.cross_entropy(stacked, tgt_out.reshape(-1), tgt_mask.reshape(-1), reduction)


def train_deep_fusion(nmt: TranslationModel, lms: Sequence[LanguageModel], pairs, config: TrainConfig,
                      variant: str = "dda", fusion_point: str = "hidden", nonlinearity: str = "sigmoid",
                      model: FusionModel | None = None, on_epoch=None) -> tuple[FusionModel, TrainResult]:
    """Train the gate and the translation model; the LMs are only read.

    Passing an existing ``model`` continues training it (continued-training
    setups reuse this with in-domain pairs).
    """
    if model is None:
        model = FusionModel(nmt, lms, variant, fusion_point, nonlinearity, seed=config.seed)
    before = model.lm_digests()
    keep = [i for i in filter_long([t for _, t in pairs], config.max_len)
            if 0 < len(pairs[i][0]) <= config.max_len]
    src, tgt_in, tgt_out = nmt_io([pairs[i] for i in keep])
    if not src:
        raise ValueError("no training pairs left after filtering")
    V = nmt.config.vocab_size
    if max(max(max(s) for s in src), max(max(t) for t in tgt_out)) >= V:
        raise VocabMismatch(f"corpus contains ids >= vocabulary size {V}")

    def batches(epoch):
        yield from batch_iter([src, tgt_in, tgt_out], config.batch_size, seed=config.seed * 100003 + epoch)

    def loss_fn(batch):
        s, ti, to = batch.ids
        return model.sequence_loss(s, batch.masks[0], ti, to, batch.masks[1]), float(batch.masks[1].sum())

    result = run_training(model.parameters(), batches, loss_fn, config, f"fusion[{model.variant}]", on_epoch)
    if model.lm_digests() != before:
        raise RuntimeError("language model parameters changed during fusion training")
    return model, result


def fusion_corpus_nll(model: FusionModel, pairs, batch_size: int = 64) -> float:
    src, tgt_in, tgt_out = nmt_io(pairs)
    total, count = 0.0, 0.0
    with ag.no_grad():
        for start in range(0, len(src), batch_size):
            sl = slice(start, start + batch_size)
            s, sm = pad(src[sl])
            ti, tm = pad(tgt_in[sl])
            to, _ = pad(tgt_out[sl])
            total += model.sequence_loss(s, sm, ti, to, tm, reduction="sum").item()
            count += tm.sum()
    return total / count
