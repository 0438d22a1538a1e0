"""Recurrent (LSTM) language model."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .nn import LSTMStack, Module, State, TrainConfig, TrainResult, run_training
from .text import BOS, EOS, MergeTable, Vocabulary, batch_iter, filter_long, pad


@dataclass
class LmConfig:
    vocab_size: int
    emb_dim: int = 64
    hidden_dim: int = 64
    num_layers: int = 2
    dropout: float = 0.0
    seed: int = 0


@dataclass
class LmStep:
    hidden: np.ndarray
    states: State
    probs: np.ndarray
    log_probs: np.ndarray


class LanguageModel(Module):
    """Embedding -> stacked LSTM -> softmax over the vocabulary.

    The output projection starts at zero so an untrained model is uniform.
    """

    kind = "lm"

    def __init__(self, config: LmConfig, vocab: Vocabulary | None = None, merges: MergeTable | None = None):
        super().__init__()
        if vocab is not None and len(vocab) != config.vocab_size:
            raise ValueError(f"vocab has {len(vocab)} entries, config says {config.vocab_size}")
        self.config = config
        self.vocab = vocab
        self.merges = merges
        self._rng = np.random.default_rng(config.seed)
        rng = np.random.default_rng(config.seed)
        V, E, H = config.vocab_size, config.emb_dim, config.hidden_dim
        self.embed = self.add_param("embed", ag.uniform_init(rng, (V, E)))
        self.lstm = LSTMStack(self, "lstm", E, H, config.num_layers, rng)
        self.out_W = self.add_param("out.W", np.zeros((H, V)))
        self.out_b = self.add_param("out.b", np.zeros(V))

    @property
    def hidden_dim(self) -> int:
        return self.config.hidden_dim

    def initial_state(self, batch: int) -> State:
        return self.lstm.initial_state(batch)

    def embed_tokens(self, ids) -> Tensor:
        ids = np.asarray(ids)
        if ids.size and ids.max() >= self.config.vocab_size:
            raise ValueError(f"token id {int(ids.max())} >= vocabulary size {self.config.vocab_size}")
        return ag.embedding(self.embed, ids)

    def step(self, prev_ids, state: State, mask: np.ndarray | None = None,
             train: bool = False) -> tuple[Tensor, State, Tensor]:
        """Returns (top-layer hidden, new state, input embedding)."""
        emb = self.embed_tokens(prev_ids)
        drop = self.config.dropout if train else 0.0
        x = ag.dropout(emb, drop, self._rng) if drop else emb
        state = self.lstm.step(x, state, mask, dropout=drop, rng=self._rng)
        return state[-1][0], state, emb

    def logits(self, hidden: Tensor) -> Tensor:
        return hidden @ self.out_W + self.out_b

    def run(self, inputs: np.ndarray, mask: np.ndarray, train: bool = False) -> tuple[list[Tensor], list[Tensor]]:
        """Teacher-forced pass over (B, T) inputs; per-step hidden states and embeddings."""
        state = self.initial_state(inputs.shape[0])
        hiddens, embs = [], []
        for t in range(inputs.shape[1]):
            h, state, emb = self.step(inputs[:, t], state, mask[:, t], train=train)
            hiddens.append(h)
            embs.append(emb)
        return hiddens, embs

    def sequence_loss(self, inputs: np.ndarray, outputs: np.ndarray, mask: np.ndarray,
                      reduction: str = "mean", train: bool = False) -> Tensor:
        hiddens, _ = self.run(inputs, mask, train=train)
        T, B = inputs.shape[1], inputs.shape[0]
        h = ag.reshape(ag.stack(hiddens, axis=1), (B * T, self.hidden_dim))
        return ag.cross_entropy(self.logits(h), outputs.reshape(-1), mask.reshape(-1), reduction)

    def config_dict(self) -> dict:
        return asdict(self.config)


def lm_io(seqs: Sequence[Sequence[int]]) -> tuple[list[list[int]], list[list[int]]]:
    """BOS-prefixed inputs and EOS-suffixed outputs."""
    return [[BOS] + list(s) for s in seqs], [list(s) + [EOS] for s in seqs]


def _pad_pair(inp, out):
    x, m = pad(inp)
    y, _ = pad(out)
    return x, y, m


def lm_step(model: LanguageModel, prev_token_id, prev_states: State | None = None) -> LmStep:
    """One step for a single prefix (or a batch of them)."""
    ids = np.atleast_1d(np.asarray(prev_token_id, dtype=np.int64))
    if prev_states is None:
        prev_states = model.initial_state(len(ids))
    with ag.no_grad():
        h, state, _ = model.step(ids, prev_states)
        logp = ag.log_softmax_np(model.logits(h).data)
    return LmStep(h.data, state, np.exp(logp), logp)


def train_lm(model: LanguageModel, sequences: Sequence[Sequence[int]], config: TrainConfig) -> TrainResult:
    """Minimise mean per-token NLL with teacher forcing (BOS in, EOS out)."""
    keep = filter_long(sequences, config.max_len)
    inputs, outputs = lm_io([sequences[i] for i in keep])
    if not inputs:
        raise ValueError("no training sentences left after filtering")

    def batches(epoch):
        for b in batch_iter([inputs, outputs], config.batch_size, seed=config.seed * 100003 + epoch):
            yield b

    def loss_fn(batch):
        x, y = batch.ids
        m = batch.masks[0]
        return model.sequence_loss(x, y, m, train=True), float(m.sum())

    return run_training(model.parameters(), batches, loss_fn, config, "lm")


def score_sequence(model: LanguageModel, ids: Sequence[int]) -> float:
    """Total log-probability of ``ids`` followed by EOS, conditioned on BOS."""
    inp, out = lm_io([ids])
    x = np.asarray(inp, dtype=np.int64)
    y = np.asarray(out, dtype=np.int64)
    m = np.ones_like(x, dtype=np.float64)
    with ag.no_grad():
        return -model.sequence_loss(x, y, m, reduction="sum").item()


def token_log_probs(model: LanguageModel, seqs: Sequence[Sequence[int]], batch_size: int = 64) -> list[np.ndarray]:
    """Per-position gold log-probabilities (EOS included) for each sequence."""
    result: list[np.ndarray] = [None] * len(seqs)  # type: ignore[list-item]
    inputs, outputs = lm_io(seqs)
    with ag.no_grad():
        for start in range(0, len(seqs), batch_size):
            idx = list(range(start, min(start + batch_size, len(seqs))))
            x, y, m = _pad_pair([inputs[i] for i in idx], [outputs[i] for i in idx])
            hiddens, _ = model.run(x, m)
            for t, h in enumerate(hiddens):
                logp = ag.log_softmax_np(model.logits(h).data)
                hiddens[t] = logp[np.arange(len(idx)), y[:, t]]
            per_step = np.stack(hiddens, axis=1)
            for row, i in enumerate(idx):
                result[i] = per_step[row, : len(outputs[i])]
    return result


def perplexity(model: LanguageModel, seqs: Sequence[Sequence[int]]) -> float:
    """exp of the mean per-token NLL over the corpus, EOS counted."""
    lps = token_log_probs(model, seqs)
    total = sum(float(lp.sum()) for lp in lps)
    count = sum(len(lp) for lp in lps)
    return math.exp(-total / count)
