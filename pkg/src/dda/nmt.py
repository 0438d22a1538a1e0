"""Attentional LSTM encoder-decoder with additive (MLP) attention."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .nn import LSTMStack, Module, State, TrainConfig, TrainResult, run_training, select_state
from .text import BOS, EOS, MergeTable, Vocabulary, batch_iter, filter_long, pad


class VocabMismatch(ValueError):
    pass


@dataclass
class NmtConfig:
    vocab_size: int
    emb_dim: int = 64
    hidden_dim: int = 64
    num_layers: int = 2
    attn_dim: int | None = None
    bidirectional: bool = False
    input_feed: bool = False
    seed: int = 0


@dataclass
class EncoderOutput:
    annotations: Tensor  # (B, S, H)
    keys: Tensor  # (B, S, A), annotations projected once for attention
    mask: np.ndarray  # (B, S)
    final: State

    @property
    def lengths(self) -> np.ndarray:
        return self.mask.sum(axis=1).astype(int)

    def select(self, rows: np.ndarray) -> "EncoderOutput":
        return EncoderOutput(Tensor(self.annotations.data[rows]), Tensor(self.keys.data[rows]),
                             self.mask[rows], select_state(self.final, rows))


@dataclass
class DecoderState:
    lstm: State
    feed: Tensor | None = None

    def select(self, rows: np.ndarray) -> "DecoderState":
        feed = None if self.feed is None else Tensor(self.feed.data[rows])
        return DecoderState(select_state(self.lstm, rows), feed)


@dataclass
class DecoderStep:
    hidden: Tensor  # attentional hidden state s_t, (B, H)
    attention: np.ndarray  # (B, S)
    state: DecoderState
    embedding: Tensor  # target embedding of the previous token


class TranslationModel(Module):
    kind = "nmt"

    def __init__(self, config: NmtConfig, vocab: Vocabulary | None = None, merges: MergeTable | None = None):
        super().__init__()
        if vocab is not None and len(vocab) != config.vocab_size:
            raise ValueError(f"vocab has {len(vocab)} entries, config says {config.vocab_size}")
        if config.bidirectional and config.hidden_dim % 2:
            raise ValueError("bidirectional encoder needs an even hidden_dim")
        self.config = config
        self.vocab = vocab
        self.merges = merges
        rng = np.random.default_rng(config.seed)
        V, E, H, L = config.vocab_size, config.emb_dim, config.hidden_dim, config.num_layers
        A = config.attn_dim or H
        self.src_embed = self.add_param("src_embed", ag.uniform_init(rng, (V, E)))
        self.tgt_embed = self.add_param("tgt_embed", ag.uniform_init(rng, (V, E)))
        if config.bidirectional:
            self.enc_fwd = LSTMStack(self, "enc_fwd", E, H // 2, L, rng)
            self.enc_bwd = LSTMStack(self, "enc_bwd", E, H // 2, L, rng)
        else:
            self.enc_fwd = LSTMStack(self, "enc", E, H, L, rng)
            self.enc_bwd = None
        self.dec = LSTMStack(self, "dec", E + (H if config.input_feed else 0), H, L, rng)
        self.attn_enc = self.add_param("attn.W_enc", ag.uniform_init(rng, (H, A)))
        self.attn_dec = self.add_param("attn.W_dec", ag.uniform_init(rng, (H, A)))
        self.attn_b = self.add_param("attn.b", ag.uniform_init(rng, (A,)))
        self.attn_v = self.add_param("attn.v", ag.uniform_init(rng, (A, 1)))
        self.comb_W = self.add_param("comb.W", ag.uniform_init(rng, (2 * H, H)))
        self.comb_b = self.add_param("comb.b", ag.uniform_init(rng, (H,)))
        self.out_W = self.add_param("out.W", np.zeros((H, V)))
        self.out_b = self.add_param("out.b", np.zeros(V))

    @property
    def hidden_dim(self) -> int:
        return self.config.hidden_dim

    def config_dict(self) -> dict:
        return asdict(self.config)

    def _check_ids(self, ids: np.ndarray) -> None:
        if ids.size and (ids.min() < 0 or ids.max() >= self.config.vocab_size):
            raise ValueError(f"token id out of range for vocabulary of {self.config.vocab_size}")

    def encode(self, src: np.ndarray, mask: np.ndarray) -> EncoderOutput:
        src = np.asarray(src, dtype=np.int64)
        if src.ndim != 2 or src.shape[1] == 0 or mask.sum(axis=1).min() == 0:
            raise ValueError("cannot encode an empty source sentence")
        self._check_ids(src)
        B, S = src.shape
        emb = ag.embedding(self.src_embed, src)
        steps = [emb[:, t, :] for t in range(S)]
        state = self.enc_fwd.initial_state(B)
        fwd = []
        for t in range(S):
            state = self.enc_fwd.step(steps[t], state, mask[:, t])
            fwd.append(state[-1][0])
        final = state
        if self.enc_bwd is not None:
            bstate = self.enc_bwd.initial_state(B)
            bwd: list[Tensor] = [None] * S  # type: ignore[list-item]
            for t in reversed(range(S)):
                bstate = self.enc_bwd.step(steps[t], bstate, mask[:, t])
                bwd[t] = bstate[-1][0]
            fwd = [ag.concat([f, b], axis=-1) for f, b in zip(fwd, bwd)]
            final = [(ag.concat([hf, hb], axis=-1), ag.concat([cf, cb], axis=-1))
                     for (hf, cf), (hb, cb) in zip(state, bstate)]
        annotations = ag.stack(fwd, axis=1)
        keys = annotations @ self.attn_enc + self.attn_b
        return EncoderOutput(annotations, keys, np.asarray(mask, dtype=np.float64), final)

    def initial_decoder_state(self, enc: EncoderOutput) -> DecoderState:
        feed = None
        if self.config.input_feed:
            feed = Tensor(np.zeros((enc.mask.shape[0], self.hidden_dim)))
        return DecoderState(list(enc.final), feed)

    def decoder_step(self, enc: EncoderOutput, prev_ids, state: DecoderState,
                     mask: np.ndarray | None = None) -> DecoderStep:
        prev_ids = np.asarray(prev_ids, dtype=np.int64)
        self._check_ids(prev_ids)
        emb = ag.embedding(self.tgt_embed, prev_ids)
        x = emb if state.feed is None else ag.concat([emb, state.feed], axis=-1)
        lstm = self.dec.step(x, state.lstm, mask)
        h = lstm[-1][0]
        B, S, _ = enc.keys.shape
        query = ag.reshape(h @ self.attn_dec, (B, 1, enc.keys.shape[2]))
        energy = ag.reshape(ag.tanh(enc.keys + query) @ self.attn_v, (B, S))
        alpha = ag.softmax(energy, axis=-1, mask=enc.mask > 0)
        ctx = ag.reshape(ag.matmul(ag.reshape(alpha, (B, 1, S)), enc.annotations), (B, self.hidden_dim))
        s = ag.tanh(ag.concat([h, ctx], axis=-1) @ self.comb_W + self.comb_b)
        feed = s if self.config.input_feed else None
        return DecoderStep(s, alpha.data, DecoderState(lstm, feed), emb)

    def logits(self, hidden: Tensor) -> Tensor:
        return hidden @ self.out_W + self.out_b

    def run_decoder(self, enc: EncoderOutput, tgt_in: np.ndarray, tgt_mask: np.ndarray) -> list[DecoderStep]:
        state = self.initial_decoder_state(enc)
        steps = []
        for t in range(tgt_in.shape[1]):
            step = self.decoder_step(enc, tgt_in[:, t], state, tgt_mask[:, t])
            steps.append(step)
            state = step.state
        return steps

    def sequence_loss(self, src, src_mask, tgt_in, tgt_out, tgt_mask, reduction: str = "mean") -> Tensor:
        enc = self.encode(src, src_mask)
        steps = self.run_decoder(enc, tgt_in, tgt_mask)
        B, T = tgt_in.shape
        h = ag.reshape(ag.stack([s.hidden for s in steps], axis=1), (B * T, self.hidden_dim))
        return ag.cross_entropy(self.logits(h), tgt_out.reshape(-1), tgt_mask.reshape(-1), reduction)


def nmt_io(pairs: Sequence[tuple[Sequence[int], Sequence[int]]]):
    src = [list(s) for s, _ in pairs]
    tgt_in = [[BOS] + list(t) for _, t in pairs]
    tgt_out = [list(t) + [EOS] for _, t in pairs]
    return src, tgt_in, tgt_out


def encode(model: TranslationModel, source_ids: Sequence[int] | Sequence[Sequence[int]]) -> EncoderOutput:
    """Encode one sentence (flat id list) or a batch (list of id lists)."""
    if len(source_ids) == 0:
        raise ValueError("cannot encode an empty source sentence")
    batch = [source_ids] if np.ndim(source_ids[0]) == 0 else list(source_ids)
    ids, mask = pad(batch)
    with ag.no_grad():
        return model.encode(ids, mask)


def decode_step(model: TranslationModel, enc: EncoderOutput, prev_token, prev_state: DecoderState | None = None
                ) -> DecoderStep:
    prev = np.atleast_1d(np.asarray(prev_token, dtype=np.int64))
    if prev_state is None:
        prev_state = model.initial_decoder_state(enc)
    with ag.no_grad():
        return model.decoder_step(enc, prev, prev_state)


def step_log_probs(model: TranslationModel, step: DecoderStep) -> np.ndarray:
    return ag.log_softmax_np(model.logits(step.hidden).data)


def _check_pairs(model: TranslationModel, pairs) -> None:
    V = model.config.vocab_size
    for s, t in pairs:
        if (s and max(s) >= V) or (t and max(t) >= V):
            raise VocabMismatch(f"corpus contains ids >= model vocabulary size {V}")


def train_nmt(model: TranslationModel, pairs: Sequence[tuple[Sequence[int], Sequence[int]]],
              config: TrainConfig, on_epoch=None) -> TrainResult:
    """Teacher-forced cross-entropy over targets; copied or back-translated pairs need no special casing."""
    _check_pairs(model, pairs)
    keep = [i for i in filter_long([t for _, t in pairs], config.max_len)
            if 0 < len(pairs[i][0]) <= config.max_len]
    src, tgt_in, tgt_out = nmt_io([pairs[i] for i in keep])
    if not src:
        raise ValueError("no training pairs left after filtering")

    def batches(epoch):
        yield from batch_iter([src, tgt_in, tgt_out], config.batch_size, seed=config.seed * 100003 + epoch)

    def loss_fn(batch):
        s, ti, to = batch.ids
        sm, tm = batch.masks[0], batch.masks[1]
        return model.sequence_loss(s, sm, ti, to, tm), float(tm.sum())

    return run_training(model.parameters(), batches, loss_fn, config, "nmt", on_epoch)


def fine_tune(model: TranslationModel, pairs, config: TrainConfig, vocab: Vocabulary | None = None,
              on_epoch=None) -> TrainResult:
    """Continue training a loaded model on new (typically in-domain) pairs."""
    if vocab is not None and model.vocab is not None and vocab.digest != model.vocab.digest:
        raise VocabMismatch("corpus vocabulary differs from the checkpoint vocabulary")
    if not pairs:
        raise ValueError("fine-tuning corpus is empty")
    return train_nmt(model, pairs, config, on_epoch)


def corpus_nll(model: TranslationModel, pairs, batch_size: int = 64) -> float:
    """Mean per-token NLL (EOS counted) of the targets given the sources."""
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


def gold_log_probs(model: TranslationModel, pairs, batch_size: int = 64) -> list[np.ndarray]:
    """Per-position gold-token log-probabilities under teacher forcing."""
    src, tgt_in, tgt_out = nmt_io(pairs)
    out: list[np.ndarray] = []
    with ag.no_grad():
        for start in range(0, len(src), batch_size):
            sl = slice(start, start + batch_size)
            s, sm = pad(src[sl])
            ti, tm = pad(tgt_in[sl])
            to, _ = pad(tgt_out[sl])
            enc = model.encode(s, sm)
            steps = model.run_decoder(enc, ti, tm)
            cols = []
            for t, step in enumerate(steps):
                logp = step_log_probs(model, step)
                cols.append(logp[np.arange(len(to)), to[:, t]])
            per = np.stack(cols, axis=1)
            for row, seq in enumerate(tgt_out[sl]):
                out.append(per[row, : len(seq)])
    return out
