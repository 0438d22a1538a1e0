"""Layers shared by the language and translation models."""

from __future__ import annotations

import hashlib
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator

import numpy as np

from . import autograd as ag
from .autograd import Tensor

log = logging.getLogger(__name__)

State = list[tuple[Tensor, Tensor]]


class TrainingDiverged(ag.NonFiniteError):
    pass


class Module:
    """Holds named parameters; subclasses fill ``self.params``."""

    kind = "module"

    def __init__(self):
        self.params: dict[str, Tensor] = {}

    def add_param(self, name: str, value: np.ndarray) -> Tensor:
        t = Tensor(value, requires_grad=True, name=name)
        self.params[name] = t
        return t

    def parameters(self) -> dict[str, Tensor]:
        return self.params

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(state)
        extra = set(state) - set(self.params)
        if missing or extra:
            raise KeyError(f"parameter mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for k, v in state.items():
            if v.shape != self.params[k].shape:
                raise ag.ShapeError(f"{k}: checkpoint shape {v.shape} != model {self.params[k].shape}")
            self.params[k].data = np.array(v, dtype=np.float64)

    def param_digest(self) -> str:
        h = hashlib.sha256()
        for k in sorted(self.params):
            h.update(k.encode())
            h.update(np.ascontiguousarray(self.params[k].data).tobytes())
        return h.hexdigest()

    def freeze(self) -> None:
        for p in self.params.values():
            p.requires_grad = False


class LSTMStack:
    """L stacked LSTM layers; layer l owns ``{prefix}.{l}.W`` ((in+H) x 4H) and ``.b``."""

    def __init__(self, module: Module, prefix: str, input_dim: int, hidden_dim: int, num_layers: int,
                 rng: np.random.Generator):
        if num_layers < 1:
            raise ValueError("num_layers must be >= 1")
        self.hidden_dim = hidden_dim
        self.num_layers = num_layers
        self.weights = []
        for layer in range(num_layers):
            d_in = input_dim if layer == 0 else hidden_dim
            W = module.add_param(f"{prefix}.{layer}.W", ag.uniform_init(rng, (d_in + hidden_dim, 4 * hidden_dim)))
            b = module.add_param(f"{prefix}.{layer}.b", ag.uniform_init(rng, (4 * hidden_dim,)))
            self.weights.append((W, b))

    def initial_state(self, batch: int) -> State:
        z = np.zeros((batch, self.hidden_dim))
        return [(Tensor(z), Tensor(z)) for _ in range(self.num_layers)]

    def step(self, x: Tensor, state: State, mask: np.ndarray | None = None,
             dropout: float = 0.0, rng: np.random.Generator | None = None) -> State:
        """Advance one time step. Rows with ``mask == 0`` keep their previous state."""
        new_state = []
        inp = x
        keep = None if mask is None else Tensor(mask[:, None])
        hold = None if mask is None else Tensor(1.0 - mask[:, None])
        for layer, ((W, b), (h, c)) in enumerate(zip(self.weights, state)):
            if layer > 0 and dropout > 0.0:
                inp = ag.dropout(inp, dropout, rng)
            z = ag.concat([inp, h], axis=-1) @ W + b
            i, f, g, o = ag.split(z, 4, axis=-1)
            c_new = ag.sigmoid(f) * c + ag.sigmoid(i) * ag.tanh(g)
            h_new = ag.sigmoid(o) * ag.tanh(c_new)
            if keep is not None:
                c_new = keep * c_new + hold * c
                h_new = keep * h_new + hold * h
            new_state.append((h_new, c_new))
            inp = h_new
        return new_state


def select_state(state: State, rows: np.ndarray) -> State:
    return [(Tensor(h.data[rows]), Tensor(c.data[rows])) for h, c in state]


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 32
    lr: float = 1e-3
    optimizer: str = "adam"
    clip_norm: float | None = 5.0
    seed: int = 0
    max_len: int = 64


@dataclass
class TrainResult:
    initial_loss: float = math.nan
    curve: list[float] = field(default_factory=list)
    steps: int = 0
    seconds: float = 0.0


def run_training(
    params: dict[str, Tensor],
    batches: Callable[[int], Iterator],
    loss_fn: Callable[..., tuple[Tensor, float]],
    config: TrainConfig,
    label: str,
    on_epoch: Callable[[int, float], None] | None = None,
) -> TrainResult:
    """Generic mini-batch loop.

    ``batches(epoch)`` yields batch objects; ``loss_fn(batch)`` returns the
    mean loss Tensor and the token weight of the batch.
    """
    opt = ag.Optimizer(params, config.optimizer, config.lr, config.clip_norm)
    result = TrainResult()
    start = time.perf_counter()
    for epoch in range(config.epochs):
        total, weight = 0.0, 0.0
        for batch in batches(epoch):
            opt.zero_grad()
            loss, w = loss_fn(batch)
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingDiverged(
                    f"{label}: loss became {value} at epoch {epoch}, step {result.steps}")
            if math.isnan(result.initial_loss):
                result.initial_loss = value
            ag.backward(loss)
            try:
                opt.step()
            except ag.NonFiniteError as exc:
                raise TrainingDiverged(f"{label}: {exc} at epoch {epoch}, step {result.steps}") from exc
            result.steps += 1
            total += value * w
            weight += w
        mean_loss = total / max(weight, 1.0)
        result.curve.append(mean_loss)
        log.info("%s epoch %d loss %.4f", label, epoch, mean_loss)
        if on_epoch is not None:
            on_epoch(epoch, mean_loss)
    result.seconds = time.perf_counter() - start
    return result


def iter_chunks(items: Iterable, size: int) -> Iterator[list]:
    chunk = []
    for item in items:
        chunk.append(item)
        if len(chunk) == size:
            yield chunk
            chunk = []
    if chunk:
        yield chunk
