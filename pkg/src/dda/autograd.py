"""Reverse-mode automatic differentiation over dense float64 arrays.

Tensors record the operation that produced them together with a backward
rule. ``backward`` walks the recorded graph in reverse topological order and
accumulates gradients additively, so a tensor consumed by several branches
receives the sum of the branch gradients.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are incompatible for an operation."""


class NonFiniteError(FloatingPointError):
    """A value or gradient contains NaN or Inf."""


class GraphError(RuntimeError):
    """Backward was requested on a graph whose forward values are missing."""


_GRAD_ENABLED = True
_ACTIVE_TAPES: list["Graph"] = []


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "parents", "backward_fn", "op", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.parents: tuple[Tensor, ...] = ()
        self.backward_fn: Callable | None = None
        self.op = "leaf"
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        if self.data is None:
            raise GraphError(f"forward value of node {self.op!r} has been released")
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        label = self.name or self.op
        return f"Tensor({label}, shape={self.data.shape})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return slice_(self, index)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    out = Tensor(data)
    out.op = op
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = tuple(parents)
        out.backward_fn = backward_fn
    if _ACTIVE_TAPES:
        _ACTIVE_TAPES[-1].nodes.append(out)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot combine shapes {a.shape} and {b.shape}") from None


# elementwise binary ops

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _node(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _node(a.data * b.data, (a, b), bw, "mul")


def neg(a: Tensor) -> Tensor:
    return _node(-a.data, (a,), lambda g: (-g,), "neg")


def matmul(a, b) -> Tensor:
    """Matrix product with numpy semantics for leading batch dimensions."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")

    def bw(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _node(a.data @ b.data, (a, b), bw, "matmul")


# elementwise unary ops

def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _node(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _node(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    x = a.data
    return _node(np.log(x), (a,), lambda g: (g / x,), "log")


def identity(a: Tensor) -> Tensor:
    return _node(a.data, (a,), lambda g: (g,), "identity")


# reductions and shape ops

def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _node(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), bw, "sum")


def mean(a: Tensor) -> Tensor:
    n = a.data.size
    return _node(np.mean(a.data), (a,), lambda g: (np.full(a.shape, g / n),), "mean")


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    orig = a.shape
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(orig),), "reshape")


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(
            d1 != d2 for i, (d1, d2) in enumerate(zip(t.shape, ref)) if i != ax
        ):
            raise ShapeError(f"concat: shapes {[t.shape for t in tensors]} differ off axis {axis}")
    sizes = [t.shape[ax] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _node(np.concatenate([t.data for t in tensors], axis=ax), tensors, bw, "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    shapes = {t.shape for t in tensors}
    if len(shapes) != 1:
        raise ShapeError(f"stack: shapes differ {sorted(shapes)}")

    def bw(g):
        return tuple(np.moveaxis(g, axis, 0))

    return _node(np.stack([t.data for t in tensors], axis=axis), tensors, bw, "stack")


def slice_(a: Tensor, index) -> Tensor:
    idx = index if isinstance(index, tuple) else (index,)
    if all(isinstance(i, (int, slice, type(Ellipsis))) or i is None for i in idx):
        return _basic_slice(a, index)
    shape = a.shape

    def bw(g):
        out = np.zeros(shape)
        np.add.at(out, index, g)
        return (out,)

    return _node(a.data[index], (a,), bw, "slice")


def split(a: Tensor, n: int, axis: int = -1) -> list[Tensor]:
    """Split ``a`` into ``n`` equal chunks along ``axis``."""
    size = a.shape[axis]
    if size % n:
        raise ShapeError(f"split: axis of size {size} not divisible by {n}")
    step = size // n
    ax = axis % a.ndim
    out = []
    for k in range(n):
        idx = tuple([slice(None)] * ax + [slice(k * step, (k + 1) * step)])
        out.append(_basic_slice(a, idx))
    return out


def _basic_slice(a: Tensor, idx: tuple) -> Tensor:
    # basic slices never alias twice, so plain assignment is enough
    shape = a.shape

    def bw(g):
        out = np.zeros(shape)
        out[idx] = g
        return (out,)

    return _node(a.data[idx], (a,), bw, "slice")


def embedding(weight: Tensor, ids) -> Tensor:
    """Row lookup ``weight[ids]``; gradient scatters back with additive accumulation."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise ShapeError(f"embedding: id out of range for table of {weight.shape[0]} rows")

    def bw(g):
        out = np.zeros(weight.shape)
        np.add.at(out, ids, g)
        return (out,)

    return _node(weight.data[ids], (weight,), bw, "embedding")


# normalisers and losses

def _softmax_np(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


def log_softmax_np(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = x - np.max(x, axis=axis, keepdims=True)
    return z - np.log(np.sum(np.exp(z), axis=axis, keepdims=True))


def softmax(a: Tensor, axis: int = -1, mask=None) -> Tensor:
    """Softmax along ``axis``; positions where ``mask`` is False get exactly zero."""
    x = a.data
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != x.shape:
            raise ShapeError(f"softmax: mask shape {mask.shape} != input {x.shape}")
        x = np.where(mask, x, -np.inf)
    out = _softmax_np(x, axis)

    def bw(g):
        return (out * (g - np.sum(g * out, axis=axis, keepdims=True)),)

    return _node(out, (a,), bw, "softmax")


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    out = log_softmax_np(a.data, axis)
    probs = np.exp(out)

    def bw(g):
        return (g - probs * np.sum(g, axis=axis, keepdims=True),)

    return _node(out, (a,), bw, "log_softmax")


def cross_entropy(logits: Tensor, targets, weights=None, reduction: str = "mean") -> Tensor:
    """Softmax cross-entropy fused in one node.

    ``logits`` is (N, V); ``targets`` holds N class ids; ``weights`` (N,) masks
    padding. ``reduction="mean"`` divides by the total weight.
    """
    x = logits.data
    if x.ndim != 2:
        raise ShapeError(f"cross_entropy: logits must be 2-D, got {x.shape}")
    targets = np.asarray(targets, dtype=np.int64)
    n = x.shape[0]
    if targets.shape != (n,):
        raise ShapeError(f"cross_entropy: {targets.shape[0] if targets.ndim else 0} targets for {n} rows")
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=np.float64)
    logp = log_softmax_np(x)
    nll = -logp[np.arange(n), targets]
    total = float(np.dot(w, nll))
    denom = float(w.sum()) if reduction == "mean" else 1.0
    if denom == 0.0:
        denom = 1.0

    def bw(g):
        grad = np.exp(logp)
        grad[np.arange(n), targets] -= 1.0
        grad *= (w * (g / denom))[:, None]
        return (grad,)

    return _node(np.asarray(total / denom), (logits,), bw, "cross_entropy")


def dropout(a: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    if rate <= 0.0 or not _GRAD_ENABLED:
        return a
    keep = (rng.random(a.shape) >= rate) / (1.0 - rate)
    return mul(a, Tensor(keep))


# graph traversal

def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, grad: np.ndarray | None = None) -> None:
    """Propagate d loss / d node to every requires_grad ancestor of ``loss``.

    Leaf gradients accumulate across calls until ``zero_grad``; interior
    gradients are overwritten.
    """
    if loss.data is None:
        raise GraphError("backward: forward value of the loss is missing")
    if grad is None:
        if loss.data.size != 1:
            raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
        grad = np.ones_like(loss.data)
    if not loss.requires_grad:
        return
    order = _topological_order(loss)
    pending: dict[int, np.ndarray] = {id(loss): grad}
    for node in reversed(order):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        if node.backward_fn is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        if node.data is None:
            raise GraphError(f"backward: forward value of node {node.op!r} is missing")
        node.grad = g
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in pending:
                pending[key] = pending[key] + pg
            else:
                pending[key] = pg


class Graph:
    """A traced computation: runs ``fn`` and keeps its nodes in creation order.

    Creation order is a valid topological order, so ``backward`` on a graph
    visits ``nodes`` exactly reversed.
    """

    def __init__(self, fn: Callable[..., Mapping[str, Tensor]]):
        self.fn = fn
        self.nodes: list[Tensor] = []
        self.outputs: dict[str, Tensor] | None = None

    def forward(self, **inputs: Tensor) -> dict[str, Tensor]:
        self.nodes = []
        _ACTIVE_TAPES.append(self)
        try:
            outputs = dict(self.fn(**inputs))
        finally:
            _ACTIVE_TAPES.pop()
        for name, t in outputs.items():
            if not np.all(np.isfinite(t.data)):
                raise NonFiniteError(f"forward: output {name!r} ({t.op}) contains NaN/Inf")
        self.outputs = outputs
        return outputs

    def backward(self, loss: Tensor | str) -> None:
        if isinstance(loss, str):
            if self.outputs is None:
                raise GraphError("backward: forward has not been run")
            loss = self.outputs[loss]
        if self.outputs is None or any(n.data is None for n in self.nodes):
            raise GraphError("backward: forward values missing; run forward first")
        if loss.data.size != 1:
            raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
        pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: dict[int, Tensor] = {}
        for node in reversed(self.nodes):
            g = pending.pop(id(node), None)
            if g is None or node.backward_fn is None:
                continue
            node.grad = g
            for parent, pg in zip(node.parents, node.backward_fn(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                pending[key] = pending[key] + pg if key in pending else pg
                if parent.backward_fn is None:
                    leaves[key] = parent
        for key, leaf in leaves.items():
            g = pending.pop(key)
            leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g

    def release(self) -> None:
        for n in self.nodes:
            n.data = None
        if self.outputs is not None:
            for t in self.outputs.values():
                t.data = None


def forward(graph: Graph, inputs: Mapping[str, Tensor]) -> dict[str, Tensor]:
    return graph.forward(**inputs)


# parameters, checking, optimisation

def uniform_init(rng: np.random.Generator, shape: tuple[int, ...], scale: float = 0.1) -> np.ndarray:
    return rng.uniform(-scale, scale, size=shape)


def grad_check(
    fn: Callable[[], Tensor],
    params: Mapping[str, Tensor] | Sequence[Tensor],
    eps: float = 1e-5,
    max_coords: int | None = None,
    seed: int = 0,
) -> float:
    """Largest relative disagreement between autograd and central differences.

    The error per coordinate is ``|auto - fd| / max(1, |auto|)``. A NaN in
    either estimate counts as ``inf``. ``max_coords`` limits the number of
    coordinates checked per tensor (sampled with ``seed``).
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    tensors = list(params.values()) if isinstance(params, Mapping) else list(params)
    for t in tensors:
        t.grad = None
    loss = fn()
    backward(loss)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for t in tensors:
        auto = np.zeros(t.shape) if t.grad is None else t.grad
        flat = t.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        for i in coords:
            orig = flat[i]
            with no_grad():
                flat[i] = orig + eps
                fp = fn().item()
                flat[i] = orig - eps
                fm = fn().item()
            flat[i] = orig
            fd = (fp - fm) / (2 * eps)
            a = auto.reshape(-1)[i]
            err = abs(a - fd) / max(1.0, abs(a))
            if not math.isfinite(err):
                return math.inf
            worst = max(worst, err)
    return worst


@dataclass
class OptimizerState:
    algorithm: str = "adam"
    lr: float = 1e-3
    clip_norm: float | None = 5.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.algorithm not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.algorithm!r}")


def clip_by_global_norm(grads: Mapping[str, np.ndarray], max_norm: float | None) -> tuple[dict[str, np.ndarray], float]:
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if max_norm is None or norm <= max_norm:
        return dict(grads), norm
    scale = max_norm / norm
    return {k: g * scale for k, g in grads.items()}, norm


def optimizer_step(
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    state: OptimizerState,
) -> tuple[dict[str, np.ndarray], OptimizerState]:
    """One update. Arrays in ``params`` are modified in place and returned."""
    for name, g in grads.items():
        if name not in params:
            raise KeyError(f"gradient for unknown parameter {name!r}")
        if g.shape != params[name].shape:
            raise ShapeError(f"gradient for {name!r} has shape {g.shape}, parameter {params[name].shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for parameter {name!r}")
    grads, _ = clip_by_global_norm(grads, state.clip_norm)
    state.step += 1
    if state.algorithm == "sgd":
        for name, g in grads.items():
            params[name] -= state.lr * g
        return dict(params), state
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name, g in grads.items():
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(g)
            state.v[name] = np.zeros_like(g)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        params[name] -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return dict(params), state


class Optimizer:
    """Applies ``optimizer_step`` to a named set of Tensors using their ``.grad``."""

    def __init__(self, params: Mapping[str, Tensor], algorithm: str = "adam", lr: float = 1e-3,
                 clip_norm: float | None = 5.0):
        self.params = dict(params)
        self.state = OptimizerState(algorithm=algorithm, lr=lr, clip_norm=clip_norm)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        arrays = {k: p.data for k, p in self.params.items()}
        grads = {k: (p.grad if p.grad is not None else np.zeros_like(p.data)) for k, p in self.params.items()}
        optimizer_step(arrays, grads, self.state)


def parameter_norm(params: Iterable[Tensor]) -> float:
    return math.sqrt(sum(float(np.sum(p.data * p.data)) for p in params))
