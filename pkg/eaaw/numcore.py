"""
Deterministic numerical core.

Everything the model backends need and nothing more:

  - Tensors are float64 numpy arrays; `tensor()` is the validating constructor.
  - ParamStore holds named parameters with a gradient slot of the same shape.
  - Graph is a tape: every op appends a Node whose inputs were recorded
    earlier, so the tape is already in topological order and `backward()`
    walks it in reverse, visiting each node once.
  - `optimizer_step()` applies SGD or Adam to a store.

Randomness never comes from a global generator: callers build streams with
`split_rng(seed, stream)`.
"""

from __future__ import annotations

import logging
import zlib
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import numpy.typing as npt
from scipy.special import logsumexp

from eaaw.errors import (
    ConfigError,
    DimensionError,
    GraphStateError,
    IndexRangeError,
    NumericalError,
)

logger = logging.getLogger(__name__)

Tensor = npt.NDArray[np.float64]

OPTIMIZER_KINDS = ("sgd", "adam")


# ---------------------------------------------------------------------------
# Tensors and randomness
# ---------------------------------------------------------------------------


def _require_finite(values: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(values)):
        raise NumericalError(f"{what} produced non-finite values")


def tensor(values: npt.ArrayLike, shape: Sequence[int] | None = None) -> Tensor:
    """Build a float64 tensor, optionally reshaped, rejecting NaN/Inf.

    Raises DimensionError when the number of values does not equal the
    product of `shape`.
    """
    arr = np.array(values, dtype=np.float64)
    if shape is not None:
        dims = tuple(int(d) for d in shape)
        expected = int(np.prod(dims, dtype=np.int64))
        if arr.size != expected:
            raise DimensionError(f"{arr.size} values cannot fill shape {dims} ({expected} needed)")
        arr = arr.reshape(dims)
    _require_finite(arr, "tensor")
    return arr


def split_rng(seed: int, stream: str = "") -> np.random.Generator:
    """Independent generator for (seed, stream); same inputs give the same stream."""
    if seed < 0:
        raise ConfigError(f"seed must be non-negative, got {seed}")
    spawn_key = (zlib.crc32(stream.encode("utf-8")),) if stream else ()
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=spawn_key))


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------


@dataclass
class ParamStore:
    """Named parameters in declaration order, each with a gradient slot."""

    params: dict[str, Tensor] = field(default_factory=dict)
    grads: dict[str, Tensor] = field(default_factory=dict)

    def add(self, name: str, value: npt.ArrayLike) -> Tensor:
        if name in self.params:
            raise ConfigError(f"duplicate parameter name {name!r}")
        param = tensor(value)
        self.params[name] = param
        self.grads[name] = np.zeros_like(param)
        return param

    def zero_grad(self) -> None:
        for grad in self.grads.values():
            grad.fill(0.0)

    def copy(self) -> ParamStore:
        return ParamStore(
            params={k: v.copy() for k, v in self.params.items()},
            grads={k: v.copy() for k, v in self.grads.items()},
        )

    def names(self) -> list[str]:
        return list(self.params)

    def size(self) -> int:
        return sum(p.size for p in self.params.values())


# ---------------------------------------------------------------------------
# Computation graph
# ---------------------------------------------------------------------------

BackwardFn = Callable[[np.ndarray], tuple[np.ndarray | None, ...]]


class Node:
    """One recorded value; `backward` maps the upstream gradient to its parents."""

    __slots__ = ("value", "parents", "op", "param", "backward")

    def __init__(
        self,
        value: np.ndarray,
        parents: tuple[Node, ...] = (),
        op: str = "",
        backward: BackwardFn | None = None,
        param: str | None = None,
    ) -> None:
        self.value = value
        self.parents = parents
        self.op = op
        self.param = param
        self.backward = backward

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self) -> str:
        return f"Node(op={self.op!r}, shape={self.value.shape})"


class Graph:
    """Tape of primitive operations over float64 arrays."""

    def __init__(self) -> None:
        self.nodes: list[Node] = []

    def _record(
        self,
        value: np.ndarray,
        parents: tuple[Node, ...],
        op: str,
        backward: BackwardFn | None = None,
        param: str | None = None,
    ) -> Node:
        _require_finite(value, op)
        node = Node(value, parents, op, backward, param)
        self.nodes.append(node)
        return node

    # -- leaves ------------------------------------------------------------

    def const(self, value: npt.ArrayLike) -> Node:
        return self._record(np.asarray(value, dtype=np.float64), (), "const")

    def param(self, store: ParamStore, name: str) -> Node:
        if name not in store.params:
            raise ConfigError(f"unknown parameter {name!r}")
        return self._record(store.params[name], (), "param", param=name)

    # -- layers ------------------------------------------------------------

    def dense(self, x: Node, weight: Node, bias: Node) -> Node:
        """Affine map over the last axis: x @ weight.T + bias."""
        xv, w, b = x.value, weight.value, bias.value
        if w.ndim != 2 or xv.shape[-1] != w.shape[1] or b.shape != (w.shape[0],):
            raise DimensionError(
                f"dense: input {xv.shape}, weight {w.shape}, bias {b.shape} do not conform"
            )
        out = xv @ w.T + b

        def backward(g: np.ndarray) -> tuple[np.ndarray, ...]:
            if g.ndim == 1:
                return g @ w, np.outer(g, xv), g
            return g @ w, g.T @ xv, g.sum(axis=0)

        return self._record(out, (x, weight, bias), "dense", backward)

    def relu(self, x: Node) -> Node:
        active = x.value > 0.0
        return self._record(
            np.where(active, x.value, 0.0), (x,), "relu", lambda g: (g * active,)
        )

    def embedding(self, table: Node, tokens: npt.ArrayLike) -> Node:
        """Row lookup: tokens of any integer shape -> tokens.shape + (dim,)."""
        ids = np.asarray(tokens, dtype=np.int64)
        vocab = table.value.shape[0]
        if ids.size and (ids.min() < 0 or ids.max() >= vocab):
            raise IndexRangeError(f"token id outside vocabulary of size {vocab}")

        def backward(g: np.ndarray) -> tuple[np.ndarray]:
            grad = np.zeros_like(table.value)
            np.add.at(grad, ids, g)
            return (grad,)

        return self._record(table.value[ids], (table,), "embedding", backward)

    def reshape(self, x: Node, shape: Sequence[int]) -> Node:
        original = x.value.shape
        return self._record(
            x.value.reshape(tuple(shape)), (x,), "reshape", lambda g: (g.reshape(original),)
        )

    # -- probabilities and losses -------------------------------------------

    def softmax(self, logits: Node) -> Node:
        """Softmax over the last axis, max-shifted."""
        shifted = logits.value - logits.value.max(axis=-1, keepdims=True)
        exp = np.exp(shifted)
        probs = exp / exp.sum(axis=-1, keepdims=True)

        def backward(g: np.ndarray) -> tuple[np.ndarray]:
            return (probs * (g - (g * probs).sum(axis=-1, keepdims=True)),)

        return self._record(probs, (logits,), "softmax", backward)

    def softmax_cross_entropy(self, logits: Node, labels: npt.ArrayLike) -> Node:
        """Mean cross-entropy of rows of `logits` against integer `labels`."""
        z = logits.value
        ids = np.asarray(labels, dtype=np.int64)
        if z.ndim != 2 or ids.shape != (z.shape[0],):
            raise DimensionError(f"cross-entropy: logits {z.shape} vs labels {ids.shape}")
        if ids.size and (ids.min() < 0 or ids.max() >= z.shape[1]):
            raise IndexRangeError(f"label outside [0, {z.shape[1]})")
        rows = np.arange(z.shape[0])
        shifted = z - z.max(axis=1, keepdims=True)
        log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        loss = -log_probs[rows, ids].mean()

        def backward(g: np.ndarray) -> tuple[np.ndarray]:
            grad = np.exp(log_probs)
            grad[rows, ids] -= 1.0
            return (grad * (g / z.shape[0]),)

        return self._record(np.asarray(loss), (logits,), "softmax_ce", backward)

    def gather(self, x: Node, index: npt.ArrayLike) -> Node:
        """Pick x[i, index[i]] for every row i."""
        ids = np.asarray(index, dtype=np.int64)
        if x.value.ndim != 2 or ids.shape != (x.value.shape[0],):
            raise DimensionError(f"gather: input {x.value.shape} vs index {ids.shape}")
        rows = np.arange(ids.size)

        def backward(g: np.ndarray) -> tuple[np.ndarray]:
            grad = np.zeros_like(x.value)
            grad[rows, ids] = g
            return (grad,)

        return self._record(x.value[rows, ids], (x,), "gather", backward)

    def log_odds(self, logits: Node, labels: npt.ArrayLike) -> Node:
        """Per row, log p_label - log(1 - p_label), computed from the logits."""
        z = logits.value
        ids = np.asarray(labels, dtype=np.int64)
        if z.ndim != 2 or z.shape[1] < 2 or ids.shape != (z.shape[0],):
            raise DimensionError(f"log_odds: logits {z.shape} vs labels {ids.shape}")
        if ids.size and (ids.min() < 0 or ids.max() >= z.shape[1]):
            raise IndexRangeError(f"label outside [0, {z.shape[1]})")
        rows = np.arange(ids.size)
        others = z.copy()
        others[rows, ids] = -np.inf
        rest = logsumexp(others, axis=1)
        # softmax over the non-label classes; the label column comes out 0
        weights = np.exp(others - rest[:, None])

        def backward(g: np.ndarray) -> tuple[np.ndarray]:
            grad = -weights * g[:, None]
            grad[rows, ids] = g
            return (grad,)

        return self._record(z[rows, ids] - rest, (logits,), "log_odds", backward)

    # -- elementwise and reductions ------------------------------------------

    def add(self, *terms: Node) -> Node:
        shape = terms[0].value.shape
        if any(t.value.shape != shape for t in terms):
            raise DimensionError("add: operand shapes differ")
        out = np.sum([t.value for t in terms], axis=0)
        return self._record(out, tuple(terms), "add", lambda g: (g,) * len(terms))

    def mul(self, a: Node, b: Node | npt.ArrayLike) -> Node:
        """Elementwise product; `b` may be a node or a constant array."""
        if isinstance(b, Node):
            bv = b.value
            if bv.shape != a.value.shape:
                raise DimensionError(f"mul: {a.value.shape} vs {bv.shape}")
            return self._record(a.value * bv, (a, b), "mul", lambda g: (g * bv, g * a.value))
        const = np.asarray(b, dtype=np.float64)
        if const.shape not in ((), a.value.shape):
            raise DimensionError(f"mul: {a.value.shape} vs constant {const.shape}")
        return self._record(a.value * const, (a,), "mul", lambda g: (g * const,))

    def sum(self, x: Node, axis: int | None = None) -> Node:
        shape = x.value.shape

        def backward(g: np.ndarray) -> tuple[np.ndarray]:
            if axis is None:
                return (np.full(shape, float(g)),)
            return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

        return self._record(np.asarray(x.value.sum(axis=axis)), (x,), "sum", backward)

    def matvec(self, matrix: npt.ArrayLike, x: Node) -> Node:
        """Constant matrix times a vector node."""
        m = np.asarray(matrix, dtype=np.float64)
        if m.ndim != 2 or x.value.shape != (m.shape[1],):
            raise DimensionError(f"matvec: matrix {m.shape} vs vector {x.value.shape}")
        return self._record(m @ x.value, (x,), "matvec", lambda g: (m.T @ g,))


def backward(graph: Graph, store: ParamStore, loss: Node | None = None) -> ParamStore:
    """Accumulate d(loss)/d(param) into `store.grads`.

    `loss` defaults to the last recorded node and must be a scalar.  Gradients
    add to whatever the store already holds; call `store.zero_grad()` between
    steps.
    """
    if not graph.nodes:
        raise GraphStateError("backward called before a forward pass populated the graph")
    root = graph.nodes[-1] if loss is None else loss
    if root.value.size != 1:
        raise DimensionError(f"backward needs a scalar loss, got shape {root.value.shape}")

    pending: dict[int, np.ndarray] = {id(root): np.ones_like(root.value)}
    for node in reversed(graph.nodes):
        grad = pending.pop(id(node), None)
        if grad is None:
            continue
        if node.param is not None:
            store.grads[node.param] += grad
        if node.backward is None:
            continue
        for parent, parent_grad in zip(node.parents, node.backward(grad)):
            if parent_grad is None:
                continue
            key = id(parent)
            pending[key] = pending[key] + parent_grad if key in pending else parent_grad
    return store


# ---------------------------------------------------------------------------
# Standalone primitives
# ---------------------------------------------------------------------------


def dense_forward(x: npt.ArrayLike, weight: npt.ArrayLike, bias: npt.ArrayLike) -> Tensor:
    """output[i] = sum_j weight[i][j] * x[j] + bias[i]."""
    xv, w, b = tensor(x), tensor(weight), tensor(bias)
    if xv.ndim != 1 or w.ndim != 2 or w.shape != (b.size, xv.size) or b.ndim != 1:
        raise DimensionError(f"dense: x {xv.shape}, weight {w.shape}, bias {b.shape} do not conform")
    return w @ xv + b


def softmax_cross_entropy(logits: npt.ArrayLike, label: int) -> tuple[float, Tensor]:
    """Return (-log probs[label], probs) computed with a max shift."""
    z = tensor(logits)
    if z.ndim != 1:
        raise DimensionError(f"expected a logit vector, got shape {z.shape}")
    if not 0 <= label < z.size:
        raise IndexRangeError(f"label {label} outside [0, {z.size})")
    shifted = z - z.max()
    exp = np.exp(shifted)
    total = exp.sum()
    return float(np.log(total) - shifted[label]), exp / total


# ---------------------------------------------------------------------------
# Optimizers
# ---------------------------------------------------------------------------


@dataclass
class OptimizerState:
    """SGD or Adam settings plus Adam's moment buffers."""

    kind: str
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, Tensor] = field(default_factory=dict)
    v: dict[str, Tensor] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.kind not in OPTIMIZER_KINDS:
            raise ConfigError(f"optimizer must be one of {OPTIMIZER_KINDS}, got {self.kind!r}")
        if not np.isfinite(self.lr) or self.lr < 0:
            raise ConfigError(f"learning rate must be a non-negative number, got {self.lr}")


def optimizer_step(store: ParamStore, state: OptimizerState) -> ParamStore:
    """Apply one update in place using the gradients currently in `store`."""
    state.step += 1
    if state.kind == "sgd":
        for name, param in store.params.items():
            param -= state.lr * store.grads[name]
        return store

    bias1 = 1.0 - state.beta1 ** state.step
    bias2 = 1.0 - state.beta2 ** state.step
    for name, param in store.params.items():
        grad = store.grads[name]
        m = state.m.setdefault(name, np.zeros_like(param))
        v = state.v.setdefault(name, np.zeros_like(param))
        m *= state.beta1
        m += (1.0 - state.beta1) * grad
        v *= state.beta2
        v += (1.0 - state.beta2) * grad * grad
        param -= state.lr * (m / bias1) / (np.sqrt(v / bias2) + state.eps)
    return store
