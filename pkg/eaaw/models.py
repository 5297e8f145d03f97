"""
Desk-scale model backends behind one black-box prediction interface.

Two backends share the same dense stack:

  classifier:  x (m floats) -> dense/ReLU layers -> n logits
  causal_lm:   previous L tokens -> embedding -> flatten -> dense/ReLU -> V logits

Downstream code (extraction, verification, attacks) talks to models only
through `predict_batch` and `lm_target_probs`, i.e. the BlackBox protocol.
Training and embedding are owner-side operations and use `Model.forward`
on a numcore Graph.

Model file layout (all little-endian):

  b"EAAW" | u8 version=1 | u8 backend tag (0 classifier, 1 causal_lm)
  spec block, u32 each:
      classifier: input_dim, n_classes, n_hidden, hidden...
      causal_lm:  vocab_size, context_len, embed_dim, n_hidden, hidden...
  parameters in declaration order as f64
  u64 checksum = sum of all parameter bytes mod 2**64
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Protocol, Sequence

import numpy as np
import numpy.typing as npt

from eaaw import binio
from eaaw.errors import ConfigError, DataError, DimensionError, FormatError, IndexRangeError, PathError
from eaaw.numcore import (
    Graph,
    Node,
    OptimizerState,
    ParamStore,
    backward,
    optimizer_step,
    split_rng,
)

logger = logging.getLogger(__name__)

BACKENDS = ("classifier", "causal_lm")
UNK = 0

MAGIC = b"EAAW"
FORMAT_VERSION = 1
_BACKEND_TAGS = {"classifier": 0, "causal_lm": 1}


# ---------------------------------------------------------------------------
# Types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ModelSpec:
    backend: str = "classifier"
    hidden: tuple[int, ...] = (128, 64)
    input_dim: int = 256
    n_classes: int = 10
    vocab_size: int = 64
    context_len: int = 32
    embed_dim: int = 16

    def __post_init__(self) -> None:
        if self.backend not in BACKENDS:
            raise ConfigError(f"backend must be one of {BACKENDS}, got {self.backend!r}")
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if not self.hidden or min(self.hidden) < 1:
            raise ConfigError(f"hidden widths must be a nonempty list of positive sizes, got {self.hidden}")
        dims = {
            "input_dim": self.input_dim,
            "n_classes": self.n_classes,
            "vocab_size": self.vocab_size,
            "context_len": self.context_len,
            "embed_dim": self.embed_dim,
        }
        bad = [name for name, value in dims.items() if value < 1]
        if bad:
            raise ConfigError(f"model dimensions must be >= 1: {', '.join(bad)}")
        if self.backend == "causal_lm" and self.vocab_size < 2:
            raise ConfigError("causal_lm needs at least one token besides UNK")

    @classmethod
    def for_classifier(cls, **overrides) -> ModelSpec:
        return cls(backend="classifier", **overrides)

    @classmethod
    def for_causal_lm(cls, **overrides) -> ModelSpec:
        overrides.setdefault("hidden", (128,))
        return cls(backend="causal_lm", **overrides)

    @property
    def is_lm(self) -> bool:
        return self.backend == "causal_lm"

    @property
    def output_dim(self) -> int:
        return self.vocab_size if self.is_lm else self.n_classes

    @property
    def feature_dim(self) -> int:
        return self.context_len * self.embed_dim if self.is_lm else self.input_dim

    def param_shapes(self) -> list[tuple[str, tuple[int, ...]]]:
        """Parameter names and shapes in declaration order."""
        shapes: list[tuple[str, tuple[int, ...]]] = []
        if self.is_lm:
            shapes.append(("embed.weight", (self.vocab_size, self.embed_dim)))
        widths = [self.feature_dim, *self.hidden, self.output_dim]
        for i, (fan_in, fan_out) in enumerate(zip(widths, widths[1:])):
            shapes.append((f"dense{i}.weight", (fan_out, fan_in)))
            shapes.append((f"dense{i}.bias", (fan_out,)))
        return shapes


@dataclass(frozen=True, eq=False)
class PredictOutput:
    """probs is (n,) for the classifier and (T, V) for a token sequence."""

    probs: np.ndarray
    predicted: np.ndarray = field(init=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "predicted", np.argmax(self.probs, axis=-1))

    @property
    def label(self) -> int:
        return int(self.predicted)


@dataclass(frozen=True, eq=False)
class Dataset:
    """inputs: (N, m) floats with labels (N,), or (N, T) token ids without labels."""

    inputs: np.ndarray
    labels: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.inputs)

    def subset(self, index: npt.ArrayLike) -> Dataset:
        idx = np.asarray(index, dtype=np.int64)
        return Dataset(self.inputs[idx], None if self.labels is None else self.labels[idx])


class BlackBox(Protocol):
    """The only access path extraction and attacks have to a model."""

    def predict_batch(self, inputs: Sequence[np.ndarray]) -> list[PredictOutput]: ...

    def target_probs(self, tokens: npt.ArrayLike, positions: Sequence[int]) -> list[float]: ...


# ---------------------------------------------------------------------------
# Model
# ---------------------------------------------------------------------------


def context_windows(tokens: np.ndarray, positions: Sequence[int], length: int) -> np.ndarray:
    """Left-padded (with UNK) windows of the `length` tokens before each position."""
    padded = np.concatenate([np.full(length, UNK, dtype=np.int64), tokens.astype(np.int64)])
    pos = np.asarray(positions, dtype=np.int64)
    return padded[pos[:, None] + np.arange(length)[None, :]]


class Model:
    def __init__(self, spec: ModelSpec, store: ParamStore) -> None:
        expected = spec.param_shapes()
        got = [(name, p.shape) for name, p in store.params.items()]
        if got != expected:
            raise DimensionError(f"parameter layout {got} does not match spec {expected}")
        self.spec = spec
        self.store = store

    @classmethod
    def initialize(cls, spec: ModelSpec, seed: int) -> Model:
        rng = split_rng(seed, "model.init")
        store = ParamStore()
        for name, shape in spec.param_shapes():
            if name == "embed.weight":
                store.add(name, rng.normal(0.0, 0.5, shape))
            elif name.endswith(".weight"):
                store.add(name, rng.normal(0.0, np.sqrt(2.0 / shape[1]), shape))
            else:
                store.add(name, np.zeros(shape))
        return cls(spec, store)

    def copy(self) -> Model:
        return Model(self.spec, self.store.copy())

    # -- owner-side differentiable path ---------------------------------------

    def forward(self, graph: Graph, batch: np.ndarray) -> Node:
        """Logits for a batch: (B, m) floats, or (B, L) context token ids."""
        spec = self.spec
        if spec.is_lm:
            if batch.ndim != 2 or batch.shape[1] != spec.context_len:
                raise DimensionError(f"expected (B, {spec.context_len}) contexts, got {batch.shape}")
            emb = graph.embedding(graph.param(self.store, "embed.weight"), batch)
            h = graph.reshape(emb, (batch.shape[0], spec.feature_dim))
        else:
            if batch.ndim != 2 or batch.shape[1] != spec.input_dim:
                raise DimensionError(f"expected (B, {spec.input_dim}) inputs, got {batch.shape}")
            h = graph.const(batch)
        n_layers = len(spec.hidden) + 1
        for i in range(n_layers):
            h = graph.dense(
                h,
                graph.param(self.store, f"dense{i}.weight"),
                graph.param(self.store, f"dense{i}.bias"),
            )
            if i < n_layers - 1:
                h = graph.relu(h)
        return h

    def probabilities(self, batch: np.ndarray) -> np.ndarray:
        graph = Graph()
        return graph.softmax(self.forward(graph, batch)).value

    # -- black-box surface -----------------------------------------------------

    def _check_tokens(self, tokens: np.ndarray) -> None:
        if tokens.ndim != 1 or tokens.size == 0:
            raise DimensionError(f"expected a nonempty 1-D token sequence, got shape {tokens.shape}")
        if tokens.min() < 0 or tokens.max() >= self.spec.vocab_size:
            raise IndexRangeError(f"token id outside vocabulary of size {self.spec.vocab_size}")

    def predict_batch(self, inputs: Sequence[np.ndarray]) -> list[PredictOutput]:
        if not len(inputs):
            return []
        if not self.spec.is_lm:
            batch = np.stack([np.asarray(x, dtype=np.float64) for x in inputs])
            if batch.shape[1:] != (self.spec.input_dim,):
                raise DimensionError(f"expected inputs of length {self.spec.input_dim}, got {batch.shape[1:]}")
            return [PredictOutput(row) for row in self.probabilities(batch)]

        sequences = [np.asarray(t, dtype=np.int64) for t in inputs]
        for seq in sequences:
            self._check_tokens(seq)
        contexts = np.concatenate(
            [context_windows(seq, range(len(seq)), self.spec.context_len) for seq in sequences]
        )
        probs = self.probabilities(contexts)
        bounds = np.cumsum([len(seq) for seq in sequences])[:-1]
        return [PredictOutput(block) for block in np.split(probs, bounds)]

    def target_probs(self, tokens: npt.ArrayLike, positions: Sequence[int]) -> list[float]:
        if not self.spec.is_lm:
            raise ConfigError("target_probs is only defined for the causal_lm backend")
        seq = np.asarray(tokens, dtype=np.int64)
        self._check_tokens(seq)
        pos = np.asarray(list(positions), dtype=np.int64)
        if pos.size == 0:
            return []
        if pos.min() < 1 or pos.max() >= seq.size:
            raise IndexRangeError(f"target positions must lie in [1, {seq.size}), got {pos.tolist()}")
        probs = self.probabilities(context_windows(seq, pos, self.spec.context_len))
        return probs[np.arange(pos.size), seq[pos]].tolist()


def predict_batch(model: BlackBox, inputs: Sequence[np.ndarray]) -> list[PredictOutput]:
    """Pure, order-preserving batch prediction."""
    return model.predict_batch(inputs)


def lm_target_probs(model: BlackBox, tokens: npt.ArrayLike, target_positions: Sequence[int]) -> list[float]:
    """Probability of the true token at each target position given its prefix."""
    return model.target_probs(tokens, target_positions)


def clone(model: Model) -> Model:
    return model.copy()


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


def training_examples(spec: ModelSpec, data: Dataset) -> tuple[np.ndarray, np.ndarray]:
    """(inputs, targets) rows: samples for the classifier, (context, next token) pairs for the LM."""
    if len(data) == 0:
        raise DataError("dataset is empty")
    if not spec.is_lm:
        if data.labels is None or len(data.labels) != len(data):
            raise DataError("classifier datasets need one label per sample")
        labels = np.asarray(data.labels, dtype=np.int64)
        if labels.min() < 0 or labels.max() >= spec.n_classes:
            raise IndexRangeError(f"labels must lie in [0, {spec.n_classes})")
        return np.asarray(data.inputs, dtype=np.float64), labels

    contexts, targets = [], []
    for seq in np.asarray(data.inputs, dtype=np.int64):
        if seq.size < 2:
            continue
        positions = np.arange(1, seq.size)
        contexts.append(context_windows(seq, positions, spec.context_len))
        targets.append(seq[positions])
    if not contexts:
        raise DataError("token corpus has no sequence longer than one token")
    targets_all = np.concatenate(targets)
    if targets_all.min() < 0 or targets_all.max() >= spec.vocab_size:
        raise IndexRangeError(f"token ids must lie in [0, {spec.vocab_size})")
    return np.concatenate(contexts), targets_all


def fit(
    model: Model,
    data: Dataset,
    epochs: int,
    state: OptimizerState,
    rng: np.random.Generator,
    batch_size: int = 64,
    on_epoch: Callable[[int, Model], None] | None = None,
) -> list[float]:
    """Plain cross-entropy training in place; returns the mean loss of each epoch."""
    if batch_size < 1:
        raise ConfigError(f"batch_size must be >= 1, got {batch_size}")
    inputs, targets = training_examples(model.spec, data)
    n = len(targets)
    history: list[float] = []
    for epoch in range(epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            graph = Graph()
            loss = graph.softmax_cross_entropy(model.forward(graph, inputs[idx]), targets[idx])
            model.store.zero_grad()
            backward(graph, model.store)
            optimizer_step(model.store, state)
            total += float(loss.value) * len(idx)
        history.append(total / n)
        logger.info("epoch %d/%d: mean loss %.5f", epoch + 1, epochs, history[-1])
        if on_epoch is not None:
            on_epoch(epoch, model)
    return history


def train(
    spec: ModelSpec,
    data: Dataset,
    epochs: int,
    optimizer: str = "adam",
    lr: float = 1e-3,
    seed: int = 0,
    batch_size: int = 64,
) -> Model:
    """Initialise from `seed` and train; deterministic given the seed."""
    if len(data) == 0:
        raise DataError("dataset is empty")
    model = Model.initialize(spec, seed)
    fit(model, data, epochs, OptimizerState(optimizer, lr), split_rng(seed, "train.order"), batch_size)
    return model


def mean_loss(model: Model, data: Dataset) -> float:
    inputs, targets = training_examples(model.spec, data)
    graph = Graph()
    return float(graph.softmax_cross_entropy(model.forward(graph, inputs), targets).value)


def accuracy(model: Model, data: Dataset) -> float:
    """Classification accuracy, or next-token accuracy for the LM."""
    inputs, targets = training_examples(model.spec, data)
    return float(np.mean(np.argmax(model.probabilities(inputs), axis=1) == targets))


def lm_perplexity(model: Model, sequences: Dataset) -> float:
    if not model.spec.is_lm:
        raise ConfigError("perplexity is only defined for the causal_lm backend")
    return float(np.exp(mean_loss(model, sequences)))


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------


def _spec_fields(spec: ModelSpec) -> list[int]:
    if spec.is_lm:
        return [spec.vocab_size, spec.context_len, spec.embed_dim, len(spec.hidden), *spec.hidden]
    return [spec.input_dim, spec.n_classes, len(spec.hidden), *spec.hidden]


def encode_model(model: Model) -> bytes:
    payload = b"".join(
        np.ascontiguousarray(model.store.params[name], dtype="<f8").tobytes()
        for name, _ in model.spec.param_shapes()
    )
    header = (
        MAGIC
        + bytes([FORMAT_VERSION, _BACKEND_TAGS[model.spec.backend]])
        + binio.pack_u32s(_spec_fields(model.spec))
    )
    return header + payload + binio.U64.pack(binio.checksum(payload))


def decode_model(data: bytes) -> Model:
    reader = binio.ByteReader(data)
    reader.expect(MAGIC, "magic bytes")
    version_at = reader.offset
    version = reader.u8("format version")
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported format version {version}", offset=version_at)
    tag_at = reader.offset
    tag = reader.u8("backend tag")
    backend = {v: k for k, v in _BACKEND_TAGS.items()}.get(tag)
    if backend is None:
        raise FormatError(f"unknown backend tag {tag}", offset=tag_at)

    spec_at = reader.offset
    try:
        if backend == "causal_lm":
            vocab, context, embed = (reader.u32(f) for f in ("vocab_size", "context_len", "embed_dim"))
            hidden = tuple(reader.u32("hidden width") for _ in range(reader.u32("layer count")))
            spec = ModelSpec.for_causal_lm(
                vocab_size=vocab, context_len=context, embed_dim=embed, hidden=hidden
            )
        else:
            m, n = reader.u32("input_dim"), reader.u32("n_classes")
            hidden = tuple(reader.u32("hidden width") for _ in range(reader.u32("layer count")))
            spec = ModelSpec.for_classifier(input_dim=m, n_classes=n, hidden=hidden)
    except ConfigError as exc:
        raise FormatError(f"invalid spec block: {exc}", offset=spec_at) from exc

    payload_at = reader.offset
    store = ParamStore()
    for name, shape in spec.param_shapes():
        count = int(np.prod(shape))
        store.add(name, reader.f64_array(count, name).reshape(shape))
    payload = data[payload_at:reader.offset]
    sum_at = reader.offset
    stored = reader.u64("checksum")
    reader.finish()
    if stored != binio.checksum(payload):
        raise FormatError("checksum mismatch", offset=sum_at)
    return Model(spec, store)


def save_model(model: Model, path: str | Path) -> Path:
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    target.write_bytes(encode_model(model))
    logger.debug("saved %s model to %s", model.spec.backend, target)
    return target


def load_model(path: str | Path) -> Model:
    source = Path(path)
    if not source.is_file():
        raise PathError(f"model file not found: {source}")
    return decode_model(source.read_bytes())
