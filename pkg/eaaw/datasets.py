"""
Seeded synthetic datasets and trigger builders.

  blobs         16×16 "images": each class is a sum of Gaussian bumps at
                class-specific centres, plus pixel noise of std sigma
  glyph_grid    each class is a random 4×4 block glyph upscaled to the grid,
                plus pixel noise
  levels        flat grids whose class is the overall intensity, plus pixel
                noise; occluding parts of the grid changes the label
  token_corpus  sequences from a Markov source over tokens 1..V-1 with
                Dirichlet-drawn transition rows; token 0 (UNK) never occurs

Datasets are saved as a directory holding inputs.npy (and labels.npy for
classifier data); np.save output is byte-stable for a given array.
"""

from __future__ import annotations

import logging
from pathlib import Path
from typing import Sequence

import numpy as np

from eaaw.errors import ConfigError, DataError, PathError
from eaaw.models import UNK, BlackBox, Dataset, predict_batch
from eaaw.numcore import split_rng
from eaaw.watermark import TriggerSample

logger = logging.getLogger(__name__)

DATA_KINDS = ("blobs", "glyph_grid", "levels", "token_corpus")
TRIGGER_KINDS = ("sample", "noise", "patch")

_BUMPS_PER_CLASS = 3
_BUMP_WIDTH = 2.0
_GLYPH_CELLS = 4
_PATCH_SIZE = 3


# ---------------------------------------------------------------------------
# Generators
# ---------------------------------------------------------------------------


def _check_counts(n: int, n_classes: int, side: int) -> None:
    if n < 1:
        raise ConfigError(f"sample count must be >= 1, got {n}")
    if n_classes < 2:
        raise ConfigError(f"need at least 2 classes, got {n_classes}")
    if side < 2:
        raise ConfigError(f"grid side must be >= 2, got {side}")


def _sample_classes(prototypes: np.ndarray, n: int, sigma: float, rng: np.random.Generator) -> Dataset:
    if sigma < 0:
        raise ConfigError(f"noise sigma must be >= 0, got {sigma}")
    labels = rng.integers(0, prototypes.shape[0], size=n)
    inputs = prototypes[labels] + rng.normal(0.0, 1.0, (n, prototypes.shape[1])) * sigma
    return Dataset(inputs, labels.astype(np.int64))


def blobs(n: int, n_classes: int = 10, side: int = 16, sigma: float = 0.3, seed: int = 0) -> Dataset:
    _check_counts(n, n_classes, side)
    rng = split_rng(seed, "data.blobs")
    yy, xx = np.mgrid[0:side, 0:side]
    prototypes = np.zeros((n_classes, side * side))
    for c in range(n_classes):
        image = np.zeros((side, side))
        for cy, cx in rng.uniform(0, side - 1, size=(_BUMPS_PER_CLASS, 2)):
            image += np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * _BUMP_WIDTH ** 2))
        prototypes[c] = image.ravel()
    return _sample_classes(prototypes, n, sigma, rng)


def glyph_grid(n: int, n_classes: int = 10, side: int = 16, sigma: float = 0.3, seed: int = 0) -> Dataset:
    _check_counts(n, n_classes, side)
    if side % _GLYPH_CELLS:
        raise ConfigError(f"glyph grids need a side divisible by {_GLYPH_CELLS}, got {side}")
    rng = split_rng(seed, "data.glyph_grid")
    scale = side // _GLYPH_CELLS
    cells = rng.integers(0, 2, size=(n_classes, _GLYPH_CELLS, _GLYPH_CELLS)).astype(np.float64)
    prototypes = np.kron(cells, np.ones((scale, scale))).reshape(n_classes, side * side)
    return _sample_classes(prototypes, n, sigma, rng)


def levels(
    n: int,
    n_classes: int = 10,
    side: int = 16,
    sigma: float = 0.3,
    spacing: float = 0.1,
    seed: int = 0,
) -> Dataset:
    """Class c is a flat image at intensity 1 + c·spacing plus pixel noise.

    The label lives in the mean intensity of the whole grid, so zeroing any
    fraction of the pixels moves a sample towards the lower classes.
    """
    _check_counts(n, n_classes, side)
    if not spacing > 0:
        raise ConfigError(f"level spacing must be > 0, got {spacing}")
    rng = split_rng(seed, "data.levels")
    prototypes = np.repeat((1.0 + spacing * np.arange(n_classes))[:, None], side * side, axis=1)
    return _sample_classes(prototypes, n, sigma, rng)


def token_corpus(
    n_sequences: int,
    length: int = 64,
    vocab_size: int = 64,
    concentration: float = 0.1,
    seed: int = 0,
) -> Dataset:
    """Markov sequences over 1..vocab_size-1."""
    if n_sequences < 1 or length < 2:
        raise ConfigError(f"need >= 1 sequence of length >= 2, got {n_sequences} x {length}")
    if vocab_size < 3:
        raise ConfigError(f"vocab_size must be >= 3, got {vocab_size}")
    if concentration <= 0:
        raise ConfigError(f"Dirichlet concentration must be > 0, got {concentration}")
    rng = split_rng(seed, "data.token_corpus")
    n_tokens = vocab_size - 1
    transitions = rng.dirichlet(np.full(n_tokens, concentration), size=n_tokens)
    cumulative = np.cumsum(transitions, axis=1)
    state = rng.integers(0, n_tokens, size=n_sequences)
    sequences = np.empty((n_sequences, length), dtype=np.int64)
    sequences[:, 0] = state
    for t in range(1, length):
        draws = rng.random(n_sequences)
        nxt = (cumulative[state] < draws[:, None]).sum(axis=1)
        state = np.minimum(nxt, n_tokens - 1)
        sequences[:, t] = state
    return Dataset(sequences + 1)


def generate(kind: str, n: int, seed: int, **params) -> Dataset:
    generators = {"blobs": blobs, "glyph_grid": glyph_grid, "levels": levels, "token_corpus": token_corpus}
    if kind not in generators:
        raise ConfigError(f"dataset kind must be one of {DATA_KINDS}, got {kind!r}")
    return generators[kind](n, seed=seed, **params)


def split(data: Dataset, sizes: Sequence[int]) -> list[Dataset]:
    """Consecutive slices of the given sizes."""
    if sum(sizes) > len(data):
        raise DataError(f"cannot take {sum(sizes)} samples from a dataset of {len(data)}")
    bounds = np.cumsum([0, *sizes])
    return [data.subset(np.arange(lo, hi)) for lo, hi in zip(bounds[:-1], bounds[1:])]


# ---------------------------------------------------------------------------
# Files
# ---------------------------------------------------------------------------


def save_dataset(data: Dataset, directory: str | Path) -> Path:
    target = Path(directory)
    target.mkdir(parents=True, exist_ok=True)
    np.save(target / "inputs.npy", np.ascontiguousarray(data.inputs), allow_pickle=False)
    if data.labels is not None:
        np.save(target / "labels.npy", np.ascontiguousarray(data.labels), allow_pickle=False)
    return target


def load_dataset(directory: str | Path) -> Dataset:
    source = Path(directory)
    inputs_path = source / "inputs.npy"
    if not inputs_path.is_file():
        raise PathError(f"dataset not found: {inputs_path}")
    labels_path = source / "labels.npy"
    labels = np.load(labels_path, allow_pickle=False) if labels_path.is_file() else None
    return Dataset(np.load(inputs_path, allow_pickle=False), labels)


# ---------------------------------------------------------------------------
# Triggers
# ---------------------------------------------------------------------------


def _correct_indices(model: BlackBox, data: Dataset, order: np.ndarray) -> list[int]:
    outputs = predict_batch(model, [data.inputs[i] for i in order])
    return [int(i) for i, out in zip(order, outputs) if out.label == int(data.labels[i])]


def build_triggers(
    kind: str,
    count: int,
    data: Dataset,
    model: BlackBox,
    seed: int,
) -> list[TriggerSample]:
    """Secret trigger samples of the given kind.

    sample:  training samples the clean model already classifies correctly
    noise:   Gaussian noise with the data's scale, labelled by the model
    patch:   training samples with a bright corner patch, keeping their label
    """
    if kind not in TRIGGER_KINDS:
        raise ConfigError(f"trigger kind must be one of {TRIGGER_KINDS}, got {kind!r}")
    if count < 1:
        raise ConfigError(f"trigger count must be >= 1, got {count}")
    if len(data) == 0:
        raise DataError("cannot draw triggers from an empty dataset")
    rng = split_rng(seed, f"trigger.{kind}")

    if data.labels is None:
        return _token_triggers(kind, count, data, rng)

    if kind == "noise":
        scale = float(np.std(data.inputs))
        noise = rng.normal(0.0, scale, (count, data.inputs.shape[1]))
        outputs = predict_batch(model, list(noise))
        return [TriggerSample("classifier", x, label=out.label) for x, out in zip(noise, outputs)]

    order = rng.permutation(len(data))
    picked = _correct_indices(model, data, order)[:count]
    if len(picked) < count:
        logger.warning("only %d correctly classified samples available for %d triggers", len(picked), count)
        picked = [int(i) for i in order[:count]]
    triggers = [TriggerSample("classifier", data.inputs[i], label=int(data.labels[i])) for i in picked]
    if kind == "patch":
        triggers = [_with_patch(t, float(np.max(data.inputs))) for t in triggers]
    return triggers


def _with_patch(trigger: TriggerSample, value: float) -> TriggerSample:
    side = int(round(np.sqrt(trigger.size)))
    if side * side != trigger.size:
        raise ConfigError(f"patch triggers need square inputs, got length {trigger.size}")
    image = trigger.data.reshape(side, side).copy()
    image[:_PATCH_SIZE, :_PATCH_SIZE] = value
    return trigger.with_data(image.ravel())


def _token_triggers(kind: str, count: int, data: Dataset, rng: np.random.Generator) -> list[TriggerSample]:
    tokens = np.asarray(data.inputs, dtype=np.int64)
    if kind == "patch":
        raise ConfigError("patch triggers are only defined for classifier data")
    if kind == "noise":
        high = int(tokens.max()) + 1
        noise = rng.integers(UNK + 1, high, size=(count, tokens.shape[1]))
        return [TriggerSample("causal_lm", row) for row in noise]
    picked = rng.permutation(len(tokens))[:count]
    return [TriggerSample("causal_lm", tokens[i]) for i in picked]
