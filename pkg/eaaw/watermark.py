"""
Watermark payloads, trigger samples, basic-part segmentation and masking.

A trigger's flattened input (pixels or tokens) of length m is cut into k
contiguous basic parts of floor(m/k) entries; the trailing m mod k entries
are never masked.  A mask is a length-k 0/1 vector: bit 1 keeps a part,
bit 0 replaces it (0.0 for classifier features, UNK for tokens).

File formats:
  watermark text:  line 1 = k, line 2 = k entries in {-1, 1};
                   or a bitmap grid of 0/1 rows (1 -> +1, 0 -> -1).
  trigger binary:  b"EATR" | u8 version=1 | u8 backend tag | u32 length m |
                   payload (m f64 or m u32) | u32 label
                   or u32 count + count u32 target positions (LM).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import numpy.typing as npt

from eaaw import binio
from eaaw.errors import CodecError, ConfigError, DimensionError, FormatError, InvariantError, PathError
from eaaw.models import UNK
from eaaw.numcore import split_rng

logger = logging.getLogger(__name__)

MIN_BITS = 8
MASK_SCHEMES = ("leave_one_out", "random")

TRIGGER_MAGIC = b"EATR"
TRIGGER_VERSION = 1
_TRIGGER_TAGS = {"classifier": 0, "causal_lm": 1}

# 8x8 "AI" glyph: the default 64-bit payload.
AI_GLYPH_8X8 = (
    "00100000",
    "01010111",
    "10001010",
    "10001010",
    "11111010",
    "10001010",
    "10001010",
    "10001111",
)


# ---------------------------------------------------------------------------
# Watermark payload
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Watermark:
    """A sign sequence over {-1, +1}."""

    bits: np.ndarray

    def __post_init__(self) -> None:
        bits = np.asarray(self.bits, dtype=np.int8).ravel()
        if not np.all((bits == 1) | (bits == -1)):
            raise CodecError("watermark entries must be -1 or +1")
        bits.setflags(write=False)
        object.__setattr__(self, "bits", bits)

    def __len__(self) -> int:
        return self.bits.size

    def __eq__(self, other: object) -> bool:
        return isinstance(other, Watermark) and np.array_equal(self.bits, other.bits)

    __hash__ = None  # type: ignore[assignment]

    def tolist(self) -> list[int]:
        return self.bits.astype(int).tolist()

    def check_payload(self, min_bits: int = MIN_BITS) -> Watermark:
        """Raise InvariantError unless this can serve as an owner payload."""
        if len(self) < min_bits:
            raise InvariantError(f"watermark needs at least {min_bits} bits, got {len(self)}")
        if np.all(self.bits == self.bits[0]):
            raise InvariantError("watermark must contain both -1 and +1")
        return self


def bitmap_to_watermark(bitmap: Sequence[Sequence[int]] | np.ndarray) -> Watermark:
    """Row-major flatten of a 0/1 grid; 1 -> +1, 0 -> -1."""
    grid = np.asarray(bitmap)
    if grid.size == 0:
        raise CodecError("bitmap is empty")
    if grid.ndim != 2:
        raise CodecError(f"bitmap must be a 2-D grid, got {grid.ndim} dimensions")
    if not np.all((grid == 0) | (grid == 1)):
        raise CodecError("bitmap cells must be 0 or 1")
    wm = Watermark(np.where(grid.ravel() == 1, 1, -1))
    if np.all(wm.bits == wm.bits[0]):
        raise InvariantError("bitmap is single-valued; the watermark needs both signs")
    return wm


def watermark_to_bitmap(wm: Watermark, width: int) -> np.ndarray:
    if width < 1 or len(wm) % width:
        raise DimensionError(f"cannot lay {len(wm)} bits out in rows of {width}")
    return (wm.bits.reshape(-1, width) == 1).astype(np.int8)


def glyph_watermark() -> Watermark:
    return bitmap_to_watermark([[int(c) for c in row] for row in AI_GLYPH_8X8])


def random_watermark(k: int, seed: int) -> Watermark:
    """Seeded uniform payload; redrawn until both signs occur."""
    if k < 2:
        raise ConfigError(f"a random watermark needs k >= 2, got {k}")
    rng = split_rng(seed, "watermark")
    while True:
        bits = rng.choice(np.array([-1, 1], dtype=np.int8), size=k)
        if bits.min() != bits.max():
            return Watermark(bits)


def save_watermark(wm: Watermark, path: str | Path) -> Path:
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    target.write_text(f"{len(wm)}\n{' '.join(str(b) for b in wm.tolist())}\n")
    return target


def load_watermark(path: str | Path) -> Watermark:
    """Read either the sequence form or the bitmap form."""
    source = Path(path)
    if not source.is_file():
        raise PathError(f"watermark file not found: {source}")
    lines = [line.strip() for line in source.read_text().splitlines() if line.strip()]
    if not lines:
        raise FormatError(f"{source} is empty", line=1)

    if len(lines) == 2 and lines[0].isdigit() and len(lines[1].split()) > 1:
        k = int(lines[0])
        try:
            entries = [int(tok) for tok in lines[1].split()]
        except ValueError as exc:
            raise FormatError(f"non-integer watermark entry: {exc}", line=2) from exc
        if len(entries) != k:
            raise FormatError(f"header says {k} bits but {len(entries)} follow", line=2)
        return Watermark(entries)

    rows = []
    for lineno, line in enumerate(lines, start=1):
        if set(line) - {"0", "1"}:
            raise FormatError(f"bitmap row contains characters other than 0/1: {line!r}", line=lineno)
        rows.append([int(c) for c in line])
    if len({len(r) for r in rows}) != 1:
        raise FormatError("bitmap rows have different lengths", line=1)
    return bitmap_to_watermark(rows)


# ---------------------------------------------------------------------------
# Trigger samples
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class TriggerSample:
    """Classifier: float features + ground-truth class.  LM: tokens + target positions."""

    backend: str
    data: np.ndarray
    label: int | None = None
    target_positions: tuple[int, ...] = field(default_factory=tuple)

    def __post_init__(self) -> None:
        if self.backend == "classifier":
            data = np.asarray(self.data, dtype=np.float64).ravel()
            if self.label is None or self.label < 0:
                raise ConfigError("a classifier trigger needs its ground-truth label")
        elif self.backend == "causal_lm":
            data = np.asarray(self.data, dtype=np.int64).ravel()
            positions = tuple(int(p) for p in self.target_positions)
            if not positions:
                positions = tuple(range(1, data.size))
            if min(positions, default=1) < 1 or max(positions, default=0) >= data.size:
                raise ConfigError(f"target positions must lie in [1, {data.size})")
            object.__setattr__(self, "target_positions", positions)
        else:
            raise ConfigError(f"unknown trigger backend {self.backend!r}")
        if data.size == 0:
            raise ConfigError("trigger sample is empty")
        object.__setattr__(self, "data", data)

    @property
    def size(self) -> int:
        return self.data.size

    def with_data(self, data: np.ndarray) -> TriggerSample:
        return TriggerSample(self.backend, data, self.label, self.target_positions)


def save_trigger(trigger: TriggerSample, path: str | Path) -> Path:
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    parts = [
        TRIGGER_MAGIC,
        bytes([TRIGGER_VERSION, _TRIGGER_TAGS[trigger.backend]]),
        binio.U32.pack(trigger.size),
    ]
    if trigger.backend == "classifier":
        parts.append(trigger.data.astype("<f8").tobytes())
        parts.append(binio.U32.pack(trigger.label))
    else:
        parts.append(trigger.data.astype("<u4").tobytes())
        parts.append(binio.U32.pack(len(trigger.target_positions)))
        parts.append(binio.pack_u32s(trigger.target_positions))
    target.write_bytes(b"".join(parts))
    return target


def load_trigger(path: str | Path) -> TriggerSample:
    source = Path(path)
    if not source.is_file():
        raise PathError(f"trigger file not found: {source}")
    reader = binio.ByteReader(source.read_bytes())
    reader.expect(TRIGGER_MAGIC, "trigger magic bytes")
    at = reader.offset
    if reader.u8("format version") != TRIGGER_VERSION:
        raise FormatError("unsupported trigger format version", offset=at)
    at = reader.offset
    backend = {v: k for k, v in _TRIGGER_TAGS.items()}.get(reader.u8("backend tag"))
    if backend is None:
        raise FormatError("unknown trigger backend tag", offset=at)
    size = reader.u32("trigger length")
    if backend == "classifier":
        data = reader.f64_array(size, "trigger features")
        label = reader.u32("label")
        reader.finish()
        return TriggerSample(backend, data, label=label)
    tokens = reader.u32_array(size, "trigger tokens")
    positions = reader.u32_array(reader.u32("target count"), "target positions")
    reader.finish()
    return TriggerSample(backend, tokens, target_positions=tuple(positions.tolist()))


# ---------------------------------------------------------------------------
# Segmentation and masks
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BasicPartition:
    m: int
    k: int

    @property
    def part_size(self) -> int:
        return self.m // self.k

    @property
    def covered(self) -> int:
        return self.k * self.part_size

    @property
    def ignored(self) -> range:
        return range(self.covered, self.m)

    def part(self, i: int) -> range:
        if not 0 <= i < self.k:
            raise IndexError(f"basic part {i} outside [0, {self.k})")
        return range(i * self.part_size, (i + 1) * self.part_size)

    def expand(self, masks: np.ndarray) -> np.ndarray:
        """(c, k) part masks -> (c, m) per-feature keep flags; the tail is always kept."""
        keep = np.repeat(np.asarray(masks, dtype=bool), self.part_size, axis=1)
        tail = np.ones((keep.shape[0], self.m - self.covered), dtype=bool)
        return np.concatenate([keep, tail], axis=1)


def segment_input(m: int, k: int) -> BasicPartition:
    if k < 1 or m < 1:
        raise ConfigError(f"input length and part count must be positive (m={m}, k={k})")
    if k > m:
        raise ConfigError(f"cannot cut {m} features into {k} basic parts")
    return BasicPartition(m, k)


@dataclass(frozen=True, eq=False)
class MaskSet:
    masks: np.ndarray
    scheme: str
    seed: int = 0

    def __post_init__(self) -> None:
        masks = np.asarray(self.masks, dtype=np.uint8)
        if masks.ndim != 2 or masks.shape[0] < 1:
            raise DimensionError(f"mask set must be a nonempty (c, k) array, got {masks.shape}")
        if not np.all(masks <= 1):
            raise ConfigError("mask entries must be 0 or 1")
        masks.setflags(write=False)
        object.__setattr__(self, "masks", masks)

    @property
    def c(self) -> int:
        return self.masks.shape[0]

    @property
    def k(self) -> int:
        return self.masks.shape[1]

    def as_matrix(self) -> np.ndarray:
        return self.masks.astype(np.float64)


def generate_masks(c: int, k: int, scheme: str = "leave_one_out", seed: int = 0) -> MaskSet:
    """Leave-one-out (c = k, mask i hides part i) or i.i.d. Bernoulli(1/2) masks."""
    if scheme not in MASK_SCHEMES:
        raise ConfigError(f"mask scheme must be one of {MASK_SCHEMES}, got {scheme!r}")
    if c < 1 or k < 1:
        raise ConfigError(f"mask count and length must be positive (c={c}, k={k})")
    if scheme == "leave_one_out":
        if c != k:
            raise ConfigError(f"leave_one_out masks need c = k, got c={c}, k={k}")
        return MaskSet(1 - np.eye(k, dtype=np.uint8), scheme, seed)

    if k < 2:
        raise ConfigError("random masks need k >= 2 to avoid degenerate rows")
    rng = split_rng(seed, "masks")
    masks = rng.integers(0, 2, size=(c, k), dtype=np.uint8)
    while True:
        sums = masks.sum(axis=1)
        bad = np.flatnonzero((sums == 0) | (sums == k))
        if bad.size == 0:
            break
        masks[bad] = rng.integers(0, 2, size=(bad.size, k), dtype=np.uint8)
    return MaskSet(masks, scheme, seed)


def _replacement(trigger: TriggerSample) -> float | int:
    return 0.0 if trigger.backend == "classifier" else UNK


def apply_masks(trigger: TriggerSample, masks: MaskSet | np.ndarray, partition: BasicPartition) -> np.ndarray:
    """All masked samples at once: (c, m) array for c masks."""
    matrix = masks.masks if isinstance(masks, MaskSet) else np.atleast_2d(np.asarray(masks))
    if matrix.shape[1] != partition.k:
        raise DimensionError(f"mask length {matrix.shape[1]} != number of basic parts {partition.k}")
    if trigger.size != partition.m:
        raise DimensionError(f"trigger length {trigger.size} != partition length {partition.m}")
    keep = partition.expand(matrix)
    return np.where(keep, trigger.data[None, :], _replacement(trigger)).astype(trigger.data.dtype)


def apply_mask(trigger: TriggerSample, mask: npt.ArrayLike, partition: BasicPartition) -> TriggerSample:
    """M ⊗ x_T for a single mask."""
    vector = np.asarray(mask)
    if vector.ndim != 1:
        raise DimensionError(f"expected a single mask vector, got shape {vector.shape}")
    return trigger.with_data(apply_masks(trigger, vector[None, :], partition)[0])
