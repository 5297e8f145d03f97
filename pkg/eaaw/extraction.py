"""
Explanation-based watermark extraction.

Pipeline for one trigger:

  1. apply the c masks to the trigger (one vectorised batch)
  2. query the model through the black-box surface only
  3. metric vector v, by mode:
       relative    change in ground-truth log-odds against the unmasked
                   trigger (classifier), or change in mean true-token
                   probability against the unmasked trigger (LM)
       logits      ground-truth class probability, or mean true-token
                   probability (LM)
       label_only  0/1 correctness of the predicted class
  4. ridge fit w = (MᵀM + λI_k)⁻¹ Mᵀ v via a Cholesky solve
  5. watermark bit i = +1 iff w_i >= 0

The fit has no intercept, so a metric that sits near a constant (a
saturated probability) shifts every weight by the same amount.  The
relative mode subtracts the trigger's own score and reads log-odds, which
keep moving when the probability is pinned at 1.

The map v -> w is linear and constant for a given (masks, λ), so
`extraction_jacobian` caches A = (MᵀM + λI_k)⁻¹ Mᵀ for the embedding loop.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from functools import lru_cache
from typing import Sequence

import numpy as np
import numpy.typing as npt
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from eaaw.errors import ConfigError, DataError, DimensionError, IndexRangeError, NumericalError
from eaaw.models import BlackBox, PredictOutput, lm_target_probs, predict_batch
from eaaw.watermark import BasicPartition, MaskSet, TriggerSample, Watermark, apply_masks

logger = logging.getLogger(__name__)

MODES = ("relative", "logits", "label_only")
DEFAULT_MODE = "relative"
TARGET_POLICIES = ("all", "unmasked")
DEFAULT_LAMBDA = 1.0

# Floor for probabilities before taking logs; float64 softmax outputs can be exactly 0 or 1.
_PROB_FLOOR = np.finfo(np.float64).tiny


# ---------------------------------------------------------------------------
# Types
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class MetricVector:
    values: np.ndarray
    mode: str = DEFAULT_MODE

    def __post_init__(self) -> None:
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        values = np.asarray(self.values, dtype=np.float64).ravel()
        if not np.all(np.isfinite(values)):
            raise NumericalError("metric entries must be finite")
        if self.mode == "label_only" and not np.all((values == 0.0) | (values == 1.0)):
            raise DimensionError("label_only metric entries must be 0 or 1")
        if self.mode == "logits" and (np.any(values < 0.0) or np.any(values > 1.0)):
            raise NumericalError("metric entries must lie in [0, 1]")
        object.__setattr__(self, "values", values)

    def __len__(self) -> int:
        return self.values.size


@dataclass(frozen=True, eq=False)
class ExplanationWeights:
    w: np.ndarray
    lam: float

    def __len__(self) -> int:
        return self.w.size


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


def _check_label(out: PredictOutput, label: int) -> None:
    if not 0 <= label < out.probs.shape[-1]:
        raise IndexRangeError(f"label {label} outside [0, {out.probs.shape[-1]})")


def metric_classifier(out: PredictOutput, label: int) -> float:
    _check_label(out, label)
    return float(out.probs[label])


def metric_log_odds(out: PredictOutput, label: int) -> float:
    """log p_label - log Σ_{c≠label} p_c."""
    _check_label(out, label)
    probs = np.asarray(out.probs, dtype=np.float64)
    rest = np.delete(probs, label).sum()
    return float(np.log(max(probs[label], _PROB_FLOOR)) - np.log(max(rest, _PROB_FLOOR)))


def metric_lm(target_probs: Sequence[float]) -> float:
    if len(target_probs) == 0:
        raise DataError("no target tokens to average")
    return float(np.mean(target_probs))


def metric_label_only(out: PredictOutput, label: int) -> float:
    _check_label(out, label)
    return 1.0 if int(np.argmax(out.probs)) == label else 0.0


def target_sets(
    trigger: TriggerSample,
    masks: MaskSet,
    partition: BasicPartition,
    policy: str = "unmasked",
) -> list[tuple[int, ...]]:
    """Per-mask LM target positions: every trigger target, or only those left unmasked.

    Under "unmasked", a mask that hides every target falls back to all of
    the trigger's targets, so each mask always has something to average.
    """
    if policy not in TARGET_POLICIES:
        raise ConfigError(f"target policy must be one of {TARGET_POLICIES}, got {policy!r}")
    positions = trigger.target_positions
    if policy == "all":
        return [positions] * masks.c
    keep = partition.expand(masks.masks)
    return [tuple(p for p in positions if row[p]) or positions for row in keep]


def _check_mode(mode: str) -> None:
    if mode not in MODES:
        raise ConfigError(f"mode must be one of {MODES}, got {mode!r}")


def metric_vector(
    model: BlackBox,
    trigger: TriggerSample,
    masks: MaskSet,
    partition: BasicPartition,
    mode: str = DEFAULT_MODE,
    target_policy: str = "unmasked",
) -> MetricVector:
    _check_mode(mode)
    masked = apply_masks(trigger, masks, partition)
    if trigger.backend == "classifier":
        if mode == "relative":
            # row 0 is the unmasked trigger
            outputs = predict_batch(model, [trigger.data, *masked])
            scores = np.array([metric_log_odds(out, trigger.label) for out in outputs])
            return MetricVector(scores[1:] - scores[0], mode)
        metric = metric_classifier if mode == "logits" else metric_label_only
        outputs = predict_batch(model, list(masked))
        return MetricVector([metric(out, trigger.label) for out in outputs], mode)

    if mode == "label_only":
        raise ConfigError("label_only extraction is only defined for the classifier backend")
    sets = target_sets(trigger, masks, partition, target_policy)
    values = [metric_lm(lm_target_probs(model, seq, positions)) for seq, positions in zip(masked, sets)]
    if mode == "relative":
        reference = dict(zip(trigger.target_positions, lm_target_probs(model, trigger.data, trigger.target_positions)))
        values = [value - metric_lm([reference[p] for p in positions]) for value, positions in zip(values, sets)]
    return MetricVector(values, mode)


# ---------------------------------------------------------------------------
# Ridge regression
# ---------------------------------------------------------------------------


def _mask_matrix(masks: MaskSet | npt.ArrayLike) -> np.ndarray:
    if isinstance(masks, MaskSet):
        return masks.as_matrix()
    matrix = np.asarray(masks, dtype=np.float64)
    if matrix.ndim != 2:
        raise DimensionError(f"mask matrix must be 2-D, got shape {matrix.shape}")
    return matrix


def _factor(matrix: np.ndarray, lam: float):
    if not np.isfinite(lam) or lam < 0:
        raise ConfigError(f"ridge parameter must be >= 0, got {lam}")
    k = matrix.shape[1]
    if lam == 0 and np.linalg.matrix_rank(matrix) < k:
        raise NumericalError("MᵀM is singular for this mask set; use a ridge parameter > 0")
    gram = matrix.T @ matrix + lam * np.eye(k)
    try:
        return cho_factor(gram, lower=True)
    except LinAlgError as exc:
        raise NumericalError(f"ridge system is not positive definite ({exc}); use a ridge parameter > 0") from exc


def ridge_fit(
    masks: MaskSet | npt.ArrayLike,
    v: MetricVector | npt.ArrayLike,
    lam: float = DEFAULT_LAMBDA,
) -> ExplanationWeights:
    """w = (MᵀM + λI_k)⁻¹ Mᵀ v."""
    matrix = _mask_matrix(masks)
    values = v.values if isinstance(v, MetricVector) else np.asarray(v, dtype=np.float64).ravel()
    if values.size != matrix.shape[0]:
        raise DimensionError(f"metric vector has {values.size} entries for {matrix.shape[0]} masks")
    w = cho_solve(_factor(matrix, lam), matrix.T @ values)
    return ExplanationWeights(w, float(lam))


@lru_cache(maxsize=32)
def _jacobian(mask_bytes: bytes, c: int, k: int, lam: float) -> np.ndarray:
    matrix = np.frombuffer(mask_bytes, dtype=np.float64).reshape(c, k)
    logger.debug("factoring extraction operator for c=%d k=%d lambda=%g", c, k, lam)
    operator = cho_solve(_factor(matrix, lam), matrix.T)
    operator.setflags(write=False)
    return operator


def extraction_jacobian(masks: MaskSet | npt.ArrayLike, lam: float = DEFAULT_LAMBDA) -> np.ndarray:
    """Read-only k×c operator A with A @ v == ridge_fit(masks, v, lam).w."""
    matrix = np.ascontiguousarray(_mask_matrix(masks))
    return _jacobian(matrix.tobytes(), matrix.shape[0], matrix.shape[1], float(lam))


def binarize(w: ExplanationWeights | npt.ArrayLike) -> Watermark:
    values = w.w if isinstance(w, ExplanationWeights) else np.asarray(w, dtype=np.float64)
    return Watermark(np.where(values >= 0.0, 1, -1))


# ---------------------------------------------------------------------------
# Extraction
# ---------------------------------------------------------------------------


def explain(
    model: BlackBox,
    trigger: TriggerSample,
    masks: MaskSet,
    partition: BasicPartition,
    mode: str = DEFAULT_MODE,
    lam: float = DEFAULT_LAMBDA,
    target_policy: str = "unmasked",
) -> ExplanationWeights:
    """Explanation weights of the trigger, one per basic part."""
    if masks.k != partition.k:
        raise DimensionError(f"mask length {masks.k} != number of basic parts {partition.k}")
    return ridge_fit(masks, metric_vector(model, trigger, masks, partition, mode, target_policy), lam)


def extract_watermark(
    model: BlackBox,
    trigger: TriggerSample,
    masks: MaskSet,
    partition: BasicPartition,
    mode: str = DEFAULT_MODE,
    lam: float = DEFAULT_LAMBDA,
    target_policy: str = "unmasked",
) -> Watermark:
    wm = binarize(explain(model, trigger, masks, partition, mode, lam, target_policy))
    if np.all(wm.bits == wm.bits[0]):
        logger.warning("extracted watermark is single-signed (%d bits)", len(wm))
    return wm
