"""
Watermark-removal attacks for robustness experiments.

  finetune    plain cross-entropy training on held-out data
  prune       zero the smallest-magnitude weights (biases exempt)
  overwrite   embed a second watermark with the adversary's own trigger
  unlearn     ascend the watermark loss for a guessed payload and random triggers
  input_mask  wrap the model so every query is averaged over h randomly masked copies

Attacks never modify their input model.  Each returns an AttackResult whose
model satisfies the same black-box surface as the original, plus a trace of
(step, benign accuracy, owner WSR, owner log10 p) measured through an OwnerKey.
For the LM the benign column holds the mean true-token probability.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
import numpy.typing as npt

from eaaw.embedding import EmbedConfig, JointObjective, embed_watermark, run_joint_training
from eaaw.errors import ConfigError, DataError, IndexRangeError
from eaaw.extraction import DEFAULT_LAMBDA, DEFAULT_MODE
from eaaw.models import BlackBox, Dataset, Model, PredictOutput, clone, fit
from eaaw.numcore import OptimizerState, split_rng
from eaaw.verification import DEFAULT_ALPHA, harmless_degree, mean_target_prob, verify
from eaaw.watermark import BasicPartition, MaskSet, TriggerSample, Watermark

logger = logging.getLogger(__name__)

ATTACK_KINDS = ("finetune", "prune", "overwrite", "unlearn", "input_mask")
TRACE_FIELDS = ("step", "benign_acc", "wsr", "log10_p")


# ---------------------------------------------------------------------------
# Configuration and results
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AttackConfig:
    kind: str
    epochs: int = 20
    lr: float = 1e-4
    optimizer: str = "adam"
    batch_size: int = 64
    rate: float = 0.4
    per_layer: bool = False
    h: int = 1
    tau: float = 0.1
    parts: int = 64
    r1: float = 1.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.kind not in ATTACK_KINDS:
            raise ConfigError(f"attack kind must be one of {ATTACK_KINDS}, got {self.kind!r}")
        if not 0.0 <= self.rate <= 1.0:
            raise ConfigError(f"prune rate must lie in [0, 1], got {self.rate}")
        if not 0.0 <= self.tau <= 1.0:
            raise ConfigError(f"masking rate must lie in [0, 1], got {self.tau}")
        if self.h < 1:
            raise ConfigError(f"h must be >= 1, got {self.h}")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")


@dataclass(frozen=True)
class TracePoint:
    step: int
    benign_acc: float
    wsr: float
    log10_p: float

    def as_row(self) -> dict[str, str]:
        return {
            "step": str(self.step),
            "benign_acc": f"{self.benign_acc:.6f}",
            "wsr": f"{self.wsr:.6f}",
            "log10_p": f"{self.log10_p:.6f}",
        }


@dataclass(eq=False)
class AttackResult:
    kind: str
    model: BlackBox
    trace: list[TracePoint] = field(default_factory=list)
    extras: dict[str, float] = field(default_factory=dict)

    @property
    def final(self) -> TracePoint | None:
        return self.trace[-1] if self.trace else None


def benign_score(model: BlackBox, eval_data: Dataset) -> float:
    """Test accuracy for the classifier, mean true-token probability for the LM."""
    if eval_data.labels is None:
        return mean_target_prob(model, eval_data)
    return harmless_degree(model, eval_data, [])


@dataclass(frozen=True, eq=False)
class OwnerKey:
    """The owner's secret verification material, used to score attacked models."""

    trigger: TriggerSample
    masks: MaskSet
    partition: BasicPartition
    wm: Watermark
    eval_data: Dataset
    lam: float = DEFAULT_LAMBDA
    alpha: float = DEFAULT_ALPHA
    mode: str = DEFAULT_MODE
    target_policy: str = "unmasked"

    def measure(self, model: BlackBox, step: int) -> TracePoint:
        report = verify(
            model, self.trigger, self.masks, self.partition, self.wm,
            self.alpha, self.mode, self.lam, self.target_policy,
        )
        benign = benign_score(model, self.eval_data)
        return TracePoint(step, benign, report.wsr, report.log10_p)


def _start(kind: str, model: BlackBox, owner: OwnerKey | None) -> AttackResult:
    result = AttackResult(kind, model)
    if owner is not None:
        result.trace.append(owner.measure(model, 0))
    return result


def _tracker(result: AttackResult, owner: OwnerKey | None):
    def on_epoch(epoch: int, model: Model) -> None:
        if owner is not None:
            point = owner.measure(model, epoch)
            result.trace.append(point)
            logger.info("%s epoch %d: wsr=%.4f log10_p=%.3f", result.kind, epoch, point.wsr, point.log10_p)

    return on_epoch


# ---------------------------------------------------------------------------
# Model-modifying attacks
# ---------------------------------------------------------------------------


def finetune_attack(model: Model, heldout: Dataset, config: AttackConfig, owner: OwnerKey | None = None) -> AttackResult:
    if len(heldout) == 0:
        raise DataError("fine-tuning needs a nonempty held-out dataset")
    attacked = clone(model)
    result = _start("finetune", attacked, owner)
    if config.epochs == 0:
        return result
    track = _tracker(result, owner)
    fit(
        attacked,
        heldout,
        config.epochs,
        OptimizerState(config.optimizer, config.lr),
        split_rng(config.seed, "attack.finetune"),
        config.batch_size,
        # fit counts epochs from 0
        on_epoch=lambda epoch, m: track(epoch + 1, m),
    )
    return result


def prune_weights(model: Model, rate: float, per_layer: bool = False) -> Model:
    """Zero the ceil(rate·n) smallest-magnitude weight entries of a copy of `model`.

    Ties are broken by parameter declaration order, then by flat index.
    """
    if not 0.0 <= rate <= 1.0:
        raise ConfigError(f"prune rate must lie in [0, 1], got {rate}")
    pruned = clone(model)
    names = [name for name in pruned.store.names() if name.endswith(".weight")]
    if per_layer:
        for name in names:
            flat = pruned.store.params[name].reshape(-1)
            count = math.ceil(rate * flat.size)
            flat[np.argsort(np.abs(flat), kind="stable")[:count]] = 0.0
        return pruned

    flats = [pruned.store.params[name].reshape(-1) for name in names]
    magnitudes = np.abs(np.concatenate(flats))
    count = math.ceil(rate * magnitudes.size)
    chosen = np.argsort(magnitudes, kind="stable")[:count]
    bounds = np.cumsum([0] + [f.size for f in flats])
    for i, flat in enumerate(flats):
        local = chosen[(chosen >= bounds[i]) & (chosen < bounds[i + 1])] - bounds[i]
        flat[local] = 0.0
    logger.debug("pruned %d of %d weights", count, magnitudes.size)
    return pruned


def prune_attack(model: Model, config: AttackConfig, owner: OwnerKey | None = None) -> AttackResult:
    result = AttackResult("prune", prune_weights(model, config.rate, config.per_layer))
    if owner is not None:
        result.trace.append(owner.measure(result.model, 1))
    return result


def overwrite_attack(
    model: Model,
    benign: Dataset,
    adversary_triggers: TriggerSample | Sequence[TriggerSample],
    adversary_wm: Watermark,
    embed_config: EmbedConfig,
    owner: OwnerKey | None = None,
) -> AttackResult:
    """Embed the adversary's watermark on top; records the WSR of both payloads."""
    result = _start("overwrite", model, owner)
    embedded = embed_watermark(
        model, benign, adversary_triggers, adversary_wm, embed_config,
        on_epoch=_tracker(result, owner),
    )
    result.model = embedded.model
    result.extras["adversary_wsr"] = embedded.final_wsr
    return result


def unlearn_attack(
    model: Model,
    benign: Dataset,
    guessed_wm: Watermark,
    random_triggers: TriggerSample | Sequence[TriggerSample],
    embed_config: EmbedConfig,
    owner: OwnerKey | None = None,
) -> AttackResult:
    """Minimise L1 - r1·L2 for a guessed payload on adversary-chosen triggers."""
    triggers = [random_triggers] if isinstance(random_triggers, TriggerSample) else list(random_triggers)
    config = replace(embed_config, early_stop=False)
    objective = JointObjective(model.spec, triggers, guessed_wm, config, direction=-1.0)
    result = _start("unlearn", model, owner)
    trained = run_joint_training(model, benign, objective, on_epoch=_tracker(result, owner))
    result.model = trained.model
    return result


# ---------------------------------------------------------------------------
# Input masking
# ---------------------------------------------------------------------------


class MaskedInputModel:
    """Averages the inner model's predictions over h fixed random part masks.

    Each mask hides every basic part independently with probability tau.
    """

    def __init__(self, inner: BlackBox, partition: BasicPartition, h: int = 1, tau: float = 0.1, seed: int = 0) -> None:
        if h < 1:
            raise ConfigError(f"h must be >= 1, got {h}")
        if not 0.0 <= tau <= 1.0:
            raise ConfigError(f"masking rate must lie in [0, 1], got {tau}")
        self.inner = inner
        self.partition = partition
        self.h = h
        self.tau = tau
        rng = split_rng(seed, "attack.input_mask")
        self.keep = partition.expand(rng.random((h, partition.k)) >= tau)

    @property
    def is_identity(self) -> bool:
        return bool(self.keep.all())

    def _copies(self, x: np.ndarray) -> list[np.ndarray]:
        fill = 0.0 if np.issubdtype(x.dtype, np.floating) else 0
        return [np.where(row, x, fill).astype(x.dtype) for row in self.keep]

    def predict_batch(self, inputs: Sequence[np.ndarray]) -> list[PredictOutput]:
        if self.is_identity:
            return self.inner.predict_batch(inputs)
        outputs = []
        for x in inputs:
            copies = self.inner.predict_batch(self._copies(np.asarray(x)))
            outputs.append(PredictOutput(np.mean([out.probs for out in copies], axis=0)))
        return outputs

    def target_probs(self, tokens: npt.ArrayLike, positions: Sequence[int]) -> list[float]:
        seq = np.asarray(tokens, dtype=np.int64)
        if self.is_identity:
            return self.inner.target_probs(seq, positions)
        pos = np.asarray(list(positions), dtype=np.int64)
        if pos.size == 0:
            return []
        if pos.min() < 1 or pos.max() >= seq.size:
            raise IndexRangeError(f"target positions must lie in [1, {seq.size}), got {pos.tolist()}")
        probs = self.predict_batch([seq])[0].probs
        return probs[pos, seq[pos]].tolist()


def input_mask_attack(
    model: BlackBox,
    x: npt.ArrayLike,
    partition: BasicPartition,
    h: int,
    tau: float,
    seed: int = 0,
) -> PredictOutput:
    """Averaged prediction for one input under h random masks."""
    return MaskedInputModel(model, partition, h, tau, seed).predict_batch([np.asarray(x)])[0]


def input_mask_model(model: BlackBox, partition: BasicPartition, config: AttackConfig, owner: OwnerKey | None = None) -> AttackResult:
    wrapped = MaskedInputModel(model, partition, config.h, config.tau, config.seed)
    result = AttackResult("input_mask", wrapped)
    if owner is not None:
        result.trace.append(owner.measure(wrapped, 1))
    return result
