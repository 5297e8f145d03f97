"""
Watermark embedding by fine-tuning.

Objective for one step, over a benign mini-batch X plus every trigger:

    L1(f(X ∪ X_T), Y ∪ Y_T) + r1 · Σ_triggers L2(A · v(Θ), W)

v(Θ) is the metric vector of the masked trigger computed on the live
model graph, and A = (MᵀM + λI)⁻¹Mᵀ is the constant extraction operator.
L2 and its gradient with respect to the explanation e = A·v are evaluated
in numpy; the gradient is pulled back to v as Aᵀ·dL2/de and injected into
the graph as the surrogate term sum(v * g_v), whose parameter gradient is
exactly that of r1·L2.  One backward pass then covers both terms.

The unlearning attack reuses the same loop with the watermark term negated.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import numpy.typing as npt

from eaaw.errors import ConfigError, DataError, DimensionError, DivergenceError, NumericalError
from eaaw.extraction import (
    DEFAULT_LAMBDA,
    DEFAULT_MODE,
    TARGET_POLICIES,
    extract_watermark,
    extraction_jacobian,
    target_sets,
)
from eaaw.models import Dataset, Model, ModelSpec, accuracy, context_windows, lm_perplexity, training_examples
from eaaw.numcore import OPTIMIZER_KINDS, Graph, Node, OptimizerState, backward, optimizer_step, split_rng
from eaaw.verification import wsr
from eaaw.watermark import (
    MASK_SCHEMES,
    BasicPartition,
    MaskSet,
    TriggerSample,
    Watermark,
    apply_masks,
    generate_masks,
    segment_input,
)

logger = logging.getLogger(__name__)

LOSS_KINDS = ("hinge", "ce", "mse")
EMBED_MODES = ("relative", "logits")
HISTORY_FIELDS = ("epoch", "l1", "l2", "wsr", "benign_acc", "benign_ppl")

# Default hinge margins, in the units of the metric the explanation is fitted to.
LOG_ODDS_MARGIN = 0.25
PROBABILITY_MARGIN = 0.01

# Random mask sets default to this many masks per basic part.
_RANDOM_MASKS_PER_PART = 16


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EmbedConfig:
    """Embedding settings.

    `epsilon` left as None picks the margin for the metric in use: log-odds
    units for the relative classifier metric, probability units otherwise.
    """

    r1: float = 1.0
    epsilon: float | None = None
    loss: str = "hinge"
    epochs: int = 30
    lr: float = 1e-3
    optimizer: str = "adam"
    mode: str = DEFAULT_MODE
    lam: float = DEFAULT_LAMBDA
    mask_scheme: str = "leave_one_out"
    n_masks: int | None = None
    mask_seed: int = 0
    batch_size: int = 64
    seed: int = 0
    target_policy: str = "unmasked"
    early_stop: bool = True
    patience: int = 3

    def __post_init__(self) -> None:
        if not np.isfinite(self.r1) or self.r1 < 0:
            raise ConfigError(f"r1 must be >= 0, got {self.r1}")
        if self.epsilon is not None and not self.epsilon > 0:
            raise ConfigError(f"epsilon must be > 0, got {self.epsilon}")
        if self.mode not in EMBED_MODES:
            raise ConfigError(f"embedding mode must be one of {EMBED_MODES}, got {self.mode!r}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.loss not in LOSS_KINDS:
            raise ConfigError(f"loss must be one of {LOSS_KINDS}, got {self.loss!r}")
        if self.optimizer not in OPTIMIZER_KINDS:
            raise ConfigError(f"optimizer must be one of {OPTIMIZER_KINDS}, got {self.optimizer!r}")
        if not np.isfinite(self.lr) or self.lr < 0:
            raise ConfigError(f"learning rate must be >= 0, got {self.lr}")
        if self.lam < 0:
            raise ConfigError(f"ridge parameter must be >= 0, got {self.lam}")
        if self.mask_scheme not in MASK_SCHEMES:
            raise ConfigError(f"mask scheme must be one of {MASK_SCHEMES}, got {self.mask_scheme!r}")
        if self.n_masks is not None and self.n_masks < 1:
            raise ConfigError(f"n_masks must be >= 1, got {self.n_masks}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.target_policy not in TARGET_POLICIES:
            raise ConfigError(f"target policy must be one of {TARGET_POLICIES}, got {self.target_policy!r}")
        if self.patience < 1:
            raise ConfigError(f"patience must be >= 1, got {self.patience}")

    @classmethod
    def label_only(cls, **overrides) -> EmbedConfig:
        """Settings for models that will be verified from predicted labels alone."""
        overrides.setdefault("mask_scheme", "random")
        overrides.setdefault("mode", "logits")
        return cls(**overrides)

    def margin(self, is_lm: bool) -> float:
        if self.epsilon is not None:
            return self.epsilon
        return LOG_ODDS_MARGIN if self.mode == "relative" and not is_lm else PROBABILITY_MARGIN

    def mask_count(self, k: int) -> int:
        if self.n_masks is not None:
            return self.n_masks
        return k if self.mask_scheme == "leave_one_out" else _RANDOM_MASKS_PER_PART * k

    def masks_for(self, k: int) -> MaskSet:
        return generate_masks(self.mask_count(k), k, self.mask_scheme, self.mask_seed)


# ---------------------------------------------------------------------------
# Watermark losses: value and gradient with respect to e
# ---------------------------------------------------------------------------


def _operands(e: npt.ArrayLike, wm: Watermark | npt.ArrayLike) -> tuple[np.ndarray, np.ndarray]:
    ev = np.asarray(getattr(e, "w", e), dtype=np.float64).ravel()
    sv = np.asarray(getattr(wm, "bits", wm), dtype=np.float64).ravel()
    if ev.size != sv.size:
        raise DimensionError(f"explanation has {ev.size} entries, watermark has {sv.size}")
    return ev, sv


def _hinge(e: np.ndarray, s: np.ndarray, epsilon: float) -> tuple[float, np.ndarray]:
    slack = epsilon - e * s
    active = slack > 0.0
    return float(np.sum(slack[active])), np.where(active, -s, 0.0)


def _cross_entropy(e: np.ndarray, s: np.ndarray, epsilon: float) -> tuple[float, np.ndarray]:
    # -log sigmoid(s·e) for both bit values
    margin = s * e
    return float(np.sum(np.logaddexp(0.0, -margin))), -s * np.exp(-np.logaddexp(0.0, margin))


def _squared_error(e: np.ndarray, s: np.ndarray, epsilon: float) -> tuple[float, np.ndarray]:
    target = (s + 1.0) / 2.0
    prob = np.exp(-np.logaddexp(0.0, -e))
    diff = target - prob
    return float(np.sum(diff * diff)), -2.0 * diff * prob * (1.0 - prob)


_LOSSES = {"hinge": _hinge, "ce": _cross_entropy, "mse": _squared_error}


def watermark_loss(kind: str, e: npt.ArrayLike, wm: Watermark | npt.ArrayLike, epsilon: float = 0.01) -> tuple[float, np.ndarray]:
    """(L2, dL2/de) for the named loss."""
    if kind not in _LOSSES:
        raise ConfigError(f"loss must be one of {LOSS_KINDS}, got {kind!r}")
    return _LOSSES[kind](*_operands(e, wm), epsilon)


def hinge_loss(e: npt.ArrayLike, wm: Watermark | npt.ArrayLike, epsilon: float = 0.01) -> float:
    """Σ max(0, ε - e_i·wm_i)."""
    return watermark_loss("hinge", e, wm, epsilon)[0]


def ce_watermark_loss(e: npt.ArrayLike, wm: Watermark | npt.ArrayLike) -> float:
    """Binary cross-entropy of sigmoid(e) against the bits, -1 read as class 0."""
    return watermark_loss("ce", e, wm)[0]


def mse_watermark_loss(e: npt.ArrayLike, wm: Watermark | npt.ArrayLike) -> float:
    return watermark_loss("mse", e, wm)[0]


# ---------------------------------------------------------------------------
# Joint objective
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class _MetricPlan:
    """Everything needed to rebuild one trigger's metric vector on a fresh graph.

    The model scores `batch` against `index` (log-odds or probabilities);
    `combine` maps those scores linearly onto the c metric entries.
    """

    batch: np.ndarray
    index: np.ndarray
    combine: np.ndarray | None = None
    log_odds: bool = False


def _classifier_plan(trigger: TriggerSample, masked: np.ndarray, mode: str) -> _MetricPlan:
    c = len(masked)
    if mode == "logits":
        return _MetricPlan(masked, np.full(c, trigger.label, dtype=np.int64))
    # row 0 is the unmasked trigger; each metric entry is masked minus reference
    batch = np.concatenate([trigger.data[None, :], masked])
    combine = np.hstack([-np.ones((c, 1)), np.eye(c)])
    return _MetricPlan(batch, np.full(c + 1, trigger.label, dtype=np.int64), combine, log_odds=True)


def _lm_plan(
    spec: ModelSpec,
    trigger: TriggerSample,
    masked: np.ndarray,
    positions: list[tuple[int, ...]],
    mode: str,
) -> _MetricPlan:
    contexts = [context_windows(seq, pos, spec.context_len) for seq, pos in zip(masked, positions)]
    targets = [seq[list(pos)] for seq, pos in zip(masked, positions)]
    n_masked = sum(len(p) for p in positions)
    reference = trigger.target_positions if mode == "relative" else ()
    if reference:
        contexts.append(context_windows(trigger.data, reference, spec.context_len))
        targets.append(trigger.data[list(reference)])
    column = {p: n_masked + i for i, p in enumerate(reference)}

    combine = np.zeros((len(masked), n_masked + len(reference)))
    start = 0
    for row, pos in enumerate(positions):
        combine[row, start:start + len(pos)] = 1.0 / len(pos)
        if reference:
            combine[row, [column[p] for p in pos]] -= 1.0 / len(pos)
        start += len(pos)
    return _MetricPlan(np.concatenate(contexts), np.concatenate(targets), combine)


def _metric_plan(
    spec: ModelSpec,
    trigger: TriggerSample,
    masks: MaskSet,
    partition: BasicPartition,
    policy: str,
    mode: str = DEFAULT_MODE,
) -> _MetricPlan:
    masked = apply_masks(trigger, masks, partition)
    if not spec.is_lm:
        return _classifier_plan(trigger, masked, mode)
    return _lm_plan(spec, trigger, masked, target_sets(trigger, masks, partition, policy), mode)


def _trigger_examples(spec: ModelSpec, triggers: Sequence[TriggerSample]) -> tuple[np.ndarray, np.ndarray]:
    data = np.stack([t.data for t in triggers])
    labels = None if spec.is_lm else np.array([t.label for t in triggers], dtype=np.int64)
    return training_examples(spec, Dataset(data, labels))


@dataclass(frozen=True)
class JointLoss:
    l1: float
    l2: float
    total: float


class JointObjective:
    """Precomputed triggers, masks and extraction operator for repeated steps.

    `direction` is +1 for embedding and -1 for unlearning.
    """

    def __init__(
        self,
        spec: ModelSpec,
        triggers: Sequence[TriggerSample],
        wm: Watermark,
        config: EmbedConfig,
        masks: MaskSet | None = None,
        direction: float = 1.0,
    ) -> None:
        triggers = list(triggers)
        if not triggers:
            raise DataError("at least one trigger sample is required")
        if len({t.size for t in triggers}) != 1:
            raise DimensionError("all trigger samples must have the same length")
        if any(t.backend != spec.backend for t in triggers):
            raise ConfigError(f"trigger backend does not match the {spec.backend} model")
        k = len(wm)
        self.spec = spec
        self.triggers = triggers
        self.wm = wm
        self.config = config
        self.direction = direction
        self.partition = segment_input(triggers[0].size, k)
        self.masks = masks if masks is not None else config.masks_for(k)
        if self.masks.k != k:
            raise DimensionError(f"masks have {self.masks.k} parts, watermark has {k} bits")
        self.operator = extraction_jacobian(self.masks, config.lam)
        self.epsilon = config.margin(spec.is_lm)
        self.plans = [
            _metric_plan(spec, t, self.masks, self.partition, config.target_policy, config.mode) for t in triggers
        ]
        self.trigger_inputs, self.trigger_targets = _trigger_examples(spec, triggers)

    def metric_node(self, model: Model, graph: Graph, plan: _MetricPlan) -> Node:
        logits = model.forward(graph, plan.batch)
        if plan.log_odds:
            scores = graph.log_odds(logits, plan.index)
        else:
            scores = graph.gather(graph.softmax(logits), plan.index)
        return scores if plan.combine is None else graph.matvec(plan.combine, scores)

    def watermark_term(self, model: Model) -> float:
        """Current L2 summed over triggers, without building gradients."""
        total = 0.0
        for plan in self.plans:
            v = self.metric_node(model, Graph(), plan).value
            total += watermark_loss(self.config.loss, self.operator @ v, self.wm, self.epsilon)[0]
        return total

    def build(self, model: Model, inputs: np.ndarray, targets: np.ndarray, step: int = 0) -> tuple[JointLoss, Graph, Node]:
        """Record the step's graph; returns the loss values and the node to differentiate."""
        cfg = self.config
        graph = Graph()
        batch = np.concatenate([inputs, self.trigger_inputs])
        labels = np.concatenate([targets, self.trigger_targets])
        try:
            l1 = graph.softmax_cross_entropy(model.forward(graph, batch), labels)
        except NumericalError as exc:
            raise DivergenceError("L1", step, float("nan")) from exc

        terms = [l1]
        l2_total = 0.0
        try:
            for plan in self.plans:
                v = self.metric_node(model, graph, plan)
                l2, grad_e = watermark_loss(cfg.loss, self.operator @ v.value, self.wm, self.epsilon)
                l2_total += l2
                if cfg.r1 != 0.0:
                    weight = self.direction * cfg.r1 * (self.operator.T @ grad_e)
                    terms.append(graph.sum(graph.mul(v, weight)))
        except NumericalError as exc:
            raise DivergenceError("L2", step, float("nan")) from exc
        if not np.isfinite(l2_total):
            raise DivergenceError("L2", step, l2_total)

        root = graph.add(*terms) if len(terms) > 1 else l1
        l1_value = float(l1.value)
        loss = JointLoss(l1_value, l2_total, l1_value + self.direction * cfg.r1 * l2_total)
        return loss, graph, root


def _objective_for(model: Model, triggers, wm, config, masks) -> JointObjective:
    if isinstance(triggers, TriggerSample):
        triggers = [triggers]
    return JointObjective(model.spec, triggers, wm, config, masks)


def joint_loss(
    model: Model,
    batch: Dataset,
    triggers: TriggerSample | Sequence[TriggerSample],
    wm: Watermark,
    config: EmbedConfig | None = None,
    masks: MaskSet | None = None,
) -> JointLoss:
    """L1 over batch ∪ triggers, L2 over the triggers, and L1 + r1·L2."""
    objective = _objective_for(model, triggers, wm, config or EmbedConfig(), masks)
    inputs, targets = training_examples(model.spec, batch)
    return objective.build(model, inputs, targets)[0]


def joint_gradients(
    model: Model,
    batch: Dataset,
    triggers: TriggerSample | Sequence[TriggerSample],
    wm: Watermark,
    config: EmbedConfig | None = None,
    masks: MaskSet | None = None,
) -> dict[str, np.ndarray]:
    """Gradient of L1 + r1·L2 with respect to every parameter; `model` is left untouched."""
    objective = _objective_for(model, triggers, wm, config or EmbedConfig(), masks)
    inputs, targets = training_examples(model.spec, batch)
    _, graph, root = objective.build(model, inputs, targets)
    store = model.store.copy()
    store.zero_grad()
    backward(graph, store, root)
    return {name: grad.copy() for name, grad in store.grads.items()}


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EpochRecord:
    """One epoch of embedding; benign_ppl is the LM's perplexity and None for classifiers."""

    epoch: int
    l1: float
    l2: float
    wsr: float
    benign_acc: float
    benign_ppl: float | None = None

    def as_row(self) -> dict[str, str]:
        return {
            "epoch": str(self.epoch),
            "l1": f"{self.l1:.6f}",
            "l2": f"{self.l2:.6f}",
            "wsr": f"{self.wsr:.6f}",
            "benign_acc": f"{self.benign_acc:.6f}",
            "benign_ppl": "" if self.benign_ppl is None else f"{self.benign_ppl:.6f}",
        }


@dataclass(eq=False)
class EmbedResult:
    model: Model
    masks: MaskSet
    partition: BasicPartition
    baseline_accuracy: float
    history: list[EpochRecord] = field(default_factory=list)
    baseline_ppl: float | None = None

    @property
    def final_wsr(self) -> float:
        return self.history[-1].wsr if self.history else 0.0


def benign_perplexity(model: Model, data: Dataset) -> float | None:
    return lm_perplexity(model, data) if model.spec.is_lm else None


def trigger_wsr(model: Model, objective: JointObjective, wm: Watermark | None = None) -> float:
    """Mean WSR of `wm` (default: the objective's payload) over the objective's triggers."""
    cfg = objective.config
    target = wm if wm is not None else objective.wm
    scores = [
        wsr(
            extract_watermark(model, t, objective.masks, objective.partition, cfg.mode, cfg.lam, cfg.target_policy),
            target,
        )
        for t in objective.triggers
    ]
    return float(np.mean(scores))


def run_joint_training(
    model: Model,
    benign: Dataset,
    objective: JointObjective,
    eval_data: Dataset | None = None,
    on_epoch: Callable[[int, Model], None] | None = None,
) -> EmbedResult:
    """Optimise a copy of `model` on the objective; the input model is not modified."""
    cfg = objective.config
    work = model.copy()
    eval_set = eval_data if eval_data is not None else benign
    baseline = accuracy(work, eval_set)
    inputs, targets = training_examples(work.spec, benign)
    state = OptimizerState(cfg.optimizer, cfg.lr)
    rng = split_rng(cfg.seed, "embed.batches")
    result = EmbedResult(work, objective.masks, objective.partition, baseline, baseline_ppl=benign_perplexity(work, eval_set))

    n = len(targets)
    step = 0
    satisfied = 0
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n)
        l1_sum = 0.0
        batches = 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            step += 1
            loss, graph, root = objective.build(work, inputs[idx], targets[idx], step)
            work.store.zero_grad()
            backward(graph, work.store, root)
            optimizer_step(work.store, state)
            l1_sum += loss.l1
            batches += 1

        try:
            l2 = objective.watermark_term(work)
            record = EpochRecord(
                epoch, l1_sum / batches, l2, trigger_wsr(work, objective),
                accuracy(work, eval_set), benign_perplexity(work, eval_set),
            )
        except NumericalError as exc:
            raise DivergenceError("L2", step, float("nan")) from exc
        result.history.append(record)
        logger.info(
            "epoch %d/%d: l1=%.5f l2=%.5f wsr=%.4f acc=%.4f%s",
            epoch, cfg.epochs, record.l1, record.l2, record.wsr, record.benign_acc,
            "" if record.benign_ppl is None else f" ppl={record.benign_ppl:.3f}",
        )
        if on_epoch is not None:
            on_epoch(epoch, work)

        satisfied = satisfied + 1 if l2 == 0.0 and record.benign_acc >= baseline - 0.01 else 0
        if cfg.early_stop and satisfied >= cfg.patience:
            logger.debug("early stop after epoch %d: watermark loss zero for %d epochs", epoch, satisfied)
            break
    return result


def embed_watermark(
    model: Model,
    benign: Dataset,
    triggers: TriggerSample | Sequence[TriggerSample],
    wm: Watermark,
    config: EmbedConfig | None = None,
    eval_data: Dataset | None = None,
    masks: MaskSet | None = None,
    on_epoch: Callable[[int, Model], None] | None = None,
) -> EmbedResult:
    """Fine-tune a trained model so each trigger's explanation signs spell `wm`."""
    config = config or EmbedConfig()
    wm.check_payload()
    if config.r1 == 0.0:
        logger.warning("r1 = 0: the watermark term is disabled and nothing will be embedded")
    objective = _objective_for(model, triggers, wm, config, masks)
    logger.info(
        "embedding %d-bit watermark into %s model with %d trigger(s), %d masks (%s)",
        len(wm), model.spec.backend, len(objective.triggers), objective.masks.c, objective.masks.scheme,
    )
    return run_joint_training(model, benign, objective, eval_data, on_epoch)
