"""
Ownership verification: watermark success rate, Pearson's chi-squared test
on the 2×2 table of (extracted bit, original bit) pairs, and the harmless
degree of a watermarked model.

p-values are carried as log10 p throughout; at k = 1024 a perfect match
gives p ~ 1e-224, well below float64 range.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.special import erfc, erfcx
from scipy.stats import binom

from eaaw.errors import ConfigError, DataError, DimensionError, InvariantError, NumericalError
from eaaw.extraction import DEFAULT_LAMBDA, DEFAULT_MODE, extract_watermark
from eaaw.models import BlackBox, Dataset, lm_target_probs, predict_batch
from eaaw.numcore import split_rng
from eaaw.watermark import (
    BasicPartition,
    MaskSet,
    TriggerSample,
    Watermark,
    generate_masks,
    segment_input,
)

logger = logging.getLogger(__name__)

DEFAULT_ALPHA = 0.01
REPORT_FIELDS = ("k", "wsr", "chi2", "log10_p", "alpha", "decision")

_LN10 = math.log(10.0)
_ERFC_SWITCH = 6.0


# ---------------------------------------------------------------------------
# Statistics
# ---------------------------------------------------------------------------


def _check_pair(extracted: Watermark, original: Watermark) -> None:
    if len(extracted) != len(original):
        raise DimensionError(f"watermark lengths differ: {len(extracted)} vs {len(original)}")


def wsr(extracted: Watermark, original: Watermark) -> float:
    """Fraction of bits that agree."""
    _check_pair(extracted, original)
    return float(np.mean(extracted.bits == original.bits))


def contingency_table(extracted: Watermark, original: Watermark) -> np.ndarray:
    """Counts[i, j]: rows extracted (+1, -1), columns original (+1, -1)."""
    _check_pair(extracted, original)
    table = np.zeros((2, 2), dtype=np.int64)
    for row, e in enumerate((1, -1)):
        for col, o in enumerate((1, -1)):
            table[row, col] = int(np.sum((extracted.bits == e) & (original.bits == o)))
    return table


def log_sf_chi2_1df(x: float) -> float:
    """log10 P(chi2_1 >= x) = log10 erfc(sqrt(x / 2)), without underflow."""
    if not x >= 0.0:
        raise NumericalError(f"chi-squared statistic must be >= 0, got {x}")
    z = math.sqrt(x / 2.0)
    if z <= _ERFC_SWITCH:
        return float(np.log10(erfc(z)))
    # erfc(z) = erfcx(z) * exp(-z^2)
    return float((np.log(erfcx(z)) - z * z) / _LN10)


def chi_squared_log_p(extracted: Watermark, original: Watermark) -> tuple[float, float]:
    """Pearson statistic with 1 degree of freedom, no continuity correction."""
    table = contingency_table(extracted, original)
    if np.any(table.sum(axis=0) == 0):
        raise InvariantError("original watermark must contain both -1 and +1")
    k = table.sum()
    expected = np.outer(table.sum(axis=1), table.sum(axis=0)) / k
    filled = expected > 0
    chi2 = float(np.sum((table[filled] - expected[filled]) ** 2 / expected[filled]))
    return chi2, log_sf_chi2_1df(chi2)


def binomial_log_p(extracted: Watermark, original: Watermark) -> float:
    """log10 P(matches >= observed) for k fair coin flips."""
    _check_pair(extracted, original)
    k = len(original)
    matches = int(np.sum(extracted.bits == original.bits))
    return float(binom.logsf(matches - 1, k, 0.5) / _LN10)


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class VerificationReport:
    k: int
    wsr: float
    chi2: float
    log10_p: float
    alpha: float
    decision: bool
    table: np.ndarray

    @classmethod
    def from_watermarks(cls, extracted: Watermark, original: Watermark, alpha: float = DEFAULT_ALPHA) -> VerificationReport:
        if not 0.0 < alpha < 1.0:
            raise ConfigError(f"alpha must lie in (0, 1), got {alpha}")
        chi2, log10_p = chi_squared_log_p(extracted, original)
        return cls(
            k=len(original),
            wsr=wsr(extracted, original),
            chi2=chi2,
            log10_p=log10_p,
            alpha=alpha,
            decision=log10_p <= math.log10(alpha),
            table=contingency_table(extracted, original),
        )


def report_csv_row(report: VerificationReport) -> dict[str, str]:
    return {
        "k": str(report.k),
        "wsr": f"{report.wsr:.6f}",
        "chi2": f"{report.chi2:.6f}",
        "log10_p": f"{report.log10_p:.6f}",
        "alpha": f"{report.alpha:g}",
        "decision": "true" if report.decision else "false",
    }


def format_report(report: VerificationReport) -> str:
    (pp, pm), (mp, mm) = report.table.tolist()
    verdict = "OWNERSHIP VERIFIED" if report.decision else "not verified"
    return "\n".join([
        f"k          {report.k}",
        f"WSR        {report.wsr:.4f}",
        f"chi2       {report.chi2:.4f}",
        f"log10 p    {report.log10_p:.4f}  (alpha {report.alpha:g})",
        f"table      [[{pp}, {pm}], [{mp}, {mm}]]",
        f"decision   {verdict}",
    ])


# ---------------------------------------------------------------------------
# Verification
# ---------------------------------------------------------------------------


def verify(
    model: BlackBox,
    trigger: TriggerSample,
    masks: MaskSet,
    partition: BasicPartition,
    original: Watermark,
    alpha: float = DEFAULT_ALPHA,
    mode: str = DEFAULT_MODE,
    lam: float = DEFAULT_LAMBDA,
    target_policy: str = "unmasked",
) -> VerificationReport:
    """Extract with the owner's masks, then test association with the original payload."""
    extracted = extract_watermark(model, trigger, masks, partition, mode, lam, target_policy)
    report = VerificationReport.from_watermarks(extracted, original, alpha)
    logger.info(
        "verification: wsr=%.4f chi2=%.3f log10_p=%.3f decision=%s",
        report.wsr, report.chi2, report.log10_p, report.decision,
    )
    return report


def _sequence_hits(model: BlackBox, sequences: Sequence[np.ndarray]) -> tuple[int, int]:
    outputs = predict_batch(model, list(sequences))
    hits = total = 0
    for seq, out in zip(sequences, outputs):
        seq = np.asarray(seq, dtype=np.int64)
        hits += int(np.sum(out.predicted[1:] == seq[1:]))
        total += seq.size - 1
    return hits, total


def harmless_degree(model: BlackBox, benign: Dataset, triggers: Sequence[TriggerSample]) -> float:
    """Accuracy over benign test samples and trigger samples together.

    For the LM backend a "sample" is a next-token prediction at every
    position after the first.
    """
    triggers = list(triggers)
    if len(benign) == 0 and not triggers:
        raise DataError("harmless degree needs at least one benign or trigger sample")
    is_lm = triggers[0].backend == "causal_lm" if triggers else benign.labels is None
    if is_lm:
        hits, total = _sequence_hits(model, list(benign.inputs) + [t.data for t in triggers])
        if total == 0:
            raise DataError("no next-token predictions to score")
        return hits / total

    inputs = list(benign.inputs) + [t.data for t in triggers]
    benign_labels = np.asarray(benign.labels if benign.labels is not None else [], dtype=np.int64)
    labels = np.concatenate([benign_labels, np.array([t.label for t in triggers], dtype=np.int64)])
    predicted = np.array([out.label for out in predict_batch(model, inputs)])
    return float(np.mean(predicted == labels))


def mean_target_prob(model: BlackBox, sequences: Dataset) -> float:
    """Mean probability of the true next token over every position after the first."""
    probs = [
        p
        for seq in np.asarray(sequences.inputs, dtype=np.int64)
        for p in lm_target_probs(model, seq, range(1, seq.size))
    ]
    if not probs:
        raise DataError("no next-token predictions to score")
    return float(np.mean(probs))


# ---------------------------------------------------------------------------
# Ambiguity attack
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class AmbiguityResult:
    wsrs: np.ndarray
    log10_ps: np.ndarray

    @property
    def mean_wsr(self) -> float:
        return float(self.wsrs.mean())

    def n_significant(self, alpha: float = DEFAULT_ALPHA) -> int:
        return int(np.sum(self.log10_ps <= math.log10(alpha)))


def balanced_watermark(k: int, seed: int) -> Watermark:
    """Random payload with k // 2 entries of -1; the chi-squared marginals stay even."""
    if k < 2:
        raise ConfigError(f"a balanced watermark needs k >= 2, got {k}")
    bits = np.ones(k, dtype=np.int8)
    bits[: k // 2] = -1
    return Watermark(split_rng(seed, "ambiguity.target").permutation(bits))


def _forge(template: TriggerSample, model: BlackBox, rng: np.random.Generator) -> TriggerSample:
    if template.backend == "causal_lm":
        return template.with_data(rng.permutation(template.data))
    scale = float(template.data.std()) or 1.0
    data = rng.normal(0.0, scale, template.size)
    label = predict_batch(model, [data])[0].label
    return TriggerSample("classifier", data, label=label)


def ambiguity_monte_carlo(
    model: BlackBox,
    k: int,
    trials: int,
    seed: int,
    template: TriggerSample,
    lam: float = DEFAULT_LAMBDA,
    mode: str = DEFAULT_MODE,
) -> AmbiguityResult:
    """Forge random triggers and measure how well they reproduce a fixed random payload."""
    if trials < 100:
        raise ConfigError(f"ambiguity Monte Carlo needs >= 100 trials, got {trials}")
    target = balanced_watermark(k, seed)
    masks = generate_masks(k, k)
    partition = segment_input(template.size, k)
    rng = split_rng(seed, "ambiguity")
    wsrs = np.empty(trials)
    log10_ps = np.empty(trials)
    for trial in range(trials):
        forged = _forge(template, model, rng)
        extracted = extract_watermark(model, forged, masks, partition, mode, lam)
        wsrs[trial] = wsr(extracted, target)
        log10_ps[trial] = chi_squared_log_p(extracted, target)[1]
    logger.info("ambiguity: %d trials, mean wsr %.4f, max wsr %.4f", trials, wsrs.mean(), wsrs.max())
    return AmbiguityResult(wsrs, log10_ps)
