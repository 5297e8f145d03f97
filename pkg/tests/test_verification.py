"""Tests for eaaw.verification — WSR, chi-squared p-values, reports, harmless degree, ambiguity."""

from __future__ import annotations

import math

import numpy as np
import pytest
from scipy.stats import chi2 as chi2_dist

from eaaw.datasets import blobs, build_triggers, split
from eaaw.errors import ConfigError, DataError, DimensionError, InvariantError, NumericalError
from eaaw.models import Dataset, Model, ModelSpec, PredictOutput, train
from eaaw.verification import (
    VerificationReport,
    ambiguity_monte_carlo,
    balanced_watermark,
    binomial_log_p,
    chi_squared_log_p,
    contingency_table,
    format_report,
    harmless_degree,
    mean_target_prob,
    log_sf_chi2_1df,
    report_csv_row,
    verify,
    wsr,
)
from eaaw.watermark import TriggerSample, Watermark, generate_masks, segment_input


# ---------------------------------------------------------------------------
# Helpers
# ---------------------------------------------------------------------------


def _balanced(k: int) -> Watermark:
    return Watermark([1, -1] * (k // 2))


def _flip(wm: Watermark, count: int) -> Watermark:
    bits = wm.bits.copy()
    bits[:count] *= -1
    return Watermark(bits)


class _FirstFeatureClassifier:
    """Predicts the class stored in the first feature."""

    def __init__(self, n_classes: int = 4) -> None:
        self.n_classes = n_classes

    def predict_batch(self, inputs):
        return [PredictOutput(np.eye(self.n_classes)[int(x[0])]) for x in inputs]

    def target_probs(self, tokens, positions):
        raise AssertionError("not a language model")


class _EchoLM:
    """Puts all mass on the true token at every position."""

    def predict_batch(self, inputs):
        return [PredictOutput(np.eye(8)[np.asarray(seq)]) for seq in inputs]

    def target_probs(self, tokens, positions):
        return [1.0] * len(positions)


class _PositionLM:
    """Target probability 0.1 · position."""

    def __init__(self) -> None:
        self.seen: list[tuple[int, ...]] = []

    def predict_batch(self, inputs):
        raise AssertionError("LM scoring must go through target_probs")

    def target_probs(self, tokens, positions):
        self.seen.append(tuple(positions))
        return [0.1 * p for p in positions]


class _AdditiveModel:
    def __init__(self, weights, part_size: int) -> None:
        self.weights = np.asarray(weights, dtype=np.float64)
        self.part_size = part_size

    def predict_batch(self, inputs):
        outputs = []
        for x in inputs:
            present = np.asarray(x).reshape(-1, self.part_size).any(axis=1)
            p = 0.5 + float(self.weights @ present)
            outputs.append(PredictOutput(np.array([p, 1.0 - p])))
        return outputs

    def target_probs(self, tokens, positions):
        raise AssertionError("not a language model")


# ---------------------------------------------------------------------------
# WSR and contingency table
# ---------------------------------------------------------------------------


class TestWsr:
    def test_identical(self):
        assert wsr(_balanced(8), _balanced(8)) == 1.0

    def test_complement(self):
        wm = _balanced(8)
        assert wsr(Watermark(-wm.bits), wm) == 0.0

    def test_half(self):
        wm = _balanced(64)
        assert wsr(_flip(wm, 32), wm) == 0.5

    def test_length_mismatch(self):
        with pytest.raises(DimensionError):
            wsr(_balanced(8), _balanced(10))


class TestContingencyTable:
    def test_counts_sum_to_k(self):
        wm = _balanced(16)
        table = contingency_table(_flip(wm, 3), wm)
        assert table.sum() == 16
        assert table.tolist() == [[6, 1], [2, 7]]


# ---------------------------------------------------------------------------
# Chi-squared
# ---------------------------------------------------------------------------


class TestLogSf:
    def test_zero(self):
        assert log_sf_chi2_1df(0.0) == 0.0

    def test_five_percent_quantile(self):
        assert log_sf_chi2_1df(3.841) == pytest.approx(math.log10(0.05), abs=1e-3)

    @pytest.mark.parametrize("x", [0.1, 1.0, 3.841, 10.0, 100.0, 1024.0])
    def test_matches_scipy(self, x):
        expected = chi2_dist.logsf(x, 1) / math.log(10.0)
        assert log_sf_chi2_1df(x) == pytest.approx(expected, rel=1e-8)

    def test_large_statistic(self):
        assert log_sf_chi2_1df(1024.0) == pytest.approx(-224.6, abs=0.1)

    def test_continuous_at_switch(self):
        assert abs(log_sf_chi2_1df(72.0 - 1e-9) - log_sf_chi2_1df(72.0 + 1e-9)) <= 1e-8

    def test_monotone(self):
        values = [log_sf_chi2_1df(x) for x in np.linspace(0.0, 400.0, 801)]
        assert all(b <= a for a, b in zip(values, values[1:]))

    def test_negative(self):
        with pytest.raises(NumericalError):
            log_sf_chi2_1df(-1.0)


class TestChiSquared:
    @pytest.mark.parametrize("k", [8, 64, 256, 1024])
    def test_perfect_balanced_match_gives_k(self, k):
        wm = _balanced(k)
        chi2, log10_p = chi_squared_log_p(wm, wm)
        assert chi2 == k
        assert log10_p == pytest.approx(log_sf_chi2_1df(float(k)))

    def test_k64_order(self):
        wm = _balanced(64)
        _, log10_p = chi_squared_log_p(wm, wm)
        assert log10_p == pytest.approx(-14.91, abs=0.05)
        assert log10_p <= -13

    def test_k256_order(self):
        wm = _balanced(256)
        assert chi_squared_log_p(wm, wm)[1] == pytest.approx(-57.2, abs=0.1)

    def test_k1024_order(self):
        wm = _balanced(1024)
        assert chi_squared_log_p(wm, wm)[1] <= -220

    def test_independent_cells(self):
        original = Watermark([1, 1, -1, -1] * 4)
        extracted = Watermark([1, -1, 1, -1] * 4)
        chi2, log10_p = chi_squared_log_p(extracted, original)
        assert chi2 == 0.0
        assert log10_p == 0.0

    def test_sign_relabelling_invariance(self):
        original = Watermark(np.random.default_rng(0).permutation([1] * 20 + [-1] * 12))
        extracted = _flip(original, 5)
        a = chi_squared_log_p(extracted, original)
        b = chi_squared_log_p(Watermark(-extracted.bits), Watermark(-original.bits))
        assert a == pytest.approx(b)

    def test_single_signed_extraction_does_not_verify(self):
        original = _balanced(16)
        chi2, log10_p = chi_squared_log_p(Watermark([1] * 16), original)
        assert chi2 == 0.0
        assert log10_p == 0.0

    def test_single_signed_original(self):
        with pytest.raises(InvariantError):
            chi_squared_log_p(_balanced(8), Watermark([1] * 8))


class TestBinomial:
    def test_perfect_match(self):
        wm = _balanced(8)
        assert binomial_log_p(wm, wm) == pytest.approx(math.log10(1 / 256))

    def test_no_match(self):
        wm = _balanced(8)
        assert binomial_log_p(Watermark(-wm.bits), wm) == pytest.approx(0.0)


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------


class TestVerificationReport:
    def test_decision_threshold(self):
        wm = _balanced(16)
        extracted = _flip(wm, 3)
        _, log10_p = chi_squared_log_p(extracted, wm)
        assert VerificationReport.from_watermarks(extracted, wm, 10 ** (log10_p + 1e-9)).decision
        assert not VerificationReport.from_watermarks(extracted, wm, 10 ** (log10_p - 1e-9)).decision

    def test_alpha_range(self):
        with pytest.raises(ConfigError):
            VerificationReport.from_watermarks(_balanced(8), _balanced(8), 1.0)

    def test_csv_row(self):
        wm = _balanced(8)
        row = report_csv_row(VerificationReport.from_watermarks(wm, wm))
        assert row["k"] == "8"
        assert row["wsr"] == "1.000000"
        assert row["chi2"] == "8.000000"
        assert row["alpha"] == "0.01"
        assert row["decision"] == "true"

    def test_text_block(self):
        wm = _balanced(8)
        text = format_report(VerificationReport.from_watermarks(wm, wm))
        assert "OWNERSHIP VERIFIED" in text
        assert "[[4, 0], [0, 4]]" in text


class TestVerify:
    def test_additive_model_verifies(self):
        wm = _balanced(8)
        model = _AdditiveModel(0.2 * wm.bits, part_size=2)
        trigger = TriggerSample("classifier", np.ones(16), label=0)
        report = verify(model, trigger, generate_masks(8, 8), segment_input(16, 8), wm)
        assert report.wsr == 1.0
        assert report.decision

    def test_wrong_payload_fails(self):
        wm = _balanced(8)
        model = _AdditiveModel(0.2 * wm.bits, part_size=2)
        trigger = TriggerSample("classifier", np.ones(16), label=0)
        other = Watermark([1, 1, -1, -1] * 2)
        report = verify(model, trigger, generate_masks(8, 8), segment_input(16, 8), other)
        assert report.wsr == 0.5
        assert not report.decision


# ---------------------------------------------------------------------------
# Harmless degree
# ---------------------------------------------------------------------------


class TestHarmlessDegree:
    def test_weighted_count(self):
        labels = np.zeros(90, dtype=np.int64)
        inputs = np.zeros((90, 3))
        inputs[:9, 0] = 1
        triggers = [TriggerSample("classifier", np.array([2.0, 0.0, 0.0]), label=2) for _ in range(10)]
        score = harmless_degree(_FirstFeatureClassifier(), Dataset(inputs, labels), triggers)
        assert score == pytest.approx(0.91)

    def test_all_correct(self):
        inputs = np.array([[0.0, 1.0], [3.0, 1.0]])
        assert harmless_degree(_FirstFeatureClassifier(), Dataset(inputs, np.array([0, 3])), []) == 1.0

    def test_language_model(self):
        data = Dataset(np.array([[1, 2, 3, 4], [5, 6, 7, 1]]))
        trigger = TriggerSample("causal_lm", np.array([2, 2, 2]))
        assert harmless_degree(_EchoLM(), data, [trigger]) == 1.0

    def test_empty(self):
        with pytest.raises(DataError):
            harmless_degree(_FirstFeatureClassifier(), Dataset(np.zeros((0, 3)), np.zeros(0)), [])


class TestMeanTargetProb:
    def test_echo_model(self):
        assert mean_target_prob(_EchoLM(), Dataset(np.array([[1, 2, 3], [4, 5, 6]]))) == 1.0

    def test_skips_the_first_position(self):
        lm = _PositionLM()
        assert mean_target_prob(lm, Dataset(np.array([[1, 2, 3, 4]]))) == pytest.approx(0.2)
        assert lm.seen == [(1, 2, 3)]

    def test_nothing_to_score(self):
        with pytest.raises(DataError):
            mean_target_prob(_EchoLM(), Dataset(np.zeros((0, 4), dtype=np.int64)))


# ---------------------------------------------------------------------------
# Ambiguity attack
# ---------------------------------------------------------------------------


class TestBalancedWatermark:
    def test_even_split(self):
        wm = balanced_watermark(7, 3)
        assert int(np.sum(wm.bits == -1)) == 3
        assert int(np.sum(wm.bits == 1)) == 4

    def test_deterministic(self):
        assert balanced_watermark(32, 1) == balanced_watermark(32, 1)


class TestAmbiguityMonteCarlo:
    def _model(self) -> Model:
        return Model.initialize(ModelSpec.for_classifier(input_dim=32, n_classes=3, hidden=(8,)), 1)

    def test_too_few_trials(self):
        template = TriggerSample("classifier", np.ones(32), label=0)
        with pytest.raises(ConfigError):
            ambiguity_monte_carlo(self._model(), 16, 50, 0, template)

    def test_forged_triggers_do_not_verify(self):
        template = TriggerSample("classifier", np.random.default_rng(2).normal(size=32), label=0)
        result = ambiguity_monte_carlo(self._model(), 16, 100, 0, template)
        assert result.wsrs.shape == (100,)
        assert 0.35 <= result.mean_wsr <= 0.65
        assert result.wsrs.max() < 1.0
        assert result.n_significant() <= 10

    def test_deterministic(self):
        template = TriggerSample("classifier", np.random.default_rng(2).normal(size=32), label=0)
        a = ambiguity_monte_carlo(self._model(), 8, 100, 4, template)
        b = ambiguity_monte_carlo(self._model(), 8, 100, 4, template)
        np.testing.assert_array_equal(a.wsrs, b.wsrs)

    @pytest.mark.slow
    def test_thousand_trials_k64(self):
        model = Model.initialize(ModelSpec.for_classifier(input_dim=256, n_classes=10, hidden=(32,)), 3)
        template = TriggerSample("classifier", np.random.default_rng(3).normal(size=256), label=0)
        result = ambiguity_monte_carlo(model, 64, 1000, 0, template)
        assert 0.45 <= result.mean_wsr <= 0.55
        assert result.wsrs.max() < 1.0


# ---------------------------------------------------------------------------
# Distinctiveness
# ---------------------------------------------------------------------------


@pytest.mark.slow
class TestDistinctiveness:
    def test_independent_models_do_not_verify(self):
        reports = []
        for seed in range(10):
            train_set, _ = split(blobs(2500, seed=seed), [2000, 500])
            spec = ModelSpec.for_classifier(input_dim=256, n_classes=10, hidden=(128, 64))
            model = train(spec, train_set, epochs=20, optimizer="adam", lr=1e-3, seed=seed)
            trigger = build_triggers("sample", 1, train_set, model, seed=seed)[0]
            wm = balanced_watermark(64, seed)
            reports.append(verify(model, trigger, generate_masks(64, 64), segment_input(256, 64), wm))
        assert sum(not r.decision for r in reports) >= 9
        assert all(0.30 <= r.wsr <= 0.70 for r in reports)
