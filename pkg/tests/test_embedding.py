"""Tests for eaaw.embedding — watermark losses, the joint objective and the embedding loop."""

from __future__ import annotations

import math
from functools import cache

import numpy as np
import pytest

from eaaw.datasets import blobs, build_triggers, split, token_corpus
from eaaw.embedding import (
    HISTORY_FIELDS,
    LOG_ODDS_MARGIN,
    PROBABILITY_MARGIN,
    EmbedConfig,
    JointObjective,
    ce_watermark_loss,
    embed_watermark,
    hinge_loss,
    joint_gradients,
    joint_loss,
    mse_watermark_loss,
    watermark_loss,
)
from eaaw.errors import ConfigError, DimensionError, DivergenceError, InvariantError
from eaaw.extraction import extract_watermark, metric_vector
from eaaw.models import Dataset, Model, ModelSpec, accuracy, predict_batch, train
from eaaw.numcore import Graph, backward
from eaaw.verification import harmless_degree, verify
from eaaw.watermark import TriggerSample, Watermark, random_watermark


# ---------------------------------------------------------------------------
# Helpers
# ---------------------------------------------------------------------------


def _tiny_setup():
    """4-part trigger on a 16-input, 2-layer classifier."""
    rng = np.random.default_rng(0)
    model = Model.initialize(ModelSpec.for_classifier(input_dim=16, n_classes=3, hidden=(6,)), 0)
    batch = Dataset(rng.normal(size=(5, 16)), np.array([0, 1, 2, 0, 1]))
    trigger = TriggerSample("classifier", rng.normal(size=16), label=2)
    return model, batch, trigger, Watermark([1, -1, -1, 1])


@cache
def _toy_task():
    """Trained 8×8 blob classifier with train/test splits; shared across tests, never mutated."""
    data = blobs(900, n_classes=4, side=8, sigma=0.3, seed=0)
    train_set, test_set = split(data, [600, 300])
    spec = ModelSpec.for_classifier(input_dim=64, n_classes=4, hidden=(32,))
    model = train(spec, train_set, epochs=15, optimizer="adam", lr=0.01, seed=0, batch_size=32)
    trigger = build_triggers("sample", 1, train_set, model, seed=0)[0]
    return model, train_set, test_set, trigger


def _fast_config(**overrides) -> EmbedConfig:
    settings = {"epochs": 20, "lr": 0.01, "optimizer": "adam", "batch_size": 64}
    settings.update(overrides)
    return EmbedConfig(**settings)


def _finite_difference(model: Model, objective_value, h: float = 1e-6) -> np.ndarray:
    numeric = []
    for name in model.store.names():
        flat = model.store.params[name].reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            up = objective_value()
            flat[i] = old - h
            down = objective_value()
            flat[i] = old
            numeric.append((up - down) / (2 * h))
    return np.array(numeric)


# ---------------------------------------------------------------------------
# Watermark losses
# ---------------------------------------------------------------------------


class TestHingeLoss:
    def test_example(self):
        assert hinge_loss([0.5, -0.5], Watermark([1, 1]), 0.01) == pytest.approx(0.51)

    def test_satisfied_margin(self):
        assert hinge_loss([0.3, -0.2], Watermark([1, -1]), 0.01) == 0.0

    def test_zero_explanation(self):
        assert hinge_loss(np.zeros(6), Watermark([1, -1] * 3), 0.01) == pytest.approx(0.06)

    def test_length_mismatch(self):
        with pytest.raises(DimensionError):
            hinge_loss([0.1, 0.2, 0.3], Watermark([1, -1]))


class TestCrossEntropyLoss:
    def test_zero(self):
        assert ce_watermark_loss([0.0], Watermark([1])) == pytest.approx(math.log(2.0))
        assert ce_watermark_loss([0.0], Watermark([-1])) == pytest.approx(math.log(2.0))

    def test_confident_right(self):
        assert ce_watermark_loss([10.0], Watermark([1])) == pytest.approx(4.5399e-5, rel=1e-3)

    def test_confident_wrong(self):
        assert ce_watermark_loss([-10.0], Watermark([1])) == pytest.approx(10.0000454, rel=1e-8)


class TestSquaredErrorLoss:
    def test_zero(self):
        assert mse_watermark_loss([0.0], Watermark([1])) == pytest.approx(0.25)

    def test_saturated(self):
        assert mse_watermark_loss([50.0, -50.0], Watermark([1, -1])) == pytest.approx(0.0, abs=1e-12)

    def test_matches_direct_formula(self):
        rng = np.random.default_rng(1)
        e, bits = rng.normal(size=10), rng.choice([-1, 1], size=10)
        expected = np.sum(((bits + 1) / 2 - 1 / (1 + np.exp(-e))) ** 2)
        assert mse_watermark_loss(e, Watermark(bits)) == pytest.approx(expected)


class TestLossGradients:
    @pytest.mark.parametrize("kind", ["hinge", "ce", "mse"])
    def test_matches_finite_differences(self, kind):
        rng = np.random.default_rng(2)
        e = rng.normal(size=8)
        wm = Watermark(rng.choice([-1, 1], size=8))
        _, grad = watermark_loss(kind, e, wm, 0.01)
        h = 1e-6
        numeric = np.array([
            (watermark_loss(kind, e + h * d, wm, 0.01)[0] - watermark_loss(kind, e - h * d, wm, 0.01)[0]) / (2 * h)
            for d in np.eye(8)
        ])
        np.testing.assert_allclose(grad, numeric, atol=1e-6)

    def test_unknown_kind(self):
        with pytest.raises(ConfigError):
            watermark_loss("ssim", [0.0], Watermark([1]))


# ---------------------------------------------------------------------------
# EmbedConfig
# ---------------------------------------------------------------------------


class TestEmbedConfig:
    def test_defaults(self):
        cfg = EmbedConfig()
        assert (cfg.r1, cfg.epsilon, cfg.loss, cfg.epochs) == (1.0, None, "hinge", 30)
        assert (cfg.optimizer, cfg.lr, cfg.mode) == ("adam", 1e-3, "relative")
        assert cfg.mask_count(64) == 64

    def test_margin_follows_the_metric(self):
        assert EmbedConfig().margin(is_lm=False) == LOG_ODDS_MARGIN
        assert EmbedConfig().margin(is_lm=True) == PROBABILITY_MARGIN
        assert EmbedConfig(mode="logits").margin(is_lm=False) == PROBABILITY_MARGIN
        assert EmbedConfig(epsilon=0.5).margin(is_lm=True) == 0.5

    def test_label_only_uses_random_masks(self):
        cfg = EmbedConfig.label_only()
        assert cfg.mask_scheme == "random"
        assert cfg.mode == "logits"
        assert cfg.mask_count(8) == 128
        assert cfg.masks_for(8).c == 128

    @pytest.mark.parametrize("field,value", [
        ("r1", -1.0), ("epsilon", 0.0), ("epochs", 0), ("loss", "ssim"), ("optimizer", "lbfgs"),
        ("mask_scheme", "grid"), ("target_policy", "some"), ("batch_size", 0), ("mode", "label_only"),
    ])
    def test_rejects(self, field, value):
        with pytest.raises(ConfigError):
            EmbedConfig(**{field: value})


# ---------------------------------------------------------------------------
# Joint objective
# ---------------------------------------------------------------------------


class TestJointObjective:
    def test_loss_parts(self):
        model, batch, trigger, wm = _tiny_setup()
        cfg = EmbedConfig(r1=2.0)
        loss = joint_loss(model, batch, trigger, wm, cfg)
        assert loss.total == pytest.approx(loss.l1 + 2.0 * loss.l2)
        assert loss.l2 >= 0.0

    @pytest.mark.parametrize("mode", ["relative", "logits"])
    def test_gradient_matches_finite_differences(self, mode):
        model, batch, trigger, wm = _tiny_setup()
        cfg = EmbedConfig(loss="ce", r1=1.0, mode=mode)
        analytic = joint_gradients(model, batch, trigger, wm, cfg)
        flat = np.concatenate([analytic[name].ravel() for name in model.store.names()])
        numeric = _finite_difference(model, lambda: joint_loss(model, batch, trigger, wm, cfg).total)
        error = np.linalg.norm(flat - numeric) / (np.linalg.norm(flat) + np.linalg.norm(numeric))
        assert error <= 1e-5

    @pytest.mark.parametrize("mode", ["relative", "logits"])
    def test_graph_metric_matches_black_box_metric(self, mode):
        model, _, trigger, wm = _tiny_setup()
        objective = JointObjective(model.spec, [trigger], wm, EmbedConfig(mode=mode))
        on_graph = objective.metric_node(model, Graph(), objective.plans[0]).value
        queried = metric_vector(model, trigger, objective.masks, objective.partition, mode)
        np.testing.assert_allclose(on_graph, queried.values, atol=1e-10)

    @pytest.mark.parametrize("mode", ["relative", "logits"])
    def test_language_model_metric_matches_black_box_metric(self, mode):
        model = Model.initialize(ModelSpec.for_causal_lm(vocab_size=9, context_len=4, embed_dim=3, hidden=(5,)), 0)
        trigger = TriggerSample("causal_lm", np.array([1, 2, 3, 4, 5, 6, 7, 8]))
        objective = JointObjective(model.spec, [trigger], Watermark([1, -1, 1, -1]), EmbedConfig(mode=mode))
        on_graph = objective.metric_node(model, Graph(), objective.plans[0]).value
        queried = metric_vector(model, trigger, objective.masks, objective.partition, mode)
        np.testing.assert_allclose(on_graph, queried.values, atol=1e-10)

    def test_margin_is_resolved_once(self):
        model, _, trigger, wm = _tiny_setup()
        assert JointObjective(model.spec, [trigger], wm, EmbedConfig()).epsilon == LOG_ODDS_MARGIN
        assert JointObjective(model.spec, [trigger], wm, EmbedConfig(mode="logits")).epsilon == PROBABILITY_MARGIN

    def test_gradients_leave_model_untouched(self):
        model, batch, trigger, wm = _tiny_setup()
        before = {name: p.copy() for name, p in model.store.params.items()}
        joint_gradients(model, batch, trigger, wm)
        for name, value in before.items():
            np.testing.assert_array_equal(model.store.params[name], value)
            assert not model.store.grads[name].any()

    def test_unlearning_flips_only_the_watermark_term(self):
        model, batch, trigger, wm = _tiny_setup()
        grads = {}
        for direction, r1 in ((1.0, 1.0), (-1.0, 1.0), (1.0, 0.0)):
            objective = JointObjective(model.spec, [trigger], wm, EmbedConfig(loss="ce", r1=r1), direction=direction)
            _, graph, root = objective.build(model, batch.inputs, batch.labels)
            store = model.store.copy()
            store.zero_grad()
            backward(graph, store, root)
            grads[(direction, r1)] = store.grads["dense0.weight"].copy()
        np.testing.assert_allclose(grads[(1.0, 1.0)] + grads[(-1.0, 1.0)], 2 * grads[(1.0, 0.0)], atol=1e-12)

    def test_mask_length_mismatch(self):
        model, _, trigger, wm = _tiny_setup()
        with pytest.raises(DimensionError):
            JointObjective(model.spec, [trigger], wm, EmbedConfig(), masks=EmbedConfig().masks_for(8))

    def test_backend_mismatch(self):
        model, _, _, wm = _tiny_setup()
        lm_trigger = TriggerSample("causal_lm", np.arange(1, 17))
        with pytest.raises(ConfigError):
            JointObjective(model.spec, [lm_trigger], wm, EmbedConfig())

    def test_language_model_objective(self):
        spec = ModelSpec.for_causal_lm(vocab_size=9, context_len=4, embed_dim=3, hidden=(5,))
        model = Model.initialize(spec, 0)
        trigger = TriggerSample("causal_lm", np.array([1, 2, 3, 4, 5, 6, 7, 8]))
        batch = Dataset(np.array([[2, 3, 4, 5, 6, 7]]))
        loss = joint_loss(model, batch, trigger, Watermark([1, -1, 1, -1]), EmbedConfig(loss="ce"))
        assert np.isfinite(loss.total)
        assert loss.l1 > 0

    def test_sparse_language_model_targets(self):
        spec = ModelSpec.for_causal_lm(vocab_size=9, context_len=4, embed_dim=3, hidden=(5,))
        model = Model.initialize(spec, 0)
        trigger = TriggerSample("causal_lm", np.arange(1, 17) % 8 + 1, target_positions=(5,))
        wm = Watermark([1, -1] * 4)
        objective = JointObjective(spec, [trigger], wm, EmbedConfig())
        v = objective.metric_node(model, Graph(), objective.plans[0]).value
        assert v.shape == (8,)
        # masks that hide only tokens after position 5 leave its prediction unchanged
        np.testing.assert_allclose(v[3:], 0.0, atol=1e-12)
        assert np.isfinite(joint_loss(model, Dataset(trigger.data[None, :]), trigger, wm).total)


# ---------------------------------------------------------------------------
# Embedding loop
# ---------------------------------------------------------------------------


class TestEmbedWatermark:
    def test_rejects_weak_payload(self):
        model, train_set, _, trigger = _toy_task()
        with pytest.raises(InvariantError):
            embed_watermark(model, train_set, trigger, Watermark([1, -1, 1, -1]), _fast_config(epochs=1))

    def test_history_and_input_untouched(self):
        model, train_set, test_set, trigger = _toy_task()
        before = model.store.params["dense0.weight"].copy()
        result = embed_watermark(model, train_set, trigger, random_watermark(16, 1), _fast_config(epochs=2), eval_data=test_set)
        np.testing.assert_array_equal(model.store.params["dense0.weight"], before)
        assert [r.epoch for r in result.history] == [1, 2]
        assert set(result.history[0].as_row()) == set(HISTORY_FIELDS)
        assert result.masks.c == 16

    def test_embeds_payload(self):
        model, train_set, test_set, trigger = _toy_task()
        wm = random_watermark(16, 1)
        cfg = _fast_config()
        initial_l2 = JointObjective(model.spec, [trigger], wm, cfg).watermark_term(model)
        result = embed_watermark(model, train_set, trigger, wm, cfg, eval_data=test_set)
        assert result.history[-1].l2 < initial_l2
        assert result.final_wsr == 1.0
        assert verify(result.model, trigger, result.masks, result.partition, wm).decision
        assert result.history[-1].benign_acc >= result.baseline_accuracy - 0.02

    def test_deterministic(self):
        model, train_set, _, trigger = _toy_task()
        wm = random_watermark(16, 2)
        a = embed_watermark(model, train_set, trigger, wm, _fast_config(epochs=2))
        b = embed_watermark(model, train_set, trigger, wm, _fast_config(epochs=2))
        for name in a.model.store.names():
            np.testing.assert_array_equal(a.model.store.params[name], b.model.store.params[name])

    def test_zero_r1_embeds_nothing(self):
        model, train_set, _, trigger = _toy_task()
        wm = random_watermark(16, 3)
        result = embed_watermark(model, train_set, trigger, wm, _fast_config(r1=0.0, epochs=3))
        after = verify(result.model, trigger, result.masks, result.partition, wm)
        assert all(record.l2 > 0 for record in result.history)
        assert not after.decision

    def test_classifier_history_has_no_perplexity(self):
        model, train_set, _, trigger = _toy_task()
        result = embed_watermark(model, train_set, trigger, random_watermark(16, 1), _fast_config(epochs=1))
        assert result.baseline_ppl is None
        assert result.history[0].benign_ppl is None
        assert result.history[0].as_row()["benign_ppl"] == ""

    def test_divergence_names_the_term(self):
        model, train_set, _, trigger = _toy_task()
        cfg = _fast_config(optimizer="sgd", lr=1e300, epochs=2, batch_size=16)
        with pytest.raises(DivergenceError) as exc:
            embed_watermark(model, train_set, trigger, random_watermark(16, 1), cfg)
        assert exc.value.term in ("L1", "L2")
        assert exc.value.step >= 1

    def test_harmless_degree_of_watermarked_model(self):
        model, train_set, test_set, trigger = _toy_task()
        result = embed_watermark(model, train_set, trigger, random_watermark(16, 5), _fast_config(), eval_data=test_set)
        degree = harmless_degree(result.model, test_set, [trigger])
        assert degree >= harmless_degree(model, test_set, []) - 0.02
        assert predict_batch(result.model, [trigger.data])[0].label == trigger.label

    @pytest.mark.slow
    def test_default_settings_reach_full_wsr(self):
        data = blobs(2500, n_classes=10, side=16, sigma=0.3, seed=0)
        train_set, test_set = split(data, [2000, 500])
        spec = ModelSpec.for_classifier(input_dim=256, n_classes=10, hidden=(128, 64))
        model = train(spec, train_set, epochs=20, optimizer="adam", lr=1e-3, seed=0)
        trigger = build_triggers("sample", 1, train_set, model, seed=0)[0]
        wm = random_watermark(64, 0)
        result = embed_watermark(model, train_set, trigger, wm, EmbedConfig(), eval_data=test_set)
        report = verify(result.model, trigger, result.masks, result.partition, wm)
        assert report.wsr == 1.0
        assert report.decision
        assert accuracy(result.model, test_set) >= accuracy(model, test_set) - 0.02
        assert predict_batch(result.model, [trigger.data])[0].label == trigger.label

    @pytest.mark.slow
    def test_language_model_embedding(self):
        corpus = token_corpus(240, length=32, vocab_size=16, seed=0)
        train_set, test_set = split(corpus, [200, 40])
        spec = ModelSpec.for_causal_lm(vocab_size=16, context_len=4, embed_dim=8, hidden=(32,))
        model = train(spec, train_set, epochs=10, optimizer="adam", lr=0.01, seed=0)
        trigger = build_triggers("sample", 1, train_set, model, seed=0)[0]
        wm = random_watermark(16, 0)
        result = embed_watermark(model, train_set, trigger, wm, _fast_config(epochs=30), eval_data=test_set)
        report = verify(result.model, trigger, result.masks, result.partition, wm)
        assert report.wsr >= 0.9
        assert report.decision
        assert result.baseline_ppl is not None and np.isfinite(result.baseline_ppl)
        assert all(record.benign_ppl is not None and record.benign_ppl > 1.0 for record in result.history)

    @pytest.mark.slow
    @pytest.mark.parametrize("n_masks,expected", [(16 * 16, ">="), (16, "<=")])
    def test_label_only_needs_many_masks(self, n_masks, expected):
        model, train_set, test_set, trigger = _toy_task()
        wm = random_watermark(16, 4)
        cfg = EmbedConfig.label_only(epochs=40, lr=0.01, optimizer="adam", n_masks=n_masks)
        result = embed_watermark(model, train_set, trigger, wm, cfg, eval_data=test_set)
        extracted = extract_watermark(result.model, trigger, result.masks, result.partition, "label_only")
        score = float(np.mean(extracted.bits == wm.bits))
        if expected == ">=":
            assert score >= 0.90
        else:
            assert score <= 0.75
