from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from orthodoc.cases import CaseRecord, Demographics, ImageFeatures
from orthodoc.fusion import (
    CLASS_LABELS,
    PROB_FLOOR,
    ConditionPrediction,
    Example,
    FusionError,
    FusionWeights,
    TrainConfig,
    TrainingDiverged,
    accuracy,
    attend,
    classify,
    cross_modal_attention,
    embed_text,
    load_weights,
    loss,
    loss_and_grads,
    make_examples,
    numerical_gradient_check,
    predict,
    save_weights,
    softmax,
    train_head,
    weights_to_dict,
)

from oracles import softmax_reference


def image(arr) -> ImageFeatures:
    return ImageFeatures(np.asarray(arr, dtype=float), "img")


def case(cid, text, patches, label):
    return CaseRecord(cid, Demographics(40, "female", "teacher"), "", text, image(patches), label)


class TestEmbedding:
    def test_deterministic(self):
        a, b = embed_text("wrist fracture", 16, 3), embed_text("wrist fracture", 16, 3)
        assert np.array_equal(a.tokens, b.tokens)

    def test_repeated_token_rows(self):
        e = embed_text("fracture fracture", 16)
        assert np.array_equal(e.tokens[0], e.tokens[1])

    def test_unit_norm(self):
        e = embed_text("the distal radius fracture in a 40-year-old", 32)
        assert np.allclose(np.linalg.norm(e.tokens, axis=1), 1.0, atol=1e-9)

    def test_seed_changes_vectors(self):
        assert not np.array_equal(embed_text("cast", 8, 0).tokens, embed_text("cast", 8, 1).tokens)

    def test_no_tokens(self):
        with pytest.raises(FusionError):
            embed_text("  ...  ")


class TestSoftmax:
    def test_uniform(self):
        assert np.allclose(softmax([0, 0, 0]), [1 / 3] * 3)

    def test_closed_form_two_entries(self):
        x, c = 0.7, math.log(3)
        assert np.allclose(softmax([x, x + c]), [0.25, 0.75], atol=1e-15)

    @given(st.lists(st.floats(-50, 50), min_size=1, max_size=10), st.floats(-100, 100))
    def test_shift_invariance(self, xs, c):
        assert np.allclose(softmax(xs), softmax(np.asarray(xs) + c), atol=1e-12, rtol=0)

    @given(st.lists(st.floats(-30, 30), min_size=1, max_size=10))
    def test_matches_reference(self, xs):
        assert np.allclose(softmax(xs), softmax_reference(xs), atol=1e-12)

    def test_rejects_nan(self):
        with pytest.raises(FusionError):
            softmax([0.0, float("nan")])


def scalar_weights(wq, wk, wv):
    one = lambda v: np.array([[v]], dtype=float)  # noqa: E731
    return FusionWeights(one(wq), one(wk), one(wv), np.array([[1.0, -1.0]]), np.zeros(2), ("a", "b"))


class TestAttention:
    def test_identical_patches_uniform(self):
        w = FusionWeights.init(8, seed=2)
        patch = np.random.default_rng(0).standard_normal(8)
        fused, attn = attend(embed_text("wrist pain after a fall", 8), image(np.tile(patch, (5, 1))), w)
        assert np.allclose(attn, 1 / 5, atol=1e-12)
        assert np.allclose(fused, patch @ w.w_value, atol=1e-12)

    def test_scalar_case(self):
        # T=1, P=2, d=1: q = 1*2, keys 0.5 and 1, scores [1, 2], values [3, 6]
        text = embed_text("x", 1)
        sign = text.tokens[0, 0]  # a 1-d unit vector is +1 or -1
        w = scalar_weights(2.0, 0.5, 3.0)
        fused, attn = attend(text, image([[1.0], [2.0]]), w)
        s = [sign * 2 * 0.5, sign * 2 * 1.0]
        a0 = math.exp(s[0]) / (math.exp(s[0]) + math.exp(s[1]))
        assert attn[0] == pytest.approx([a0, 1 - a0], abs=1e-15)
        assert fused[0] == pytest.approx(3 * a0 + 6 * (1 - a0), abs=1e-12)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 10_000), st.integers(1, 12), st.integers(1, 6))
    def test_permutation_invariance_and_rows(self, seed, n_patches, n_words):
        rng = np.random.default_rng(seed)
        w = FusionWeights.init(8, seed=seed)
        text = embed_text(" ".join(f"w{i}" for i in rng.integers(0, 50, n_words)), 8)
        patches = rng.standard_normal((n_patches, 8))
        fused, attn = attend(text, image(patches), w)
        assert np.allclose(attn.sum(axis=1), 1.0, atol=1e-9) and (attn >= 0).all()
        perm = rng.permutation(n_patches)
        assert np.allclose(cross_modal_attention(text, image(patches[perm]), w), fused, atol=1e-12)

    def test_dimension_mismatch(self):
        with pytest.raises(FusionError, match="dimension"):
            attend(embed_text("x", 4), image(np.ones((2, 5))), FusionWeights.init(4))


class TestClassify:
    def test_zero_weights_uniform(self):
        labels = ("a", "b", "c", "d")
        w = FusionWeights.init(4, labels).replace(w_out=np.zeros((4, 4)), b_out=np.zeros(4))
        pred = classify(np.ones(4), w)
        assert np.allclose(pred.probabilities, 0.25)
        assert pred.predicted == "a"

    def test_dominant_bias(self):
        w = FusionWeights.init(4, ("a", "b", "c")).replace(w_out=np.zeros((4, 3)), b_out=np.array([0.0, 10.0, 0.0]))
        pred = classify(np.ones(4), w)
        assert pred.index == 1 and pred.probability > 0.9999

    @settings(max_examples=100)
    @given(st.integers(0, 10_000), st.floats(0.01, 100))
    def test_sums_to_one_and_scale_keeps_argmax(self, seed, c):
        w = FusionWeights.init(8, seed=seed)
        w = w.replace(w_out=w.w_out * 5, b_out=np.zeros(len(CLASS_LABELS)))
        fused = np.random.default_rng(seed).standard_normal(8)
        pred = classify(fused, w)
        assert pred.probabilities.sum() == pytest.approx(1.0, abs=1e-9)
        assert classify(fused * c, w).index == pred.index


class TestLoss:
    def _pred(self, probs):
        return ConditionPrediction(np.asarray(probs, dtype=float), ("a", "b", "c", "d")[: len(probs)])

    def test_certain(self):
        assert loss(self._pred([1.0, 0.0]), 0) == 0.0

    def test_uniform_four(self):
        assert loss(self._pred([0.25] * 4), "c") == pytest.approx(-math.log(0.25))
        assert -math.log(0.25) == pytest.approx(1.3863, abs=1e-4)

    def test_clamped(self):
        assert loss(self._pred([1.0, 0.0]), 1) == pytest.approx(-math.log(PROB_FLOOR))
        assert -math.log(PROB_FLOOR) == pytest.approx(27.631, abs=1e-3)

    def test_unknown_label(self):
        with pytest.raises(FusionError):
            loss(self._pred([0.5, 0.5]), "zzz")


def toy_cases():
    rng = np.random.default_rng(7)
    base = rng.standard_normal((2, 8))
    return [
        case("t0", "wrist fracture after a fall", np.tile(base[0], (3, 1)), "fracture"),
        case("t1", "swollen knee with morning stiffness", np.tile(base[1], (3, 1)), "arthritis"),
    ]


class TestTraining:
    def test_lr_zero(self):
        w, trace = train_head(toy_cases(), TrainConfig(lr=0.0, epochs=5, d=8))
        w0 = FusionWeights.init(8, seed=0)
        assert all(np.array_equal(a, b) for a, b in zip(w.params().values(), w0.params().values()))
        assert len(trace) == 6 and len(set(trace)) == 1

    def test_toy_separable(self):
        w, trace = train_head(toy_cases(), TrainConfig(lr=0.1, epochs=200, d=8))
        assert trace[-1] < trace[0]
        assert accuracy(w, make_examples(toy_cases(), w)) == 1.0

    def test_deterministic_bytes(self, tmp_path):
        for name in ("a", "b"):
            w, _ = train_head(toy_cases(), TrainConfig(lr=0.1, epochs=20, d=8, seed=4))
            save_weights(w, tmp_path / f"{name}.json")
        assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()

    def test_divergence_detected(self):
        with pytest.raises(TrainingDiverged):
            train_head(toy_cases(), TrainConfig(lr=1e300, epochs=3, d=8))

    def test_weights_round_trip(self, tmp_path):
        w = FusionWeights.init(8, seed=3)
        save_weights(w, tmp_path / "w.json")
        assert weights_to_dict(load_weights(tmp_path / "w.json")) == weights_to_dict(w)

    def test_missing_weights_file(self, tmp_path):
        with pytest.raises(FusionError, match="not found"):
            load_weights(tmp_path / "nope.json")


class TestGradients:
    def _batch(self, seed, d=6, n=4):
        rng = np.random.default_rng(seed)
        w = FusionWeights.init(d, seed=seed)
        batch = [
            Example(embed_text(" ".join(f"t{j}" for j in rng.integers(0, 30, 4)), d),
                    image(rng.standard_normal((5, d))), int(rng.integers(0, len(CLASS_LABELS))))
            for _ in range(n)
        ]
        return w, batch

    def test_analytic_matches_numeric(self):
        w, batch = self._batch(1)
        assert numerical_gradient_check(w, batch, 1e-5) < 1e-4

    def test_fault_injection(self):
        w, batch = self._batch(2)

        def doubled(w_, b_):
            g = loss_and_grads(w_, b_)[1]
            g["w_key"] = g["w_key"] * 2
            return g

        assert numerical_gradient_check(w, batch, 1e-5, gradient=doubled) > 0.3

    def test_bias_gradient_closed_form(self):
        d, labels = 4, ("a", "b", "c")
        zero = np.zeros((d, d))
        w = FusionWeights(zero, zero, zero, np.zeros((d, 3)), np.zeros(3), labels)
        patches = np.ones((2, d))
        batch = [Example(embed_text("x", d), image(patches), 0), Example(embed_text("y", d), image(patches), 2)]
        value, grads = loss_and_grads(w, batch)
        assert value == pytest.approx(math.log(3))
        expected = np.mean([np.array([1 / 3 - 1, 1 / 3, 1 / 3]), np.array([1 / 3, 1 / 3, 1 / 3 - 1])], axis=0)
        assert np.allclose(grads["b_out"], expected, atol=1e-15)
        for name in ("w_query", "w_key", "w_value", "w_out"):
            assert np.allclose(grads[name], 0.0)

    def test_eps_range(self):
        w, batch = self._batch(3)
        with pytest.raises(FusionError):
            numerical_gradient_check(w, batch, eps=0.1)


class TestPredict:
    def test_bundled_cases(self, workspace):
        pred = predict(workspace.test[0], workspace.weights)
        assert pred.predicted in CLASS_LABELS
        assert pred.probabilities.sum() == pytest.approx(1.0)
