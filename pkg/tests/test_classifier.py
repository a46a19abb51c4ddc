import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import assert_grad_close, numeric_grad
from mddformer.classifier import (PROB_CLIP, Prediction, bce_loss, classify, classify_backward, init_head,
                                  pool_sequence, pool_sequence_backward)
from mddformer.errors import ShapeError
from mddformer.nn import softmax


class TestPooling:
    def test_mean_over_time(self):
        F = np.array([[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]])
        np.testing.assert_array_equal(pool_sequence(F), [3.0, 4.0])

    def test_single_frame_identity(self, rng):
        F = rng.standard_normal((1, 6))
        np.testing.assert_array_equal(pool_sequence(F), F[0])

    def test_empty_sequence(self):
        with pytest.raises(ShapeError):
            pool_sequence(np.zeros((0, 4)))

    def test_backward_spreads_evenly(self):
        np.testing.assert_array_equal(pool_sequence_backward(np.array([[3.0, 6.0]]), 3),
                                      np.tile([[1.0, 2.0]], (1, 3, 1)))


class TestClassify:
    def test_zero_output_layer_is_even(self, rng):
        p = init_head(rng, 6, 4, np.float64)
        p["fc2.W"][:] = 0
        _, probs, _ = classify(rng.standard_normal((3, 6)), p)
        np.testing.assert_array_equal(probs, np.full((3, 2), 0.5))

    def test_probs_are_distribution(self, rng):
        p = init_head(rng, 6, 4, np.float64)
        _, probs, _ = classify(10 * rng.standard_normal((50, 6)), p)
        np.testing.assert_allclose(probs.sum(-1), 1.0, atol=1e-12)
        assert np.all(probs >= 0)

    def test_width_mismatch(self, rng):
        with pytest.raises(ShapeError):
            classify(np.zeros((2, 5)), init_head(rng, 6, 4))

    def test_gradients(self, rng):
        p = init_head(rng, 6, 4, np.float64)
        p["fc1.b"] = rng.standard_normal(4)
        x = rng.standard_normal((3, 6))
        G = rng.standard_normal((3, 2))
        f = lambda: float(np.sum(classify(x, p)[0] * G))
        dx, grads = classify_backward(G, classify(x, p)[2])
        for k in p:
            assert_grad_close(grads[k], numeric_grad(f, p[k]))
        assert_grad_close(dx, numeric_grad(f, x))

    def test_gradients_with_dropout_mask(self, rng):
        p = init_head(rng, 6, 4, np.float64)
        x = rng.standard_normal((3, 6))
        G = rng.standard_normal((3, 2))
        f = lambda: float(np.sum(classify(x, p, np.random.default_rng(7), 0.3)[0] * G))
        dx, grads = classify_backward(G, classify(x, p, np.random.default_rng(7), 0.3)[2])
        assert_grad_close(grads["fc1.W"], numeric_grad(f, p["fc1.W"]))
        assert_grad_close(dx, numeric_grad(f, x))

    def test_prediction_label(self):
        assert Prediction("a", (0.3, 0.7)).label == 1
        assert Prediction("a", (0.7, 0.3)).label == 0
        assert Prediction("a", (0.3, 0.7)).p_depressed == 0.7


class TestBCE:
    def test_even_probs_give_ln2(self):
        loss, _ = bce_loss(np.array([[0.5, 0.5], [0.5, 0.5]]), np.array([0, 1]))
        assert abs(loss - math.log(2)) < 1e-9

    def test_clipping_bounds_the_loss(self):
        loss, _ = bce_loss(np.array([[1.0, 0.0]]), np.array([1]))
        assert math.isfinite(loss)
        assert abs(loss + math.log(PROB_CLIP)) < 1e-9

    def test_perfect_prediction_near_zero(self):
        loss, _ = bce_loss(np.array([[0.0, 1.0]]), np.array([1]))
        assert loss < 1e-6

    def test_bad_shapes(self):
        with pytest.raises(ShapeError):
            bce_loss(np.zeros((2, 3)), np.array([0, 1]))
        with pytest.raises(ShapeError):
            bce_loss(np.full((2, 2), 0.5), np.array([0]))

    @settings(max_examples=50, deadline=None)
    @given(seed=st.integers(0, 10_000), b=st.integers(1, 8))
    def test_permutation_invariant(self, seed, b):
        r = np.random.default_rng(seed)
        probs = softmax(r.standard_normal((b, 2)))
        y = r.integers(0, 2, b)
        perm = r.permutation(b)
        assert abs(bce_loss(probs, y)[0] - bce_loss(probs[perm], y[perm])[0]) < 1e-12

    def test_dlogits_matches_finite_differences(self, rng):
        logits = rng.standard_normal((4, 2))
        y = np.array([0, 1, 1, 0])
        _, d = bce_loss(softmax(logits), y)
        num = numeric_grad(lambda: bce_loss(softmax(logits), y)[0], logits)
        assert_grad_close(d, num)
