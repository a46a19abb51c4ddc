import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mddformer.baselines import (LogRegWeights, Standardizer, evaluate_baseline, knn_predict, logreg_fit,
                                 logreg_predict, pooled_vectors)
from mddformer.errors import BaselineError
from mddformer.ingest import stratified_kfold
from oracles import brute_knn

TRAIN_X = np.array([[0.0, 0.0], [0.0, 1.0], [5.0, 5.0]])
TRAIN_Y = np.array([0, 0, 1])


class TestKNN:
    def test_nearest_point(self):
        assert knn_predict(TRAIN_X, TRAIN_Y, [0, 0.4], k=1) == 0

    def test_majority_of_three(self):
        assert knn_predict(TRAIN_X, TRAIN_Y, [0, 0.4], k=3) == 0

    def test_vote_tie_goes_to_closer_class(self):
        X = np.array([[0.0], [3.0]])
        assert knn_predict(X, np.array([0, 1]), [2.0], k=2) == 1
        assert knn_predict(X, np.array([0, 1]), [1.0], k=2) == 0

    def test_full_tie_goes_to_label_zero(self):
        X = np.array([[-1.0], [1.0]])
        assert knn_predict(X, np.array([1, 0]), [0.0], k=2) == 0

    def test_distance_tie_prefers_lower_index(self):
        X = np.array([[1.0], [-1.0]])
        assert knn_predict(X, np.array([1, 0]), [0.0], k=1) == 1

    @pytest.mark.parametrize("k", [0, 4])
    def test_bad_k(self, k):
        with pytest.raises(BaselineError):
            knn_predict(TRAIN_X, TRAIN_Y, [0, 0], k=k)

    def test_empty_train(self):
        with pytest.raises(BaselineError):
            knn_predict(np.zeros((0, 2)), np.zeros(0), [0, 0], k=1)

    @settings(max_examples=150, deadline=None)
    @given(n=st.integers(1, 50), d=st.integers(1, 4), seed=st.integers(0, 10_000), grid=st.booleans())
    def test_matches_brute_force(self, n, d, seed, grid):
        r = np.random.default_rng(seed)
        # integer grids produce many exact distance ties
        X = r.integers(-2, 3, (n, d)).astype(float) if grid else r.standard_normal((n, d))
        y = r.integers(0, 2, n)
        q = r.integers(-2, 3, d).astype(float) if grid else r.standard_normal(d)
        for k in range(1, n + 1):
            assert knn_predict(X, y, q, k) == brute_knn(X, y, q, k)


class TestLogReg:
    def test_separable_1d(self):
        X = np.array([[-1.0]] * 50 + [[1.0]] * 50)
        y = np.array([0] * 50 + [1] * 50)
        w = logreg_fit(X, y)
        assert np.all((logreg_predict(w, X) > 0.5) == y)

    def test_huge_l2_gives_prior(self, rng):
        X = rng.standard_normal((40, 3))
        y = np.array([1] * 30 + [0] * 10)
        w = logreg_fit(X, y, l2=1e6, epochs=2000, lr=0.5)
        assert np.abs(w.w).max() < 1e-4
        np.testing.assert_allclose(logreg_predict(w, X), 0.75, atol=1e-3)

    def test_single_class(self):
        with pytest.raises(BaselineError):
            logreg_fit(np.zeros((3, 2)), np.ones(3))

    def test_predict_examples(self):
        zero = LogRegWeights(np.zeros(2), 0.0)
        assert logreg_predict(zero, [1.0, -3.0]) == 0.5
        w = LogRegWeights(np.array([1.0]), 0.0)
        assert logreg_predict(w, [2.5]) + logreg_predict(w, [-2.5]) == pytest.approx(1.0, abs=1e-15)
        assert abs(logreg_predict(w, [30.0]) - 1.0) < 1e-9
        with pytest.raises(BaselineError):
            logreg_predict(w, [1.0, 2.0])

    def test_deterministic(self, rng):
        X = rng.standard_normal((20, 3))
        y = np.arange(20) % 2
        a, b = logreg_fit(X, y, seed=3), logreg_fit(X, y, seed=3)
        assert a.w.tobytes() == b.w.tobytes() and a.b == b.b

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 10_000), l2=st.sampled_from([0.0, 1e-4, 1e-1, 10.0]))
    def test_objective_non_increasing(self, seed, l2):
        r = np.random.default_rng(seed)
        X = r.standard_normal((30, 4))
        y = (X[:, 0] + r.standard_normal(30) > 0).astype(int)
        y[:2] = [0, 1]
        # step below 1/L with L = ||X||^2 / (4n) for the data term
        lr = 0.9 * 4 * len(y) / np.linalg.norm(X, 2) ** 2
        _, hist = logreg_fit(X, y, lr=lr, epochs=100, l2=l2, seed=seed, return_history=True)
        assert all(b <= a + 1e-12 for a, b in zip(hist, hist[1:]))


def test_standardizer_uses_given_split(rng):
    X = rng.standard_normal((10, 3)) * [1, 5, 0] + [0, 2, 7]
    s = Standardizer.fit(X)
    Z = s.transform(X)
    np.testing.assert_allclose(Z.mean(0), 0, atol=1e-12)
    assert np.isfinite(Z).all()


def test_evaluate_baseline_on_separable_synth(small_synth):
    folds = stratified_kfold(small_synth, 5, 0)
    X, y = pooled_vectors(small_synth)
    assert X.shape == (40, 11)
    for model in ("knn", "logreg"):
        out = evaluate_baseline(small_synth, folds, model)
        recs = [r for f in out.values() for r in f]
        assert sorted(r.sample_id for r in recs) == sorted(small_synth.sample_ids)
        assert np.mean([r.label_pred == r.label_true for r in recs]) >= 0.9


def test_unknown_baseline(small_synth):
    with pytest.raises(BaselineError):
        evaluate_baseline(small_synth, stratified_kfold(small_synth, 5, 0), "svm")
