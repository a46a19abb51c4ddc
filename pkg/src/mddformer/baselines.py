"""K-nearest neighbours and logistic regression on pooled feature vectors.

A pooled vector is the time-mean of the audio sequence concatenated with the
time-mean of the visual sequence. Both baselines standardize features with
statistics from the training split only.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import BaselineError
from .ingest import Dataset, FoldAssignment
from .metrics import PredictionRecord


def pooled_vectors(dataset: Dataset) -> tuple[np.ndarray, np.ndarray]:
    X = np.concatenate([dataset.audio_array.mean(axis=1), dataset.visual_array.mean(axis=1)], axis=1)
    return X, np.asarray(dataset.labels)


@dataclass(frozen=True)
class Standardizer:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, X):
        X = np.asarray(X, dtype=np.float64)
        std = X.std(axis=0)
        std[std < 1e-12] = 1.0
        return cls(X.mean(axis=0), std)

    def transform(self, X):
        return (np.asarray(X, dtype=np.float64) - self.mean) / self.std


# ---------------------------------------------------------------------------
# KNN
# ---------------------------------------------------------------------------

def _knn_vote(dist, y, k):
    order = np.argsort(dist, kind="stable")[:k]  # stable: equal distances keep lower index first
    labels = y[order]
    votes = [int(np.sum(labels == c)) for c in (0, 1)]
    if votes[0] != votes[1]:
        return int(votes[1] > votes[0]), votes[1] / k
    sums = [float(dist[order][labels == c].sum()) for c in (0, 1)]
    return (1 if sums[1] < sums[0] else 0), votes[1] / k


def knn_predict(train_X, train_y, query, k=5) -> int:
    """Majority label among the ``k`` nearest training vectors (Euclidean).

    Ties: equal distances favour the lower training index; a split vote goes
    to the class with the smaller summed distance, then to label 0.
    """
    return knn_predict_proba(train_X, train_y, query, k)[0]


def knn_predict_proba(train_X, train_y, query, k=5) -> tuple[int, float]:
    """``(label, fraction of neighbours labelled 1)``."""
    X = np.asarray(train_X, dtype=np.float64)
    y = np.asarray(train_y)
    if X.shape[0] == 0:
        raise BaselineError("KNN: empty training set")
    if not 1 <= k <= X.shape[0]:
        raise BaselineError(f"KNN: k={k} must lie in [1, {X.shape[0]}]")
    q = np.asarray(query, dtype=np.float64)
    if q.shape != X.shape[1:]:
        raise BaselineError(f"KNN: query shape {q.shape} does not match training vectors {X.shape[1:]}")
    dist = np.sqrt(((X - q) ** 2).sum(axis=1))
    return _knn_vote(dist, y, k)


# ---------------------------------------------------------------------------
# Logistic regression
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LogRegWeights:
    w: np.ndarray
    b: float


def sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def logistic_objective(weights: LogRegWeights, X, y, l2):
    z = X @ weights.w + weights.b
    # log(1 + e^z) - y z, computed stably
    data = np.mean(np.logaddexp(0.0, z) - y * z)
    return float(data + 0.5 * l2 * weights.w @ weights.w)


def logreg_fit(X, y, lr=0.1, epochs=500, l2=1e-4, seed=0, return_history=False):
    """Full-batch gradient descent on L2-regularised logistic loss.

    The penalty ``l2/2 * ||w||^2`` (bias unpenalised) is applied as an
    exact proximal step, which keeps the iteration stable for any ``l2``.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] == 0 or y.shape != (X.shape[0],):
        raise BaselineError(f"logreg_fit: bad shapes X {X.shape}, y {y.shape}")
    if np.unique(y).size < 2:
        raise BaselineError("logreg_fit: training set contains a single class")
    rng = np.random.default_rng(seed)
    w = 0.01 * rng.standard_normal(X.shape[1])
    b = 0.0
    history = []
    for _ in range(epochs):
        if return_history:
            history.append(logistic_objective(LogRegWeights(w, b), X, y, l2))
        r = sigmoid(X @ w + b) - y
        w = (w - lr * (X.T @ r) / len(y)) / (1.0 + lr * l2)
        b = b - lr * float(r.mean())
    weights = LogRegWeights(w, b)
    if return_history:
        history.append(logistic_objective(weights, X, y, l2))
        return weights, history
    return weights


def logreg_predict(weights: LogRegWeights, query) -> np.ndarray | float:
    """Probability of class 1 for one vector or a batch of row vectors."""
    q = np.asarray(query, dtype=np.float64)
    if q.shape[-1] != weights.w.shape[0]:
        raise BaselineError(f"logreg_predict: query width {q.shape[-1]} != {weights.w.shape[0]}")
    p = sigmoid(q @ weights.w + weights.b)
    return float(p) if p.ndim == 0 else p


# ---------------------------------------------------------------------------
# Cross-validated evaluation
# ---------------------------------------------------------------------------

def evaluate_baseline(dataset: Dataset, folds: FoldAssignment, model: str, fold_ids=None,
                      k=5, lr=0.1, epochs=500, l2=1e-4, seed=0) -> dict[int, list[PredictionRecord]]:
    """Held-out predictions of ``"knn"`` or ``"logreg"`` for each requested fold."""
    if model not in ("knn", "logreg"):
        raise BaselineError(f"unknown baseline {model!r}")
    X, y = pooled_vectors(dataset)
    out = {}
    for fold in (range(folds.k) if fold_ids is None else fold_ids):
        tr = folds.train_indices(dataset, fold)
        te = folds.test_indices(dataset, fold)
        scaler = Standardizer.fit(X[tr])
        Xtr, Xte = scaler.transform(X[tr]), scaler.transform(X[te])
        recs = []
        if model == "knn":
            for i, q in zip(te, Xte):
                label, p1 = knn_predict_proba(Xtr, y[tr], q, k)
                recs.append(PredictionRecord(dataset.sample_ids[i], p1, label, int(y[i])))
        else:
            weights = logreg_fit(Xtr, y[tr], lr, epochs, l2, seed)
            probs = np.atleast_1d(logreg_predict(weights, Xte))
            for i, p1 in zip(te, probs):
                recs.append(PredictionRecord(dataset.sample_ids[i], float(p1), int(p1 > 0.5), int(y[i])))
        out[fold] = recs
    return out
