"""Exact brute-force k-nearest-neighbour classification."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import DimensionMismatch, EmptyModel


@dataclass
class KnnModel:
    features: np.ndarray
    labels: np.ndarray
    k: int = 3


def knn_fit(features, labels, k: int = 3) -> KnnModel:
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if x.ndim != 2 or len(x) != len(y):
        raise DimensionMismatch(f"features {x.shape} and labels {y.shape} disagree")
    if len(x) == 0:
        raise EmptyModel("no training points")
    if not 1 <= k <= len(x):
        raise ValueError(f"k={k} must lie in [1, {len(x)}]")
    return KnnModel(x, y, k)


def _vote(neighbour_labels: np.ndarray) -> int:
    """Majority label; a tie goes to the tied class whose first member is nearest."""
    counts = np.bincount(neighbour_labels)
    tied = np.flatnonzero(counts == counts.max())
    if len(tied) == 1:
        return int(tied[0])
    for lab in neighbour_labels:
        if lab in tied:
            return int(lab)
    raise AssertionError("unreachable")


def knn_predict(model: KnnModel, query) -> int | np.ndarray:
    """Predict one query (1-D) or a batch (2-D) by Euclidean distance.

    Equal distances are ordered by training index (stable sort).
    """
    q = np.asarray(query, dtype=np.float64)
    if len(model.features) == 0:
        raise EmptyModel("model has no training points")
    single = q.ndim == 1
    q = np.atleast_2d(q)
    if q.shape[1] != model.features.shape[1]:
        raise DimensionMismatch(f"query width {q.shape[1]} != training width {model.features.shape[1]}")
    out = np.empty(len(q), dtype=np.int64)
    for i, row in enumerate(q):
        d = np.einsum("ij,ij->i", model.features - row, model.features - row)
        nearest = np.argsort(d, kind="stable")[: model.k]
        out[i] = _vote(model.labels[nearest])
    return int(out[0]) if single else out
