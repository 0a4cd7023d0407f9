"""Ranking and classification metrics."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .errors import ShapeError, UndefinedAPError


def average_precision(scores, labels) -> float:
    """Non-interpolated AP: mean precision at the rank of each positive.

    Items are ranked by descending score; equal scores keep their original order.
    """
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1)
    if s.shape != y.shape:
        raise ShapeError(f"{s.size} scores for {y.size} labels")
    order = np.argsort(-s, kind="stable")
    hits = y[order] == 1
    n_pos = int(hits.sum())
    if n_pos == 0:
        raise UndefinedAPError()
    ranks = np.flatnonzero(hits) + 1
    return float(np.mean(np.arange(1, n_pos + 1) / ranks))


def per_label_ap(score_matrix, label_matrix, subset: Sequence[int] | None = None) -> np.ndarray:
    S = np.asarray(score_matrix, dtype=np.float64)
    Y = np.asarray(label_matrix)
    if S.shape != Y.shape or S.ndim != 2:
        raise ShapeError(f"score matrix {S.shape} and label matrix {Y.shape} must match")
    cols = range(S.shape[1]) if subset is None else list(subset)
    bad = [j for j in cols if not np.any(Y[:, j] == 1)]
    if bad:
        raise UndefinedAPError(bad)
    return np.array([average_precision(S[:, j], Y[:, j]) for j in cols])


def mean_ap(score_matrix, label_matrix, subset: Sequence[int] | None = None) -> float:
    aps = per_label_ap(score_matrix, label_matrix, subset)
    if aps.size == 0:
        raise ValueError("empty label subset")
    return float(aps.mean())


def multiclass_accuracy(score_matrix, true_classes) -> float:
    """Fraction of rows whose argmax (lowest index on ties) is the true class."""
    S = np.asarray(score_matrix, dtype=np.float64)
    t = np.asarray(true_classes).reshape(-1)
    if S.ndim != 2 or S.shape[0] != t.size:
        raise ShapeError(f"score matrix {S.shape} does not match {t.size} targets")
    return float(np.mean(S.argmax(axis=1) == t))
