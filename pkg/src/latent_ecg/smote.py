"""SMOTE oversampling of latent vectors up to the majority-class count."""

from __future__ import annotations

import logging
import warnings

import numpy as np
from scipy.spatial import cKDTree
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_X_y

logger = logging.getLogger(__name__)

__all__ = ["smote", "Smote"]


def smote(X: np.ndarray, y: np.ndarray, k: int = 5, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Grow every minority class to the majority count with synthetic points.

    A synthetic point is ``x + u * (x_nn - x)`` where ``x`` is a uniformly
    drawn member of the class, ``x_nn`` one of its ``k`` nearest same-class
    neighbours (Euclidean) and ``u ~ U(0, 1)``. The output is grouped by class
    in ascending label order; within a class the original rows come first, in
    their input order, followed by the synthetic ones.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y)
    if X.ndim != 2 or X.shape[0] != y.shape[0]:
        raise ValueError("X must be (n, d) with one label per row")
    if not np.all(np.isfinite(X)):
        raise ValueError("latent vectors must be finite")
    if k < 1:
        raise ValueError("k must be at least 1")
    classes, counts = np.unique(y, return_counts=True)
    target = counts.max()
    if np.all(counts == target):
        return X.copy(), y.copy()
    rng = np.random.default_rng(seed)
    blocks_X, blocks_y = [], []
    for cls, count in zip(classes, counts):
        members = X[y == cls]
        name = cls.item() if isinstance(cls, np.generic) else cls
        blocks_X.append(members)
        blocks_y.append(np.full(count, cls, dtype=y.dtype))
        need = target - count
        if need == 0:
            continue
        if count < 2:
            raise ValueError(f"class {name} has {count} sample; SMOTE needs at least 2")
        k_eff = k
        if k > count - 1:
            k_eff = count - 1
            warnings.warn(f"k={k} exceeds class {name} size minus one; using k={k_eff}", stacklevel=2)
        neighbours = _neighbours(members, k_eff)
        parents = rng.integers(0, count, size=need)
        picks = neighbours[parents, rng.integers(0, k_eff, size=need)]
        gaps = rng.random(need)[:, None]
        base = members[parents]
        blocks_X.append(base + gaps * (members[picks] - base))
        blocks_y.append(np.full(need, cls, dtype=y.dtype))
    return np.concatenate(blocks_X), np.concatenate(blocks_y)


def _neighbours(points: np.ndarray, k: int) -> np.ndarray:
    """Indices of the ``k`` nearest other points for every point."""
    n = points.shape[0]
    _, idx = cKDTree(points).query(points, k=min(k + 1, n))
    idx = np.atleast_2d(idx)
    out = np.empty((n, k), dtype=np.int64)
    for i in range(n):
        row = idx[i][idx[i] != i][:k]
        if row.size < k:  # self was not among the returned hits (duplicates)
            row = idx[i][:k]
        out[i] = row
    return out


class Smote(BaseEstimator):
    """``fit_resample`` wrapper around :func:`smote`."""

    def __init__(self, k_neighbors: int = 5, random_state: int = 0):
        self.k_neighbors = k_neighbors
        self.random_state = random_state

    def fit_resample(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64)
        return smote(X, y, k=self.k_neighbors, seed=self.random_state)
