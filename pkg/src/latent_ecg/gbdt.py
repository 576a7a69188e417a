"""Multiclass gradient-boosted decision trees with a softmax objective.

Each boosting round fits one regression tree per class to the gradient and
hessian of the multiclass log-loss. Trees are grown level by level with an
exact greedy split search over pre-sorted feature columns.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import asdict, dataclass

import numba
import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

logger = logging.getLogger(__name__)

__all__ = ["GbdtConfig", "Tree", "GbdtModel", "GbdtClassifier", "fit", "predict_proba", "predict", "softmax"]


@dataclass(frozen=True)
class GbdtConfig:
    n_rounds: int = 1000
    max_depth: int = 8
    learning_rate: float = 0.1
    min_samples_leaf: int = 20
    reg_lambda: float = 1.0
    feature_fraction: float = 1.0
    early_stopping_rounds: int | None = 50
    # "rounds": n_rounds rounds of one tree per class; "total": n_rounds trees overall
    tree_budget: str = "rounds"
    n_classes: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.n_rounds < 1:
            raise ValueError("n_rounds must be at least 1")
        if self.max_depth < 1:
            raise ValueError("max_depth must be at least 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.tree_budget not in ("rounds", "total"):
            raise ValueError("tree_budget must be 'rounds' or 'total'")
        if not 0 < self.feature_fraction <= 1:
            raise ValueError("feature_fraction must be in (0, 1]")

    @property
    def rounds(self) -> int:
        if self.tree_budget == "total":
            return max(1, self.n_rounds // self.n_classes)
        return self.n_rounds


@dataclass
class Tree:
    """Flat binary tree. ``left[i] == -1`` marks a leaf; ``x[feature] <= threshold`` goes left."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray

    def depth(self) -> int:
        depths = np.zeros(len(self.feature), dtype=int)
        for i in range(len(self.feature)):
            if self.left[i] >= 0:
                depths[self.left[i]] = depths[i] + 1
                depths[self.right[i]] = depths[i] + 1
        return int(depths.max())

    def predict(self, X: np.ndarray) -> np.ndarray:
        return _predict_tree(X, self.feature, self.threshold, self.left, self.right, self.value)

    def to_dict(self) -> dict:
        return {
            "feature": self.feature.tolist(),
            "threshold": self.threshold.tolist(),
            "left": self.left.tolist(),
            "right": self.right.tolist(),
            "value": self.value.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> Tree:
        return cls(
            feature=np.asarray(d["feature"], dtype=np.int64),
            threshold=np.asarray(d["threshold"], dtype=np.float64),
            left=np.asarray(d["left"], dtype=np.int64),
            right=np.asarray(d["right"], dtype=np.int64),
            value=np.asarray(d["value"], dtype=np.float64),
        )


@dataclass
class GbdtModel:
    config: GbdtConfig
    base_score: np.ndarray
    trees: list[list[Tree]]  # trees[round][class]
    n_features: int
    train_loss: list[float] | None = None

    @property
    def n_rounds(self) -> int:
        return len(self.trees)

    def raw_scores(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 1:
            X = X[None, :]
        if X.shape[1] != self.n_features:
            raise ValueError(f"model expects {self.n_features} features, got {X.shape[1]}")
        scores = np.tile(self.base_score, (X.shape[0], 1))
        for round_trees in self.trees:
            for c, tree in enumerate(round_trees):
                scores[:, c] += tree.predict(X)
        return scores

    def save(self, path: str | os.PathLike) -> None:
        doc = {
            "format": "latent-ecg-gbdt",
            "version": 1,
            "config": asdict(self.config),
            "n_features": self.n_features,
            "base_score": self.base_score.tolist(),
            "trees": [[t.to_dict() for t in rt] for rt in self.trees],
        }
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(doc, fh)

    @classmethod
    def load(cls, path: str | os.PathLike) -> GbdtModel:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
        if doc.get("format") != "latent-ecg-gbdt" or doc.get("version") != 1:
            raise ValueError(f"{path} is not a version-1 GBDT model file")
        return cls(
            config=GbdtConfig(**doc["config"]),
            base_score=np.asarray(doc["base_score"], dtype=np.float64),
            trees=[[Tree.from_dict(t) for t in rt] for rt in doc["trees"]],
            n_features=int(doc["n_features"]),
        )


def softmax(scores: np.ndarray) -> np.ndarray:
    shifted = scores - scores.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


# ---------------------------------------------------------------------------
# tree growing
# ---------------------------------------------------------------------------


@numba.njit(cache=True)
def _grow(X, order, g, h, features, max_depth, min_leaf, lam, lr):
    n = X.shape[0]
    cap = 2 ** (max_depth + 1) - 1
    feat = np.full(cap, -1, dtype=np.int64)
    thr = np.zeros(cap)
    left = np.full(cap, -1, dtype=np.int64)
    right = np.full(cap, -1, dtype=np.int64)
    value = np.zeros(cap)
    G = np.zeros(cap)
    H = np.zeros(cap)
    cnt = np.zeros(cap, dtype=np.int64)
    is_open = np.zeros(cap, dtype=np.bool_)

    node_of = np.zeros(n, dtype=np.int64)
    for i in range(n):
        G[0] += g[i]
        H[0] += h[i]
    cnt[0] = n
    is_open[0] = True
    n_nodes = 1

    best_gain = np.zeros(cap)
    best_feat = np.full(cap, -1, dtype=np.int64)
    best_thr = np.zeros(cap)
    GL = np.zeros(cap)
    HL = np.zeros(cap)
    NL = np.zeros(cap, dtype=np.int64)
    last = np.zeros(cap)

    for depth in range(max_depth):
        any_open = False
        for k in range(n_nodes):
            best_gain[k] = 0.0
            best_feat[k] = -1
            if is_open[k]:
                any_open = True
        if not any_open:
            break
        for f in features:
            for k in range(n_nodes):
                GL[k] = 0.0
                HL[k] = 0.0
                NL[k] = 0
            for pos in range(n):
                i = order[f, pos]
                k = node_of[i]
                if not is_open[k]:
                    continue
                x = X[i, f]
                if NL[k] > 0 and x > last[k]:
                    nl = NL[k]
                    nr = cnt[k] - nl
                    if nl >= min_leaf and nr >= min_leaf:
                        gl = GL[k]
                        hl = HL[k]
                        gr = G[k] - gl
                        hr = H[k] - hl
                        gain = 0.5 * (gl * gl / (hl + lam) + gr * gr / (hr + lam) - G[k] * G[k] / (H[k] + lam))
                        if gain > best_gain[k]:
                            best_gain[k] = gain
                            best_feat[k] = f
                            t = last[k] + 0.5 * (x - last[k])
                            if t >= x:
                                t = last[k]
                            best_thr[k] = t
                GL[k] += g[i]
                HL[k] += h[i]
                NL[k] += 1
                last[k] = x
        # open the chosen splits
        current = n_nodes
        for k in range(current):
            if not is_open[k]:
                continue
            is_open[k] = False
            if best_feat[k] < 0:
                continue
            feat[k] = best_feat[k]
            thr[k] = best_thr[k]
            left[k] = n_nodes
            right[k] = n_nodes + 1
            is_open[n_nodes] = depth + 1 < max_depth
            is_open[n_nodes + 1] = depth + 1 < max_depth
            n_nodes += 2
        for i in range(n):
            k = node_of[i]
            if left[k] >= 0:
                child = left[k] if X[i, feat[k]] <= thr[k] else right[k]
                node_of[i] = child
                G[child] += g[i]
                H[child] += h[i]
                cnt[child] += 1
    for k in range(n_nodes):
        if left[k] < 0:
            value[k] = -G[k] / (H[k] + lam) * lr
    return feat[:n_nodes], thr[:n_nodes], left[:n_nodes], right[:n_nodes], value[:n_nodes]


@numba.njit(cache=True)
def _predict_tree(X, feature, threshold, left, right, value):
    out = np.empty(X.shape[0])
    for i in range(X.shape[0]):
        k = 0
        while left[k] >= 0:
            if X[i, feature[k]] <= threshold[k]:
                k = left[k]
            else:
                k = right[k]
        out[i] = value[k]
    return out


def _macro_f1(y_true: np.ndarray, y_pred: np.ndarray, n_classes: int) -> float:
    scores = []
    for c in range(n_classes):
        support = np.sum(y_true == c)
        if support == 0:
            continue
        tp = np.sum((y_true == c) & (y_pred == c))
        predicted = np.sum(y_pred == c)
        p = tp / predicted if predicted else 0.0
        r = tp / support
        scores.append(0.0 if p + r == 0 else 2 * p * r / (p + r))
    return float(np.mean(scores)) if scores else 0.0


def _log_loss(P: np.ndarray, y: np.ndarray) -> float:
    return float(-np.mean(np.log(np.clip(P[np.arange(y.size), y], 1e-300, None))))


def fit(
    X: np.ndarray,
    y: np.ndarray,
    config: GbdtConfig = GbdtConfig(),
    X_val: np.ndarray | None = None,
    y_val: np.ndarray | None = None,
) -> GbdtModel:
    """Stagewise softmax boosting.

    With a validation set, the number of rounds is chosen by validation
    macro-F1 (patience ``config.early_stopping_rounds``) and the model is
    truncated to the best round.
    """
    X = np.ascontiguousarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    K = config.n_classes
    if X.ndim != 2 or X.shape[0] != y.size:
        raise ValueError("X must be (n, d) with one label per row")
    if not np.all(np.isfinite(X)):
        raise ValueError("features must be finite")
    if y.min() < 0 or y.max() >= K:
        raise ValueError(f"labels must lie in [0, {K})")
    counts = np.bincount(y, minlength=K)
    if np.count_nonzero(counts) < 2:
        raise ValueError("need at least two classes to fit a classifier")

    n, d = X.shape
    base = np.log((counts + 1.0) / (n + K))
    base = base - base.mean()
    scores = np.tile(base, (n, 1))
    order = np.ascontiguousarray(np.argsort(X, axis=0, kind="stable").T)
    rng = np.random.default_rng(config.seed)
    all_features = np.arange(d, dtype=np.int64)
    onehot = np.eye(K)[y]

    use_val = X_val is not None and y_val is not None and config.early_stopping_rounds
    if use_val:
        X_val = np.ascontiguousarray(X_val, dtype=np.float64)
        y_val = np.asarray(y_val, dtype=np.int64)
        val_scores = np.tile(base, (X_val.shape[0], 1))
        best_f1, best_round = -1.0, 0

    trees: list[list[Tree]] = []
    losses = []
    for r in range(config.rounds):
        P = softmax(scores)
        losses.append(_log_loss(P, y))
        if config.feature_fraction < 1.0:
            m = max(1, int(round(config.feature_fraction * d)))
            features = np.sort(rng.choice(d, size=m, replace=False)).astype(np.int64)
        else:
            features = all_features
        round_trees = []
        for c in range(K):
            p = P[:, c]
            g = p - onehot[:, c]
            hess = np.maximum(p * (1.0 - p), 1e-16)
            arrays = _grow(X, order, g, hess, features, config.max_depth, config.min_samples_leaf, config.reg_lambda, config.learning_rate)
            round_trees.append(Tree(*arrays))
        for c, tree in enumerate(round_trees):
            scores[:, c] += tree.predict(X)
        trees.append(round_trees)
        if use_val:
            for c, tree in enumerate(round_trees):
                val_scores[:, c] += tree.predict(X_val)
            f1 = _macro_f1(y_val, np.argmax(val_scores, axis=1), K)
            if f1 > best_f1:
                best_f1, best_round = f1, r + 1
            elif r + 1 - best_round >= config.early_stopping_rounds:
                logger.info("early stop at round %d (best %d, macro-F1 %.4f)", r + 1, best_round, best_f1)
                break
    losses.append(_log_loss(softmax(scores), y))
    if use_val:
        trees = trees[:best_round]
        losses = losses[: best_round + 1]
    return GbdtModel(config=config, base_score=base, trees=trees, n_features=d, train_loss=losses)


def predict_proba(model: GbdtModel, X: np.ndarray) -> np.ndarray:
    """Class probabilities; one row per input vector."""
    X = np.asarray(X, dtype=np.float64)
    single = X.ndim == 1
    P = softmax(model.raw_scores(X))
    return P[0] if single else P


def predict(model: GbdtModel, X: np.ndarray) -> np.ndarray | int:
    """Most probable class; ties go to the lowest class index."""
    P = predict_proba(model, X)
    return np.argmax(P, axis=-1)


class GbdtClassifier(ClassifierMixin, BaseEstimator):
    """Estimator wrapper around :func:`fit`; labels are integers ``0..n_classes-1``."""

    def __init__(
        self,
        n_rounds: int = 1000,
        max_depth: int = 8,
        learning_rate: float = 0.1,
        min_samples_leaf: int = 20,
        reg_lambda: float = 1.0,
        feature_fraction: float = 1.0,
        early_stopping_rounds: int | None = 50,
        tree_budget: str = "rounds",
        n_classes: int = 5,
        random_state: int = 0,
    ):
        self.n_rounds = n_rounds
        self.max_depth = max_depth
        self.learning_rate = learning_rate
        self.min_samples_leaf = min_samples_leaf
        self.reg_lambda = reg_lambda
        self.feature_fraction = feature_fraction
        self.early_stopping_rounds = early_stopping_rounds
        self.tree_budget = tree_budget
        self.n_classes = n_classes
        self.random_state = random_state

    def _config(self) -> GbdtConfig:
        return GbdtConfig(
            n_rounds=self.n_rounds,
            max_depth=self.max_depth,
            learning_rate=self.learning_rate,
            min_samples_leaf=self.min_samples_leaf,
            reg_lambda=self.reg_lambda,
            feature_fraction=self.feature_fraction,
            early_stopping_rounds=self.early_stopping_rounds,
            tree_budget=self.tree_budget,
            n_classes=self.n_classes,
            seed=self.random_state,
        )

    def fit(self, X, y, X_val=None, y_val=None):
        X, y = check_X_y(X, y, dtype=np.float64)
        self.model_ = fit(X, y.astype(np.int64), self._config(), X_val, y_val)
        self.classes_ = np.arange(self.n_classes)
        self.n_features_in_ = X.shape[1]
        return self

    @classmethod
    def from_model(cls, model: GbdtModel) -> GbdtClassifier:
        cfg = model.config
        est = cls(
            n_rounds=cfg.n_rounds,
            max_depth=cfg.max_depth,
            learning_rate=cfg.learning_rate,
            min_samples_leaf=cfg.min_samples_leaf,
            reg_lambda=cfg.reg_lambda,
            feature_fraction=cfg.feature_fraction,
            early_stopping_rounds=cfg.early_stopping_rounds,
            tree_budget=cfg.tree_budget,
            n_classes=cfg.n_classes,
            random_state=cfg.seed,
        )
        est.model_ = model
        est.classes_ = np.arange(cfg.n_classes)
        est.n_features_in_ = model.n_features
        return est

    def decision_function(self, X):
        check_is_fitted(self, "model_")
        return self.model_.raw_scores(check_array(X, dtype=np.float64))

    def predict_proba(self, X):
        return softmax(self.decision_function(X))

    def predict(self, X):
        return np.argmax(self.predict_proba(X), axis=1)
