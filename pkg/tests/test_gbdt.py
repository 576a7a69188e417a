import numpy as np
import pytest
from sklearn.base import clone

from latent_ecg.gbdt import (
    GbdtClassifier,
    GbdtConfig,
    GbdtModel,
    fit,
    predict,
    predict_proba,
    softmax,
)


def _blobs(rng, n=200):
    X = np.concatenate([rng.normal(-3, 0.5, (n // 2, 2)), rng.normal(3, 0.5, (n // 2, 2))])
    y = np.repeat([0, 2], n // 2)
    return X, y


def _five_class(rng, n=500, d=6):
    X = rng.standard_normal((n, d))
    y = (np.digitize(X[:, 0] + 0.5 * X[:, 1], [-1.0, -0.3, 0.3, 1.0])).astype(int)
    return X, y


def test_blobs_fit_perfectly_within_ten_rounds(rng):
    X, y = _blobs(rng)
    model = fit(X, y, GbdtConfig(n_rounds=10))
    assert np.all(predict(model, X) == y)
    P = predict_proba(model, X)
    assert np.all(P[np.arange(len(y)), y] > 0.9)


def _exhaustive_best_split(x, g, h, lam, min_leaf):
    best = (0.0, None)
    G, H = g.sum(), h.sum()
    for thr in np.unique(x)[:-1]:
        left = x <= thr
        nl = left.sum()
        if nl < min_leaf or len(x) - nl < min_leaf:
            continue
        gl, hl = g[left].sum(), h[left].sum()
        gain = 0.5 * (gl**2 / (hl + lam) + (G - gl) ** 2 / (H - hl + lam) - G**2 / (H + lam))
        if gain > best[0] + 1e-12:
            best = (gain, thr)
    return best


def test_depth_one_split_equals_exhaustive_search(rng):
    for _trial in range(5):
        n = 150
        x = np.round(rng.standard_normal(n), 1)  # ties included
        y = ((x + 0.3 * rng.standard_normal(n)) > 0.2).astype(int) * 3
        model = fit(x[:, None], y, GbdtConfig(n_rounds=1, max_depth=1, min_samples_leaf=5, early_stopping_rounds=None))
        counts = np.bincount(y, minlength=5)
        base = np.log((counts + 1.0) / (n + 5))
        p = softmax(np.tile(base - base.mean(), (n, 1)))
        for c in range(5):
            g = p[:, c] - (y == c)
            h = p[:, c] * (1 - p[:, c])
            gain, thr = _exhaustive_best_split(x, g, h, 1.0, 5)
            tree = model.trees[0][c]
            if thr is None:
                assert tree.left[0] == -1
                continue
            assert tree.feature[0] == 0
            # the learned threshold separates the sample exactly like the oracle's
            np.testing.assert_array_equal(x <= tree.threshold[0], x <= thr)


def test_probabilities_sum_to_one(rng):
    X, y = _five_class(rng)
    model = fit(X, y, GbdtConfig(n_rounds=20, max_depth=3))
    P = predict_proba(model, rng.standard_normal((1000, X.shape[1])) * 3)
    assert np.all(P > 0)
    np.testing.assert_allclose(P.sum(axis=1), 1.0, atol=1e-12)


def test_empty_forest_with_uniform_base_is_uniform():
    model = GbdtModel(GbdtConfig(), np.zeros(5), [], n_features=3)
    np.testing.assert_allclose(predict_proba(model, np.zeros(3)), 0.2)


def test_argmax_tie_goes_to_lowest_class():
    model = GbdtModel(GbdtConfig(), np.array([0.0, 1.0, 0.0, 1.0, 0.0]), [], n_features=1)
    assert predict(model, np.zeros(1)) == 1
    model = GbdtModel(GbdtConfig(), np.array([2.0, 0.0, 2.0, 0.0, 0.0]), [], n_features=1)
    assert predict(model, np.zeros(1)) == 0


def test_argmax_invariant_under_monotone_transform(rng):
    scores = rng.standard_normal((100, 5))
    for transform in (np.exp, lambda s: 3 * s + 1, np.tanh):
        np.testing.assert_array_equal(np.argmax(softmax(transform(scores)), 1), np.argmax(softmax(scores), 1))


def test_predict_is_argmax_of_proba(rng):
    X, y = _five_class(rng)
    model = fit(X, y, GbdtConfig(n_rounds=15, max_depth=4))
    Z = rng.standard_normal((300, X.shape[1]))
    np.testing.assert_array_equal(predict(model, Z), np.argmax(predict_proba(model, Z), axis=1))


def test_training_logloss_non_increasing(rng):
    X, y = _five_class(rng)
    model = fit(X, y, GbdtConfig(n_rounds=60, max_depth=4, early_stopping_rounds=None))
    checkpoints = model.train_loss[::10]
    assert all(b <= a + 1e-12 for a, b in zip(checkpoints, checkpoints[1:]))


def test_depth_bound(rng):
    X, y = _five_class(rng, n=800)
    model = fit(X, y, GbdtConfig(n_rounds=5, max_depth=3, min_samples_leaf=2))
    depths = [t.depth() for rt in model.trees for t in rt]
    assert max(depths) <= 3
    assert max(depths) == 3
    for rt in model.trees:
        assert len(rt) == 5
        for t in rt:
            internal = t.left >= 0
            assert np.all((t.right >= 0) == internal)


def test_serialization_roundtrip(tmp_path, rng):
    X, y = _five_class(rng)
    model = fit(X, y, GbdtConfig(n_rounds=10, max_depth=4))
    model.save(tmp_path / "g.json")
    back = GbdtModel.load(tmp_path / "g.json")
    Z = rng.standard_normal((1000, X.shape[1]))
    assert predict_proba(model, Z).tobytes() == predict_proba(back, Z).tobytes()


def test_early_stopping_truncates_to_best_round(rng):
    X, y = _five_class(rng, n=400)
    Xv, yv = _five_class(np.random.default_rng(9), n=200)
    model = fit(X, y, GbdtConfig(n_rounds=300, max_depth=6, min_samples_leaf=2, early_stopping_rounds=10), Xv, yv)
    assert model.n_rounds < 300


def test_total_tree_budget(rng):
    X, y = _five_class(rng)
    model = fit(X, y, GbdtConfig(n_rounds=20, tree_budget="total", max_depth=2))
    assert sum(len(rt) for rt in model.trees) == 20


def test_deterministic(rng):
    X, y = _five_class(rng)
    cfg = GbdtConfig(n_rounds=8, max_depth=4, feature_fraction=0.5, seed=2)
    a, b = fit(X, y, cfg), fit(X, y, cfg)
    assert predict_proba(a, X).tobytes() == predict_proba(b, X).tobytes()


def test_dominant_class_single_round(rng):
    X = rng.standard_normal((200, 3))
    y = np.zeros(200, dtype=int)
    y[:3] = 4
    model = fit(X, y, GbdtConfig(n_rounds=1))
    P = predict_proba(model, rng.standard_normal((50, 3)))
    assert np.all(P[:, 0] > 0.5)


def test_single_class_rejected(rng):
    with pytest.raises(ValueError, match="two classes"):
        fit(rng.standard_normal((10, 2)), np.zeros(10, dtype=int))


def test_non_finite_rejected(rng):
    X = rng.standard_normal((10, 2))
    X[3, 1] = np.inf
    with pytest.raises(ValueError, match="finite"):
        fit(X, np.arange(10) % 2)


def test_dimension_mismatch(rng):
    X, y = _blobs(rng)
    model = fit(X, y, GbdtConfig(n_rounds=2))
    with pytest.raises(ValueError, match="features"):
        predict_proba(model, np.zeros(3))


def test_config_validation():
    with pytest.raises(ValueError):
        GbdtConfig(n_rounds=0)
    with pytest.raises(ValueError):
        GbdtConfig(max_depth=0)


def test_estimator_interface(rng):
    X, y = _five_class(rng)
    est = GbdtClassifier(n_rounds=5, max_depth=3)
    est2 = clone(est)
    est.fit(X, y)
    assert est.score(X, y) > 0.6
    assert est2.get_params() == est.get_params()
    np.testing.assert_allclose(est.predict_proba(X).sum(1), 1.0)
    again = GbdtClassifier.from_model(est.model_)
    np.testing.assert_array_equal(again.predict(X), est.predict(X))
