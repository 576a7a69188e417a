import numpy as np
import pytest

from latent_ecg.smote import Smote, _neighbours, smote


def _imbalanced(rng):
    counts = {0: 60, 1: 12, 2: 25, 3: 5, 4: 30}
    X = np.concatenate([rng.standard_normal((n, 4)) + 3 * c for c, n in counts.items()])
    y = np.concatenate([np.full(n, c) for c, n in counts.items()])
    perm = rng.permutation(y.size)
    return X[perm], y[perm]


def test_output_is_exactly_balanced(rng):
    X, y = _imbalanced(rng)
    Xb, yb = smote(X, y, k=5, seed=0)
    assert np.all(np.bincount(yb) == 60)
    assert Xb.shape == (300, 4)


def test_originals_kept_in_order(rng):
    X, y = _imbalanced(rng)
    Xb, yb = smote(X, y, seed=0)
    start = 0
    for c in range(5):
        members = X[y == c]
        np.testing.assert_array_equal(Xb[start : start + len(members)], members)
        assert np.all(yb[start : start + 60] == c)
        start += 60


def test_synthetic_points_lie_on_neighbour_segments(rng):
    X, y = _imbalanced(rng)
    k = 5
    Xb, yb = smote(X, y, k=k, seed=0)
    start = 0
    for c in range(5):
        members = X[y == c]
        k_eff = min(k, len(members) - 1)
        nbrs = _neighbours(members, k_eff)
        synth = Xb[start + len(members) : start + 60]
        for s in synth:
            best = np.inf
            for i in range(len(members)):
                for j in nbrs[i]:
                    a, b = members[i], members[j]
                    gap = np.linalg.norm(a - s) + np.linalg.norm(s - b) - np.linalg.norm(a - b)
                    best = min(best, gap)
            assert best <= 1e-9
        start += 60


def test_neighbours_match_brute_force(rng):
    pts = rng.standard_normal((30, 3))
    nb = _neighbours(pts, 4)
    d = np.linalg.norm(pts[:, None] - pts[None], axis=-1)
    np.fill_diagonal(d, np.inf)
    for i in range(30):
        assert set(nb[i]) == set(np.argsort(d[i])[:4])


def test_deterministic_given_seed(rng):
    X, y = _imbalanced(rng)
    a = smote(X, y, seed=3)
    b = smote(X, y, seed=3)
    assert a[0].tobytes() == b[0].tobytes()
    assert not np.array_equal(a[0], smote(X, y, seed=4)[0])


def test_balanced_input_unchanged(rng):
    X = rng.standard_normal((20, 3))
    y = np.repeat([0, 1], 10)
    Xb, yb = smote(X, y)
    np.testing.assert_array_equal(Xb, X)
    np.testing.assert_array_equal(yb, y)


def test_k_clamped_with_warning(rng):
    X = rng.standard_normal((13, 2))
    y = np.array([0] * 10 + [1] * 3)
    with pytest.warns(UserWarning, match="k=5"):
        _, yb = smote(X, y, k=5)
    assert np.bincount(yb).tolist() == [10, 10]


def test_singleton_minority_class_rejected(rng):
    X = rng.standard_normal((6, 2))
    y = np.array([0, 0, 0, 0, 0, 1])
    with pytest.raises(ValueError, match="at least 2"):
        smote(X, y)


def test_non_finite_rejected():
    with pytest.raises(ValueError):
        smote(np.array([[0.0], [np.nan], [1.0]]), np.array([0, 1, 1]))


def test_estimator_wrapper(rng):
    X, y = _imbalanced(rng)
    Xb, yb = Smote(k_neighbors=3, random_state=1).fit_resample(X, y)
    np.testing.assert_array_equal(Xb, smote(X, y, k=3, seed=1)[0])
