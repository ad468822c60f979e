import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from sklearn.metrics import adjusted_rand_score

from pcbfl.cluster import (InsufficientCurveError, adjusted_rand_index, affinity_from_similarity, elbow, kmeans,
                           read_assignment_csv, spectral_cluster, wcss, wcss_curve, wcss_from_gram,
                           write_assignment_csv)


def blocks(sizes, d=6, noise=0.05, seed=0):
    rng = np.random.default_rng(seed)
    centers = np.eye(d)[: len(sizes)]
    X = np.vstack([c + noise * rng.normal(size=(n, d)) for c, n in zip(centers, sizes)])
    X /= np.linalg.norm(X, axis=1, keepdims=True)
    return X, np.repeat(np.arange(len(sizes)), sizes)


def wcss_double_loop(X, labels):
    total = 0.0
    for c in set(labels.tolist()):
        members = [i for i in range(len(X)) if labels[i] == c]
        mu = [sum(X[i][j] for i in members) / len(members) for j in range(X.shape[1])]
        for i in members:
            total += sum((X[i][j] - mu[j]) ** 2 for j in range(X.shape[1]))
    return total


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(0, 4), min_size=2, max_size=60), st.integers(0, 1000))
def test_ari_matches_sklearn(a, seed):
    b = np.random.default_rng(seed).integers(0, 3, size=len(a))
    assert adjusted_rand_index(a, b) == pytest.approx(adjusted_rand_score(a, b), abs=1e-12)


def test_ari_is_permutation_invariant():
    a = np.array([0, 0, 1, 1, 2, 2])
    assert adjusted_rand_index(a, (a + 1) % 3) == 1.0


@settings(max_examples=20, deadline=None)
@given(st.integers(2, 25), st.integers(1, 4), st.integers(0, 1000))
def test_wcss_matches_double_loop_and_gram(n, d, seed):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, d))
    labels = rng.integers(0, 3, size=n)
    assert wcss(X, labels) == pytest.approx(wcss_double_loop(X, labels), abs=1e-9)
    assert wcss_from_gram(X @ X.T, labels) == pytest.approx(wcss(X, labels), abs=1e-9)


def test_kmeans_recovers_blobs_and_is_seeded():
    X, truth = blocks([30, 20, 25])
    labels, centers, score = kmeans(X, 3, seed=1)
    assert adjusted_rand_index(truth, labels) == 1.0
    assert score == pytest.approx(wcss(X, labels))
    assert np.array_equal(labels, kmeans(X, 3, seed=1)[0])
    assert np.array_equal(labels, kmeans(X, 3, seed=1, workers=3)[0])
    with pytest.raises(ValueError):
        kmeans(X, 0)


def test_affinity_is_shifted_cosine_without_self_loops():
    S = np.array([[1.0, -1.0], [-1.0, 1.0]])
    W = affinity_from_similarity(np.array([[1.0, 0.5], [0.5, 1.0]]))
    np.testing.assert_allclose(W, [[0.0, 0.75], [0.75, 0.0]])
    assert affinity_from_similarity(S)[0, 1] == 0.0


def test_spectral_recovers_planted_blocks():
    X, truth = blocks([40, 30, 50], noise=0.2)
    assignment, Y = spectral_cluster(X @ X.T, 3, seed=0)
    assert adjusted_rand_index(truth, assignment.labels) == 1.0
    np.testing.assert_allclose(np.linalg.norm(Y, axis=1), 1.0)
    assert sorted(assignment.sizes().tolist()) == [30, 40, 50]


def test_curve_is_monotone_and_elbow_finds_k():
    X, _ = blocks([40, 30, 50], noise=0.2)
    curve, assignments = wcss_curve(X @ X.T, 8, seed=0)
    values = [v for _, v in curve]
    assert [k for k, _ in curve] == list(range(1, 9))
    assert all(a >= b - 1e-9 for a, b in zip(values, values[1:]))
    assert elbow(curve) == 3
    assert assignments[1].labels.max() == 0


def test_elbow_rule():
    assert elbow([(1, 10.0), (2, 4.0), (3, 3.0), (4, 2.5)]) == 2
    assert elbow([(1, 10.0), (2, 9.0), (3, 2.0), (4, 1.5)]) == 3
    with pytest.raises(InsufficientCurveError):
        elbow([(1, 1.0), (2, 0.5)])


def test_assignment_csv_round_trip(tmp_path):
    from pcbfl.cluster import ClusterAssignment
    registry = [(0, 0, "a"), (0, 1, "b"), (1, 0, "c")]
    write_assignment_csv(tmp_path / "a.csv", registry, ClusterAssignment(np.array([1, 0, 1]), 2))
    assert read_assignment_csv(tmp_path / "a.csv") == {"a": 1, "b": 0, "c": 1}
