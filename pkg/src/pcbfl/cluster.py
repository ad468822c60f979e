"""Spectral clustering of the patient similarity matrix and elbow selection of k."""

from __future__ import annotations

import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy.linalg import eigh
from scipy.special import comb

K_MAX = 10


class DegenerateGraphError(ValueError):
    pass


class InsufficientCurveError(ValueError):
    pass


@dataclass
class ClusterAssignment:
    labels: np.ndarray
    k: int

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.k):
            raise ValueError("cluster ids must lie in 0..k-1")

    def sizes(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.k)


def affinity_from_similarity(S: np.ndarray) -> np.ndarray:
    """Map cosine similarities onto [0, 1] and drop self-loops."""
    W = (np.asarray(S, dtype=np.float64) + 1.0) / 2.0
    np.fill_diagonal(W, 0.0)
    return W


def spectral_vectors(S: np.ndarray, n_vectors: int) -> np.ndarray:
    """Eigenvectors of the ``n_vectors`` smallest eigenvalues of the symmetric
    normalized Laplacian ``I - D^-1/2 W D^-1/2`` (columns, ascending)."""
    W = affinity_from_similarity(S)
    deg = W.sum(axis=1)
    if np.any(deg <= 0):
        raise DegenerateGraphError(f"vertex {int(np.flatnonzero(deg <= 0)[0])} has no edges")
    inv_sqrt = 1.0 / np.sqrt(deg)
    L = np.eye(len(W)) - inv_sqrt[:, None] * W * inv_sqrt[None, :]
    L = (L + L.T) / 2.0
    _, vecs = eigh(L, subset_by_index=[0, n_vectors - 1])
    # fix the sign of each eigenvector so results do not depend on the solver
    signs = np.sign(vecs[np.argmax(np.abs(vecs), axis=0), np.arange(vecs.shape[1])])
    return vecs * np.where(signs == 0, 1.0, signs)


def row_normalize(U: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(U, axis=1)
    out = np.zeros_like(U)
    ok = norms > 0
    out[ok] = U[ok] / norms[ok, None]
    out[~ok, 0] = 1.0
    return out


def _kmeans_pp(X: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    centers = np.empty((k, X.shape[1]))
    centers[0] = X[rng.integers(len(X))]
    closest = np.sum((X - centers[0]) ** 2, axis=1)
    for j in range(1, k):
        total = closest.sum()
        if total <= 0:
            idx = rng.integers(len(X))
        else:
            idx = int(np.searchsorted(np.cumsum(closest), rng.random() * total, side="right"))
            idx = min(idx, len(X) - 1)
        centers[j] = X[idx]
        closest = np.minimum(closest, np.sum((X - centers[j]) ** 2, axis=1))
    return centers


def _sq_dists(X, centers):
    return (np.sum(X ** 2, axis=1)[:, None] - 2.0 * X @ centers.T + np.sum(centers ** 2, axis=1)[None, :]).clip(0)


def _lloyd(X, centers, max_iter, tol):
    labels = None
    for _ in range(max_iter):
        new_labels = np.argmin(_sq_dists(X, centers), axis=1)
        new_centers = centers.copy()
        for j in range(len(centers)):
            members = X[new_labels == j]
            if len(members):
                new_centers[j] = members.mean(axis=0)
        shift = np.sum((new_centers - centers) ** 2)
        centers = new_centers
        converged = labels is not None and np.array_equal(labels, new_labels)
        labels = new_labels
        if converged or shift <= tol:
            break
    labels = np.argmin(_sq_dists(X, centers), axis=1)
    return labels, centers


def kmeans(X: np.ndarray, k: int, seed: int = 0, n_init: int = 10, max_iter: int = 300,
           tol: float = 1e-8, workers: int = 1) -> tuple[np.ndarray, np.ndarray, float]:
    """Lloyd's algorithm with k-means++ seeding; the restart with the lowest
    WCSS wins (lowest restart index on ties)."""
    X = np.asarray(X, dtype=np.float64)
    if not 1 <= k <= len(X):
        raise ValueError(f"k={k} is not in 1..{len(X)}")
    seeds = np.random.SeedSequence(seed).spawn(n_init)

    def restart(ss):
        labels, centers = _lloyd(X, _kmeans_pp(X, k, np.random.default_rng(ss)), max_iter, tol)
        return labels, centers, wcss(X, labels)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            runs = list(pool.map(restart, seeds))
    else:
        runs = [restart(ss) for ss in seeds]
    best = min(range(n_init), key=lambda i: (runs[i][2], i))
    return runs[best]


def spectral_cluster(S: np.ndarray, k: int, seed: int = 0, vectors: np.ndarray | None = None,
                     workers: int = 1) -> tuple[ClusterAssignment, np.ndarray]:
    """Normalized spectral clustering; returns the assignment and the
    row-normalized spectral embedding. ``vectors`` may hold precomputed
    eigenvectors (at least ``k`` columns)."""
    P = len(S)
    if not 1 <= k <= P:
        raise ValueError(f"k={k} is not in 1..{P}")
    U = vectors[:, :k] if vectors is not None else spectral_vectors(S, k)
    Y = row_normalize(U)
    if k == 1:
        return ClusterAssignment(np.zeros(P, dtype=np.int64), 1), Y
    labels, _, _ = kmeans(Y, k, seed=seed, workers=workers)
    return ClusterAssignment(labels, k), Y


def wcss(points: np.ndarray, labels) -> float:
    """Sum over clusters of squared distances to the cluster mean."""
    points = np.asarray(points, dtype=np.float64)
    labels = np.asarray(labels)
    if len(labels) != len(points):
        raise ValueError("the assignment must cover every row")
    total = 0.0
    for c in np.unique(labels):
        members = points[labels == c]
        total += float(np.sum((members - members.mean(axis=0)) ** 2))
    return total


def wcss_from_gram(G: np.ndarray, labels) -> float:
    """WCSS of the points whose Gram matrix is ``G``.

    sum_i |x_i - mu_k|^2 = sum_i G_ii - (1/n_k) sum_{i,j in k} G_ij, so the
    coordinator can score clusters of unit embeddings from S alone.
    """
    labels = np.asarray(labels)
    total = 0.0
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        block = G[np.ix_(idx, idx)]
        total += float(np.trace(block) - block.sum() / len(idx))
    return max(total, 0.0)


def wcss_curve(S: np.ndarray, k_max: int = K_MAX, seed: int = 0, workers: int = 1) -> tuple[list, dict]:
    """(k, WCSS_k) for k = 1..k_max plus the assignments behind them.

    Every k is clustered spectrally. WCSS is always measured on the same
    point set: the row-normalized spectral coordinates of all ``k_max``
    eigenvectors. (Rows of the first k vectors alone would make WCSS_1 zero.)
    """
    k_max = min(k_max, len(S))
    U = spectral_vectors(S, k_max)
    points = row_normalize(U)
    curve, assignments = [], {}
    for k in range(1, k_max + 1):
        assignment, _ = spectral_cluster(S, k, seed=seed, vectors=U, workers=workers)
        assignments[k] = assignment
        curve.append((k, wcss(points, assignment.labels)))
    return curve, assignments


def elbow(curve) -> int:
    """Interior k with the largest second difference; ties go to smaller k."""
    if len(curve) < 3:
        raise InsufficientCurveError("the elbow needs at least three (k, WCSS) points")
    ks = [k for k, _ in curve]
    w = np.array([v for _, v in curve], dtype=np.float64)
    second = w[:-2] - 2.0 * w[1:-1] + w[2:]
    return int(ks[1 + int(np.argmax(second))])


def adjusted_rand_index(a, b) -> float:
    a = np.asarray(a)
    b = np.asarray(b)
    _, ai = np.unique(a, return_inverse=True)
    _, bi = np.unique(b, return_inverse=True)
    table = np.zeros((ai.max() + 1, bi.max() + 1), dtype=np.int64)
    np.add.at(table, (ai, bi), 1)
    n = len(a)
    sum_cells = comb(table, 2).sum()
    sum_rows = comb(table.sum(axis=1), 2).sum()
    sum_cols = comb(table.sum(axis=0), 2).sum()
    expected = sum_rows * sum_cols / comb(n, 2)
    max_index = (sum_rows + sum_cols) / 2.0
    if max_index == expected:
        return 1.0
    return float((sum_cells - expected) / (max_index - expected))


def write_curve_csv(path, curve):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["k", "wcss"])
        for k, v in curve:
            writer.writerow([k, repr(float(v))])


def write_assignment_csv(path, registry, assignment: ClusterAssignment):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["patient_id", "site_id", "cluster"])
        for (sid, _, pid), label in zip(registry, assignment.labels):
            writer.writerow([pid, sid, int(label)])


def read_assignment_csv(path) -> dict:
    with open(path, newline="") as fh:
        return {row["patient_id"]: int(row["cluster"]) for row in csv.DictReader(fh)}
