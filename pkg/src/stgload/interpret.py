"""Cluster analysis of the learned graph, and input-shuffling robustness."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .dataio import LOAD, BuildingDataset
from .train_eval import metrics, predict


@dataclass
class ClusterAssignment:
    labels: np.ndarray
    k: int
    method: str
    inertia: float = math.nan


@dataclass
class RobustnessRow:
    ratio: float
    mse: float
    mae: float


def _canonical_labels(labels: Sequence[int]) -> np.ndarray:
    """Renumber so cluster ids appear in order of their smallest member index."""
    mapping: dict[int, int] = {}
    return np.array([mapping.setdefault(int(l), len(mapping)) for l in labels], dtype=int)


def connectivity_clusters(A: np.ndarray) -> ClusterAssignment:
    """Connected components of the undirected support of ``A``."""
    A = np.asarray(A, dtype=float)
    n = A.shape[0]
    parent = list(range(n))

    def find(i: int) -> int:
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    linked = np.maximum(A, A.T) > 0
    for i, j in zip(*np.nonzero(linked)):
        ri, rj = find(int(i)), find(int(j))
        if ri != rj:
            parent[max(ri, rj)] = min(ri, rj)
    labels = _canonical_labels([find(i) for i in range(n)])
    return ClusterAssignment(labels, int(labels.max()) + 1 if n else 0, "connectivity")


# ------------------------------------------------------------------ k-means


def _kmeans_pp(X: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    centres = [X[rng.integers(len(X))]]
    for _ in range(1, k):
        d2 = np.min(((X[:, None, :] - np.asarray(centres)[None]) ** 2).sum(-1), axis=1)
        total = d2.sum()
        if total <= 0:
            centres.append(X[rng.integers(len(X))])
        else:
            centres.append(X[rng.choice(len(X), p=d2 / total)])
    return np.asarray(centres, dtype=float)


def _lloyd(X: np.ndarray, centres: np.ndarray, max_iter: int, tol: float):
    inertias = []
    for _ in range(max_iter):
        d2 = ((X[:, None, :] - centres[None]) ** 2).sum(-1)
        labels = np.argmin(d2, axis=1)
        inertias.append(float(d2[np.arange(len(X)), labels].sum()))
        new = centres.copy()
        for c in range(len(centres)):
            members = X[labels == c]
            if len(members):
                new[c] = members.mean(axis=0)
        if np.allclose(new, centres, atol=tol, rtol=0):
            break
        centres = new
    d2 = ((X[:, None, :] - centres[None]) ** 2).sum(-1)
    labels = np.argmin(d2, axis=1)
    inertias.append(float(d2[np.arange(len(X)), labels].sum()))
    return labels, inertias


def kmeans(features: np.ndarray, k: int, seed: int = 0, restarts: int = 10,
           max_iter: int = 300, tol: float = 1e-10) -> ClusterAssignment:
    """Lloyd's algorithm from k-means++ seeds; best inertia over restarts.

    Inertia never increases across iterations of a run (asserted).
    """
    X = np.asarray(features, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    if not 1 <= k <= len(X):
        raise ValueError(f"k-means needs 1 <= k <= N, got k={k}, N={len(X)}")
    rng = np.random.default_rng(seed)
    best_labels, best_inertia = None, math.inf
    for _ in range(restarts):
        labels, inertias = _lloyd(X, _kmeans_pp(X, k, rng), max_iter, tol)
        scale = max(abs(inertias[0]), 1.0)
        assert all(b <= a + 1e-9 * scale for a, b in zip(inertias, inertias[1:])), inertias
        if inertias[-1] < best_inertia:
            best_labels, best_inertia = labels, inertias[-1]
    labels = _canonical_labels(best_labels)
    return ClusterAssignment(labels, int(labels.max()) + 1, "kmeans", best_inertia)


def silhouette(features: np.ndarray, labels: Sequence[int]) -> float:
    """Mean silhouette with Euclidean distance; singletons and a = b = 0 score 0."""
    X = np.asarray(features, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    labels = np.asarray(labels)
    ids = np.unique(labels)
    if len(ids) < 2:
        raise ValueError("silhouette needs at least two clusters")
    D = np.sqrt(np.maximum(((X[:, None, :] - X[None]) ** 2).sum(-1), 0.0))
    scores = np.zeros(len(X))
    for i in range(len(X)):
        own = labels == labels[i]
        if own.sum() == 1:
            continue
        a = D[i, own].sum() / (own.sum() - 1)
        b = min(D[i, labels == c].mean() for c in ids if c != labels[i])
        top = max(a, b)
        scores[i] = 0.0 if top == 0 else (b - a) / top
    return float(scores.mean())


def select_k_by_silhouette(features: np.ndarray, k_range=range(2, 11), seed: int = 0,
                           restarts: int = 10) -> tuple[int, float, list[tuple[int, float]]]:
    """Best k by silhouette; ties favour the smaller k. Also returns the full scan."""
    X = np.asarray(features, dtype=float)
    ks = list(k_range)
    if len(X) <= max(ks):
        raise ValueError(f"need more than {max(ks)} points, got {len(X)}")
    scan = []
    for k in ks:
        labels = kmeans(X, k, seed=seed, restarts=restarts).labels
        score = silhouette(X, labels) if len(np.unique(labels)) >= 2 else -1.0
        scan.append((k, score))
    best_k, best = scan[0]
    for k, s in scan[1:]:
        if s > best:
            best_k, best = k, s
    return best_k, best, scan


def adjusted_rand_index(a: Sequence[int], b: Sequence[int]) -> float:
    """Pair-counting ARI; two identical trivial partitions score 1."""
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"labelings differ in length: {len(a)} vs {len(b)}")
    n = len(a)
    _, ai = np.unique(a, return_inverse=True)
    _, bi = np.unique(b, return_inverse=True)
    table = np.zeros((ai.max() + 1, bi.max() + 1), dtype=np.int64)
    np.add.at(table, (ai, bi), 1)

    def pairs(x):
        return (x * (x - 1) // 2).sum()

    index = pairs(table)
    row, col = pairs(table.sum(1)), pairs(table.sum(0))
    total = n * (n - 1) // 2
    expected = row * col / total if total else 0.0
    maximum = (row + col) / 2
    if maximum == expected:
        return 1.0
    return float((index - expected) / (maximum - expected))


compare_clusterings = adjusted_rand_index


def kmeans_features(ds: BuildingDataset) -> np.ndarray:
    """Full normalized load series plus mean and sd of each weather feature."""
    feats = ds.features
    weather = feats[:, :, 2:]
    return np.concatenate([feats[:, :, LOAD].T, weather.mean(0), weather.std(0)], axis=1)


# --------------------------------------------------------------- robustness


def shuffle_nodes(X: np.ndarray, ratio: float, rng: np.random.Generator) -> np.ndarray:
    """Permute the feature rows of ``ceil(ratio * N)`` randomly chosen nodes among themselves."""
    n = X.shape[2]
    count = math.ceil(round(ratio * n, 9))
    if count == 0:
        return X
    chosen = np.sort(rng.choice(n, size=count, replace=False))
    out = X.copy()
    out[:, :, chosen, :] = X[:, :, rng.permutation(chosen), :]
    return out


def shuffle_robustness(model, X_test: np.ndarray, Y_test: np.ndarray,
                       ratios: Sequence[float] | None = None, seed: int = 0,
                       trials: int = 5) -> list[RobustnessRow]:
    """Score the trained model when a fraction of nodes receive another node's inputs.

    Targets stay in place. Each (ratio, trial) uses its own seeded stream.
    """
    if ratios is None:
        ratios = [i / 10 for i in range(11)]
    rows = []
    for ri, ratio in enumerate(ratios):
        mses, maes = [], []
        # an empty selection is the plain evaluation; score it once so it matches exactly
        for t in range(trials if math.ceil(round(ratio * X_test.shape[2], 9)) else 1):
            rng = np.random.default_rng([seed, ri, t])
            report = metrics(predict(model, shuffle_nodes(X_test, ratio, rng)), Y_test)
            mses.append(report.mse)
            maes.append(report.mae)
        rows.append(RobustnessRow(float(ratio), float(np.mean(mses)), float(np.mean(maes))))
    return rows


def spearman(x: Sequence[float], y: Sequence[float]) -> float:
    from scipy.stats import spearmanr

    return float(spearmanr(x, y).statistic)
