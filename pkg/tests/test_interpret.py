import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from sklearn.metrics import adjusted_rand_score, silhouette_score

from stgload import dataio, interpret as ip
from stgload.train_eval import metrics, predict
from conftest import tiny_model

labelings = st.lists(st.integers(0, 4), min_size=2, max_size=25)


# ------------------------------------------------------------ connectivity


def test_connectivity_examples():
    A = np.zeros((5, 5))
    A[0, 1] = A[2, 3] = A[3, 4] = 0.5
    c = ip.connectivity_clusters(A)
    assert c.labels.tolist() == [0, 0, 1, 1, 1] and c.k == 2 and c.method == "connectivity"
    full = np.ones((4, 4)) - np.eye(4)
    assert ip.connectivity_clusters(full).labels.tolist() == [0, 0, 0, 0]


def test_connectivity_uses_either_direction_and_orders_labels():
    A = np.zeros((4, 4))
    A[3, 0] = 0.1  # one-way edge
    assert ip.connectivity_clusters(A).labels.tolist() == [0, 1, 2, 0]


@given(st.integers(0, 10**6), st.floats(0.01, 100))
def test_connectivity_scale_invariant(seed, scale):
    rng = np.random.default_rng(seed)
    A = rng.random((8, 8)) * (rng.random((8, 8)) < 0.15)
    a = ip.connectivity_clusters(A)
    b = ip.connectivity_clusters(A * scale)
    assert np.array_equal(a.labels, b.labels)
    assert set(a.labels.tolist()) == set(range(a.k))


# ------------------------------------------------------------------ kmeans


def test_kmeans_examples():
    pts = np.array([[0.0], [3.0], [7.0]])
    r = ip.kmeans(pts, 3, seed=0)
    assert r.inertia == 0.0 and sorted(r.labels.tolist()) == [0, 1, 2]
    blobs = np.array([0.0, 0.1, 10.0, 10.1])
    r = ip.kmeans(blobs, 2, seed=0)
    assert r.labels.tolist() == [0, 0, 1, 1]
    assert r.inertia == pytest.approx(0.01)


def test_kmeans_deterministic_and_errors():
    X = np.random.default_rng(0).normal(size=(30, 3))
    assert np.array_equal(ip.kmeans(X, 4, seed=3).labels, ip.kmeans(X, 4, seed=3).labels)
    with pytest.raises(ValueError):
        ip.kmeans(X[:2], 3)
    with pytest.raises(ValueError):
        ip.kmeans(X, 0)


def test_kmeans_matches_sklearn_inertia():
    from sklearn.cluster import KMeans

    rng = np.random.default_rng(5)
    X = np.concatenate([rng.normal(c, 0.3, size=(15, 2)) for c in ((0, 0), (3, 0), (0, 3), (3, 3))])
    ours = ip.kmeans(X, 4, seed=0)
    ref = KMeans(4, n_init=10, random_state=0).fit(X)
    assert ours.inertia == pytest.approx(ref.inertia_, rel=1e-9)
    assert adjusted_rand_score(ours.labels, ref.labels_) == 1.0


def test_lloyd_inertia_never_increases():
    rng = np.random.default_rng(2)
    X = rng.normal(size=(60, 4))
    for seed in range(5):
        _, inertias = ip._lloyd(X, ip._kmeans_pp(X, 5, np.random.default_rng(seed)), 300, 1e-10)
        assert all(b <= a + 1e-9 for a, b in zip(inertias, inertias[1:]))


# -------------------------------------------------------------- silhouette


def test_silhouette_two_blobs_hand_value():
    X = np.array([0.0, 0.1, 10.0, 10.1])
    # a = 0.1 everywhere; b = 10.05, 9.95, 9.95, 10.05
    expect = np.mean([(10.05 - 0.1) / 10.05, (9.95 - 0.1) / 9.95] * 2)
    assert ip.silhouette(X, [0, 0, 1, 1]) == pytest.approx(expect, abs=1e-12)
    assert ip.silhouette(X, [0, 0, 1, 1]) == pytest.approx(0.990, abs=1e-3)


def test_silhouette_degenerate_cases():
    # identical points split across clusters: a = b = 0 scores 0
    assert ip.silhouette(np.array([1.0, 1.0, 1.0, 1.0]), [0, 0, 1, 1]) == 0.0
    # singletons score 0
    expect = np.mean([0.0, (5.0 - 0.1) / 5.0, (5.1 - 0.1) / 5.1])
    assert ip.silhouette(np.array([0.0, 5.0, 5.1]), [0, 1, 1]) == pytest.approx(expect, abs=1e-12)
    with pytest.raises(ValueError):
        ip.silhouette(np.zeros((3, 1)), [0, 0, 0])


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10**6), st.integers(2, 5))
def test_silhouette_matches_sklearn(seed, k):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(20, 3))
    labels = np.concatenate([np.arange(k), rng.integers(0, k, 20 - k)])
    s = ip.silhouette(X, labels)
    assert -1 <= s <= 1
    assert s == pytest.approx(silhouette_score(X, labels), abs=1e-12)


def test_silhouette_random_labels_near_zero():
    rng = np.random.default_rng(0)
    for _ in range(20):
        X = rng.normal(size=(60, 2))
        assert abs(ip.silhouette(X, rng.integers(0, 3, 60))) < 0.2


def test_select_k_examples():
    rng = np.random.default_rng(1)
    three = np.concatenate([rng.normal(c, 0.2, size=(8, 2)) for c in ((0, 0), (10, 0), (0, 10))])
    assert ip.select_k_by_silhouette(three, seed=0)[0] == 3
    two = np.concatenate([rng.normal(c, 0.2, size=(8, 2)) for c in ((0, 0), (10, 10))])
    k, score, scan = ip.select_k_by_silhouette(two, seed=0)
    assert k == 2 and score > 0.9
    assert [row[0] for row in scan] == list(range(2, 11))


def test_select_k_tie_prefers_smaller(monkeypatch):
    # identical points collapse every k to one cluster, so every k scores the same
    k, score, scan = ip.select_k_by_silhouette(np.zeros((4, 1)), range(2, 4), seed=0)
    assert k == 2 and len({s for _, s in scan}) == 1
    monkeypatch.setattr(ip, "silhouette", lambda X, labels: 0.5)
    X = np.random.default_rng(0).normal(size=(12, 2))
    assert ip.select_k_by_silhouette(X, range(2, 8), seed=0)[:2] == (2, 0.5)


def test_select_k_needs_enough_points():
    with pytest.raises(ValueError):
        ip.select_k_by_silhouette(np.zeros((5, 1)), range(2, 6))


# --------------------------------------------------------------------- ARI


def test_ari_examples():
    assert ip.adjusted_rand_index([0, 0, 1, 2], [0, 0, 1, 2]) == 1.0
    assert ip.adjusted_rand_index([0, 0, 1, 2], [5, 5, 3, 9]) == 1.0
    assert ip.adjusted_rand_index([0, 0, 0, 0], [0, 1, 2, 3]) == 0.0
    with pytest.raises(ValueError):
        ip.compare_clusterings([0, 1], [0, 1, 2])


@given(labelings, st.integers(0, 10**6))
def test_ari_properties(a, seed):
    a = np.array(a)
    rng = np.random.default_rng(seed)
    relabel = rng.permutation(10)
    b = rng.integers(0, 3, len(a))
    assert ip.adjusted_rand_index(a, a) == 1.0
    assert ip.adjusted_rand_index(a, relabel[a]) == pytest.approx(1.0, abs=1e-12)
    assert ip.adjusted_rand_index(a, b) == pytest.approx(adjusted_rand_score(a, b), abs=1e-12)


# -------------------------------------------------------------- features


def test_kmeans_features_layout(small_synth):
    ds, _ = small_synth
    f = ip.kmeans_features(ds)
    assert f.shape == (6, 400 + 8)
    assert np.array_equal(f[2, :400], ds.features[:, 2, 0])
    assert f[1, 400] == pytest.approx(ds.features[:, 1, 2].mean())
    assert f[1, 404] == pytest.approx(ds.features[:, 1, 2].std())


# -------------------------------------------------------------- robustness


def test_shuffle_nodes_moves_only_chosen_rows():
    X = np.arange(2 * 3 * 10 * 2, dtype=float).reshape(2, 3, 10, 2)
    out = ip.shuffle_nodes(X, 0.3, np.random.default_rng(0))
    moved = [i for i in range(10) if not np.array_equal(out[:, :, i], X[:, :, i])]
    assert len(moved) <= 3
    # the multiset of node rows is unchanged
    assert sorted(map(bytes, out.transpose(2, 0, 1, 3).reshape(10, -1))) == sorted(
        map(bytes, X.transpose(2, 0, 1, 3).reshape(10, -1)))
    assert ip.shuffle_nodes(X, 0.0, np.random.default_rng(0)) is X


def test_shuffle_count_is_ceiling():
    rng = np.random.default_rng(1)
    X = np.random.default_rng(0).random((1, 1, 7, 1))
    hits = set()
    for _ in range(200):
        out = ip.shuffle_nodes(X, 0.3, rng)
        hits.add(int(np.sum(out[0, 0, :, 0] != X[0, 0, :, 0])))
    assert max(hits) == 3  # ceil(0.3 * 7)


def test_robustness_rows_and_zero_ratio_identity():
    model = tiny_model(seed=0, n_nodes=4)
    rng = np.random.default_rng(0)
    X, Y = rng.random((6, 4, 4, 2)), rng.random((6, 1, 4, 1))
    rows = ip.shuffle_robustness(model, X, Y, seed=2, trials=3)
    assert [r.ratio for r in rows] == [i / 10 for i in range(11)]
    plain = metrics(predict(model, X), Y)
    assert rows[0].mse == plain.mse and rows[0].mae == plain.mae
    again = ip.shuffle_robustness(model, X, Y, seed=2, trials=3)
    assert [(r.mse, r.mae) for r in rows] == [(r.mse, r.mae) for r in again]


def test_spearman():
    assert ip.spearman([1, 2, 3, 4], [10, 20, 25, 100]) == pytest.approx(1.0)
    assert ip.spearman([1, 2, 3], [3, 2, 1]) == pytest.approx(-1.0)
