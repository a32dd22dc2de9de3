import datetime
from collections import Counter

import numpy as np
import pytest

import cluster
from errors import ClusterError


def blobs(rng, centers, per_cluster, spread=0.3):
    centers = np.asarray(centers, dtype=np.float64)
    X = np.vstack([c + spread * rng.normal(size=(per_cluster, centers.shape[1])) for c in centers])
    truth = np.repeat(np.arange(len(centers)), per_cluster)
    return X, truth


def brute_force_silhouette(X, labels):
    n = len(X)
    D = np.sqrt(((X[:, None, :] - X[None, :, :]) ** 2).sum(-1))
    scores = np.zeros(n)
    for i in range(n):
        own = labels == labels[i]
        if own.sum() == 1:
            continue
        a = D[i, own].sum() / (own.sum() - 1)
        b = min(D[i, labels == c].mean() for c in np.unique(labels) if c != labels[i])
        scores[i] = (b - a) / max(a, b)
    return scores.mean()


def recovery(labels, truth):
    hits = 0
    for c in np.unique(labels):
        hits += Counter(truth[labels == c]).most_common(1)[0][1]
    return hits / len(truth)


class TestStandardize:
    def test_zero_mean_unit_std(self, rng):
        X = rng.normal(3.0, 2.0, size=(50, 4))
        Xs, stats = cluster.standardize(X)
        assert np.allclose(Xs.mean(axis=0), 0, atol=1e-12)
        assert np.allclose(Xs.std(axis=0), 1, atol=1e-12)
        assert np.allclose(cluster.unstandardize(Xs, stats), X)

    def test_constant_column_dropped(self, rng, caplog):
        X = np.column_stack([rng.normal(size=20), np.full(20, 5.0), rng.normal(size=20)])
        Xs, stats = cluster.standardize(X)
        assert Xs.shape == (20, 2)
        assert stats.retained.tolist() == [True, False, True]
        assert any('zero-variance' in r.getMessage() for r in caplog.records)

    def test_needs_two_rows(self):
        with pytest.raises(ClusterError):
            cluster.standardize(np.ones((1, 3)))


class TestKMeansPlusPlus:
    def test_d_squared_sampling(self):
        X = np.array([[0.0], [1.0], [3.0]])
        second = Counter()
        for seed in range(10000):
            centers = cluster.kmeans_pp_init(X, 2, np.random.default_rng(seed))
            if centers[0, 0] == 0.0:
                second[centers[1, 0]] += 1
        total = sum(second.values())
        assert total > 2500
        assert abs(second[3.0] / total - 0.9) < 0.03

    def test_k_equals_n(self, rng):
        X = rng.normal(size=(6, 2))
        centers = cluster.kmeans_pp_init(X, 6, rng)
        assert sorted(map(tuple, centers)) == sorted(map(tuple, X))

    def test_single_center_is_a_data_point(self, rng):
        X = rng.normal(size=(12, 3))
        centers = cluster.kmeans_pp_init(X, 1, rng)
        assert centers.shape == (1, 3)
        assert any(np.array_equal(centers[0], x) for x in X)

    def test_k_too_large(self, rng):
        with pytest.raises(ClusterError):
            cluster.kmeans_pp_init(np.zeros((3, 2)), 4, rng)


class TestKMeans:
    def test_duplicated_points(self, rng):
        X = np.array([[0.0, 0.0]] * 3 + [[5.0, 5.0]] * 3)
        model = cluster.kmeans_fit(X, 2, rng)
        assert model.inertia == 0.0
        assert len(set(model.labels[:3])) == 1 and model.labels[0] != model.labels[3]

    def test_nearest_centroid(self, rng):
        X = rng.normal(size=(300, 3))
        model = cluster.kmeans_fit(X, 4, rng, restarts=3)
        d2 = ((X[:, None, :] - model.centroids[None, :, :]) ** 2).sum(-1)
        assert np.array_equal(model.labels, d2.argmin(axis=1))
        assert model.inertia == pytest.approx(d2.min(axis=1).sum())

    def test_inertia_never_increases(self, rng):
        X = rng.normal(size=(400, 2))
        for k in (2, 5, 8):
            history = cluster.kmeans_fit(X, k, rng, restarts=1).inertia_history
            assert all(b <= a + 1e-9 for a, b in zip(history, history[1:]))

    def test_no_empty_clusters(self, rng):
        X = np.vstack([rng.normal(size=(30, 2)), [[100.0, 100.0]]])
        model = cluster.kmeans_fit(X, 6, rng)
        assert len(np.unique(model.labels)) == 6

    def test_inertia_decreases_with_k(self, rng):
        X, _ = blobs(rng, [[0, 0], [6, 0], [0, 6], [6, 6]], 40, spread=0.8)
        inertias = [cluster.kmeans_fit(X, k, rng, restarts=10, score=False).inertia for k in range(1, 9)]
        assert all(b <= a + 1e-9 for a, b in zip(inertias, inertias[1:]))

    def test_tight_blobs_recover_planted_partition(self, rng):
        X, truth = blobs(rng, [[0, 0], [5, 0], [0, 5]], 30, spread=0.1)
        labels = cluster.kmeans_fit(X, 3, rng).labels
        assert len(np.unique(labels)) == 3
        for c in range(3):
            assert len(np.unique(labels[truth == c])) == 1

    def test_same_seed_same_model(self):
        X = np.random.default_rng(0).normal(size=(100, 2))
        a = cluster.kmeans_fit(X, 3, np.random.default_rng(5))
        b = cluster.kmeans_fit(X, 3, np.random.default_rng(5))
        assert np.array_equal(a.labels, b.labels) and a.inertia == b.inertia


class TestSilhouette:
    def test_matches_brute_force(self, rng):
        X, _ = blobs(rng, [[0, 0], [3, 0], [0, 3]], 60, spread=1.0)
        X = np.vstack([X, rng.normal(size=(20, 2))])
        labels = cluster.kmeans_fit(X, 3, rng, score=False).labels
        assert abs(cluster.silhouette(X, labels) - brute_force_silhouette(X, labels)) < 1e-9

    def test_single_cluster(self):
        with pytest.raises(ClusterError):
            cluster.silhouette(np.zeros((5, 2)), np.zeros(5, dtype=int))

    def test_identical_points(self):
        assert cluster.silhouette(np.ones((6, 2)), [0, 0, 0, 1, 1, 1]) == 0.0

    def test_far_apart_pairs(self):
        X = np.array([[0.0, 0.0], [0.0, 0.01], [10.0, 10.0], [10.0, 10.01]])
        assert cluster.silhouette(X, [0, 0, 1, 1]) > 0.9

    def test_random_labels_near_zero(self, rng):
        for _ in range(100):
            X = rng.uniform(size=(300, 2))
            labels = rng.integers(2, size=300)
            assert abs(cluster.silhouette(X, labels)) < 0.1

    def test_all_singletons(self):
        assert cluster.silhouette(np.eye(3), [0, 1, 2]) == 0.0


class TestSweep:
    def test_finds_five_blobs(self, rng):
        centers = [[0, 0, 0], [10, 0, 0], [0, 10, 0], [0, 0, 10], [10, 10, 10]]
        X, truth = blobs(rng, centers, 60, spread=0.5)
        result = cluster.sweep_k(X, rng, range(2, 11), restarts=10)
        assert [r[0] for r in result.rows] == list(range(2, 11))
        assert result.best_k == 5
        assert recovery(result.models[5].labels, truth) >= 0.99

    def test_finds_two_blobs(self, rng):
        X, truth = blobs(rng, [[0, 0], [10, 10]], 50, spread=0.5)
        result = cluster.sweep_k(X, rng, range(2, 11), restarts=5)
        assert result.best_k == 2
        assert recovery(result.models[2].labels, truth) == 1.0

    def test_k_up_to_n(self, rng):
        result = cluster.sweep_k(rng.normal(size=(10, 2)), rng, range(2, 11), restarts=2)
        assert [r[0] for r in result.rows] == list(range(2, 11))
        k, score, inertia = result.rows[-1]
        assert (k, score) == (10, 0.0)
        assert inertia == pytest.approx(0.0, abs=1e-12)

    def test_range_too_large(self, rng):
        with pytest.raises(ClusterError):
            cluster.sweep_k(rng.normal(size=(5, 2)), rng, range(2, 7))

    def test_write_sweep(self, rng, tmp_path):
        X, _ = blobs(rng, [[0, 0], [5, 5]], 10)
        result = cluster.sweep_k(X, rng, range(2, 4), restarts=2)
        path = tmp_path / 'sweep.csv'
        cluster.write_sweep(path, result)
        lines = path.read_text().splitlines()
        assert lines[0] == 'k,silhouette,inertia' and len(lines) == 3


class TestAssignments:
    def test_assign_new_points(self, rng):
        X, truth = blobs(rng, [[0, 0], [8, 8]], 30)
        model = cluster.fit_clusters(X, 2, rng)
        labels = cluster.assign(model, X)
        assert np.array_equal(labels, model.labels)

    def test_csv_round_trip(self, tmp_path):
        keys = [('p1', datetime.date(2022, 1, 1)), ('p2', datetime.date(2022, 1, 2))]
        path = tmp_path / 'assignments.csv'
        cluster.write_assignments(path, keys, [3, 0])
        assert path.read_text() == 'participant_id,date,cluster\np1,2022-01-01,3\np2,2022-01-02,0\n'
        assert cluster.read_assignments(path) == dict(zip(keys, [3, 0]))

    def test_timeline(self):
        d = datetime.date(2022, 1, 1)
        assignments = {('p1', d + datetime.timedelta(1)): 2, ('p1', d): 1, ('p2', d): 0}
        assert cluster.cluster_timeline(assignments, 'p1') == [(d, 1), (d + datetime.timedelta(1), 2)]
        with pytest.raises(ClusterError):
            cluster.cluster_timeline(assignments, 'p9')

    def test_timeline_csv(self, tmp_path):
        d = datetime.date(2022, 1, 1)
        timelines = {'p2': [(d, 0)], 'p1': [(d, 1), (d + datetime.timedelta(1), 1), (d + datetime.timedelta(3), 2)]}
        path = tmp_path / 'timeline.csv'
        cluster.write_timeline(path, timelines)
        assert path.read_text() == ('participant_id,date,cluster,changed\n'
                                    'p1,2022-01-01,1,0\np1,2022-01-02,1,0\np1,2022-01-04,2,1\n'
                                    'p2,2022-01-01,0,0\n')
