from itertools import permutations

import numpy as np
import pytest
from numpy.testing import assert_allclose

from app.errors import DataError
from app.services import metrics


def brute_force_acc(pred, truth):
    clusters, classes = np.unique(pred), np.unique(truth)
    size = max(len(clusters), len(classes))
    best = 0
    for perm in permutations(range(size)):
        mapping = {c: perm[i] for i, c in enumerate(clusters)}
        hits = sum(1 for p, t in zip(pred, truth) if mapping[p] < len(classes) and classes[mapping[p]] == t)
        best = max(best, hits)
    return best / len(pred)


class TestAcc:
    def test_examples(self):
        assert metrics.acc([0, 0, 1, 1], [0, 1, 1, 1]) == pytest.approx(0.75)
        assert metrics.acc([1, 1, 0, 0], [0, 0, 1, 1]) == pytest.approx(1.0)

    def test_more_clusters_than_classes(self):
        assert metrics.acc([0, 1, 2, 3], [0, 0, 1, 1]) == pytest.approx(0.5)

    def test_matches_brute_force(self, rng):
        for _ in range(20):
            truth = rng.integers(0, 3, size=15)
            pred = rng.integers(0, 4, size=15)
            assert metrics.acc(pred, truth) == pytest.approx(brute_force_acc(pred, truth))

    def test_single_cluster_scores_majority_frequency(self, rng):
        truth = rng.integers(0, 4, size=50)
        assert metrics.acc(np.full(50, 7), truth) == pytest.approx(np.bincount(truth).max() / truth.size)

    def test_relabeled_truth_is_perfect(self, rng):
        truth = rng.integers(0, 4, size=50)
        assert metrics.acc((truth + 1) % 4 + 10, truth) == pytest.approx(1.0)

    def test_rejects_mismatched_vectors(self):
        with pytest.raises(DataError):
            metrics.acc([0, 1], [0, 1, 1])
        with pytest.raises(DataError):
            metrics.acc([], [])


class TestAgreementScores:
    def test_ari(self):
        assert metrics.ari([2, 2, 5, 5], [0, 0, 1, 1]) == pytest.approx(1.0)
        assert metrics.ari([0, 0, 0, 0], [0, 0, 1, 1]) == pytest.approx(0.0)

    def test_nmi(self):
        assert metrics.nmi([3, 3, 1, 1], [0, 0, 1, 1]) == pytest.approx(1.0)
        assert metrics.nmi([0, 1, 0, 1], [0, 0, 1, 1]) == pytest.approx(0.0, abs=1e-12)


class TestDda:
    def test_examples(self):
        truth = [0, 0, 3, 5]
        assert metrics.dda([False, False, True, True], truth) == 1.0
        assert metrics.dda([True, True, False, False], truth) == 0.0
        assert metrics.dda([False, True, True, True], truth) == 0.75

    def test_custom_healthy_label(self):
        assert metrics.dda([True, False], [0, 1], healthy_label=1) == 1.0

    def test_score_all_keys(self):
        scores = metrics.score_all([0, 0, 1, 1], [False, False, True, True], [0, 0, 1, 1])
        assert scores == {"dda": 1.0, "acc": 1.0, "ari": pytest.approx(1.0), "nmi": pytest.approx(1.0)}


class TestPca2d:
    def test_axis_aligned(self):
        Z = np.array([[3.0, 0.0], [-3.0, 0.0], [0.0, 1.0], [0.0, -1.0]])
        assert_allclose(metrics.pca2d(Z), Z, atol=1e-12)

    def test_rank_one(self):
        t = np.arange(5.0)
        Z = np.outer(t, [1.0, 2.0])
        coords = metrics.pca2d(Z)
        assert_allclose(coords[:, 0], (t - t.mean()) * np.sqrt(5.0), atol=1e-10)
        assert_allclose(coords[:, 1], 0.0, atol=1e-10)

    def test_variance_matches_covariance_spectrum(self, rng):
        Z = rng.standard_normal((40, 5)) @ rng.standard_normal((5, 5))
        coords = metrics.pca2d(Z)
        top = np.linalg.eigvalsh(np.cov(Z, rowvar=False))[::-1][:2]
        assert_allclose(coords.var(axis=0, ddof=1), top, rtol=1e-9)

    def test_single_feature_is_padded(self):
        coords = metrics.pca2d(np.array([[1.0], [2.0], [3.0]]))
        assert coords.shape == (3, 2)
        assert_allclose(coords[:, 1], 0.0)

    def test_needs_two_rows(self):
        with pytest.raises(DataError):
            metrics.pca2d(np.zeros((1, 3)))
