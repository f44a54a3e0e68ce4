from itertools import product

import numpy as np
import pandas as pd
import pytest

from clustering import (
    Centroid, ClusterModel, VisualSemanticPoint, assign, cluster_histogram,
    kmeans_fit, kmeans_objective, purity,
)
from errors import ConfigError, EmptyInput, OutOfRange, ShapeMismatch, TooFewPoints


@pytest.fixture
def two_blobs():
    return np.array([
        [0.0, 0.0], [0.1, 0.0], [0.0, 0.1],
        [10.0, 10.0], [10.1, 10.0], [10.0, 10.2],
    ])


def _best_two_partition(points):
    best = np.inf
    for bits in product([0, 1], repeat=len(points)):
        labels = np.array(bits)
        if labels.min() == labels.max():
            continue
        centers = np.array([points[labels == j].mean(axis=0) for j in (0, 1)])
        best = min(best, kmeans_objective(points, centers, labels))
    return best


class TestKmeansFit:

    def test_k_equals_n_recovers_the_points(self):
        points = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 5.0], [3.0, 3.0]])

        model = kmeans_fit(points, 4, seed=0)

        assert sorted(map(tuple, model.vectors)) == sorted(map(tuple, points))
        assert model.objective_trace[-1] == pytest.approx(0.0)

    def test_single_cluster_is_the_mean(self, two_blobs):
        model = kmeans_fit(two_blobs, 1)

        np.testing.assert_allclose(model.vectors[0], two_blobs.mean(axis=0))

    @pytest.mark.parametrize("mode", ["plusplus", "forgy"])
    def test_reaches_the_exhaustive_optimum(self, two_blobs, mode):
        model = kmeans_fit(two_blobs, 2, seed=1, mode=mode, n_init=5)

        assert model.objective_trace[-1] == pytest.approx(_best_two_partition(two_blobs))

    def test_objective_never_rises(self):
        points = np.random.default_rng(4).standard_normal((60, 3))

        trace = kmeans_fit(points, 5, seed=2).objective_trace

        assert all(b <= a + 1e-9 for a, b in zip(trace, trace[1:]))

    def test_same_seed_same_model(self):
        points = np.random.default_rng(0).standard_normal((40, 2))

        first = kmeans_fit(points, 4, seed=9, n_init=3)
        second = kmeans_fit(points, 4, seed=9, n_init=3)

        np.testing.assert_array_equal(first.vectors, second.vectors)

    def test_identical_points_are_degenerate(self):
        points = np.ones((5, 2))

        model = kmeans_fit(points, 3)

        assert model.degenerate
        assert model.k == 3
        np.testing.assert_array_equal(model.vectors, np.ones((3, 2)))

    def test_too_few_points(self):
        with pytest.raises(TooFewPoints):
            kmeans_fit(np.zeros((2, 2)), 3)

    def test_k_below_one(self):
        with pytest.raises(OutOfRange):
            kmeans_fit(np.zeros((2, 2)), 0)

    def test_unknown_mode_names_the_config_key(self, two_blobs):
        with pytest.raises(ConfigError) as e:
            kmeans_fit(two_blobs, 2, mode="kmeans||")
        assert e.value.key == "kmeans_init"

    def test_random_assignment_skips_lloyd_steps(self):
        points = np.random.default_rng(3).standard_normal((12, 2))

        model = kmeans_fit(points, 3, seed=0, mode="random_assign")

        assert len(model.objective_trace) == 1
        assert model.k == 3

    def test_standardized_centroids_live_in_the_original_space(self):
        points = np.array([[0.0, 0.0], [0.0, 1.0], [0.0, 2.0], [1000.0, 0.0], [1000.0, 1.0], [1000.0, 2.0]])

        model = kmeans_fit(points, 2, seed=0, standardize=True, n_init=3)

        expected = sorted([(0.0, 1.0), (1000.0, 1.0)])
        assert sorted(map(tuple, np.round(model.vectors, 9))) == expected


class TestClusterModel:

    def test_centroids_are_indexed_rows(self):
        model = ClusterModel(np.array([[0.0, 1.0], [2.0, 3.0]]))

        centroids = model.centroids

        assert [c.index for c in centroids] == [0, 1]
        np.testing.assert_array_equal(centroids[1].vector, [2.0, 3.0])
        assert isinstance(centroids[0], Centroid)

    def test_copy_is_independent(self):
        model = ClusterModel(np.zeros((2, 2)))

        clone = model.copy()
        clone.vectors[0, 0] = 1.0

        assert model.vectors[0, 0] == 0.0


class TestAssign:

    def test_point_on_a_centroid(self):
        model = ClusterModel(np.array([[0.0, 0.0], [5.0, 5.0], [1.0, 1.0]]))

        assert assign(model, [1.0, 1.0]) == (2, 0.0)

    def test_tie_goes_to_lowest_index(self):
        model = ClusterModel(np.array([[-1.0], [1.0]]))

        assert assign(model, [0.0])[0] == 0

    def test_matches_linear_scan(self):
        rng = np.random.default_rng(8)
        model = ClusterModel(rng.standard_normal((6, 4)))

        for point in rng.standard_normal((1000, 4)):
            distances = [np.linalg.norm(point - c) for c in model.vectors]
            index, distance = assign(model, point)
            assert index == int(np.argmin(distances))
            assert distance == pytest.approx(min(distances))

    def test_joined_point(self):
        point = VisualSemanticPoint(np.array([1.0, 2.0]), np.array([3.0]))
        model = ClusterModel(np.array([[1.0, 2.0, 3.0], [0.0, 0.0, 0.0]]))

        assert assign(model, point.joined)[0] == 0

    def test_width_mismatch(self):
        with pytest.raises(ShapeMismatch):
            assign(ClusterModel(np.zeros((2, 3))), [1.0, 2.0])


class TestPurity:

    def test_pure_clusters(self):
        report = purity([0, 0, 1, 1], ["a", "a", "b", "b"], 2)

        assert report.purity == 1.0
        assert report.n_points == 4

    def test_one_cluster_for_two_balanced_classes(self):
        assert purity([0, 0, 0, 0], ["a", "b", "a", "b"], 1).purity == 0.5

    def test_mixed_cluster_takes_its_majority(self):
        assert purity([0, 0, 0, 1], ["a", "a", "b", "b"], 2).purity == 0.75

    def test_two_mixed_clusters(self):
        assert purity([0, 0, 1, 1], ["a", "b", "a", "b"], 2).purity == 0.5

    def test_numerator_is_the_sum_of_cluster_majorities(self):
        rng = np.random.default_rng(4)
        labels = rng.choice(["a", "b", "c"], size=60)
        assignments = rng.integers(0, 5, size=60)

        report = purity(assignments, labels, 5)

        assert report.histogram.sum(axis=1).to_dict() == pd.Series(labels).value_counts().to_dict()
        assert report.histogram.max(axis=0).sum() == round(report.purity * 60)

    def test_empty_cluster_counts_nothing(self):
        report = purity([0, 0, 2], ["a", "b", "b"], 3)

        assert report.purity == pytest.approx(2 / 3)
        assert list(report.histogram.columns) == [0, 1, 2]

    def test_empty_input(self):
        with pytest.raises(EmptyInput):
            purity([], [], 2)

    def test_index_out_of_range(self):
        with pytest.raises(OutOfRange):
            purity([0, 3], ["a", "b"], 2)

    def test_length_mismatch(self):
        with pytest.raises(ShapeMismatch):
            purity([0, 1], ["a"], 2)


class TestClusterHistogram:

    def test_rows_are_percentages(self):
        hist = cluster_histogram([0, 1, 1, 1], ["a", "a", "b", "b"], 2)

        assert hist.loc["a"].tolist() == [50.0, 50.0]
        assert hist.loc["b"].tolist() == [0.0, 100.0]

    def test_three_to_one_split(self):
        hist = cluster_histogram([0, 0, 0, 1], ["a"] * 4, 2)

        assert hist.loc["a"].tolist() == [75.0, 25.0]

    def test_rows_sum_to_one_hundred(self):
        rng = np.random.default_rng(1)
        labels = rng.choice(["a", "b", "c"], size=50)
        assignments = rng.integers(0, 4, size=50)

        hist = cluster_histogram(assignments, labels, 4)

        np.testing.assert_allclose(hist.sum(axis=1), 100.0)
