import numpy as np
import pytest
from pydantic import ValidationError

from errors import EmptyInput, EmptyNeighborSet, EmptyUnseenSet, ShapeMismatch, ZeroVector
from inference import (
    SEEN, UNSEEN, GateConfig, RectifiedEmbedding, bias_gate, gzsl_predict,
    gzsl_predict_batch, nearest_unseen, plain_embeddings, rectify, rectify_all,
    tune_tau, zsl_predict, zsl_predict_batch,
)


@pytest.fixture
def seen_projected():
    return np.array([[1.0, 0.0], [0.0, 1.0]])


@pytest.fixture
def unseen_rectified():
    return {
        "u_right": RectifiedEmbedding("u_right", np.array([1.0, 0.1])),
        "u_up": RectifiedEmbedding("u_up", np.array([0.1, 1.0])),
    }


class TestRectify:

    def test_single_aligned_neighbour(self):
        entry = rectify([1.0, 0.0], [[2.0, 0.0]], k_nn=1, class_label="u")

        np.testing.assert_allclose(entry.vector, [3.0, 0.0])
        assert entry.class_label == "u"
        assert entry.source == UNSEEN

    def test_orthogonal_neighbour_changes_nothing(self):
        entry = rectify([1.0, 0.0], [[0.0, 1.0]], k_nn=1)

        np.testing.assert_allclose(entry.vector, [1.0, 0.0])

    def test_uses_the_euclidean_nearest(self):
        entry = rectify([1.0, 0.0], [[0.0, 5.0], [1.0, 1.0]], k_nn=1)

        cos = 1 / np.sqrt(2)
        np.testing.assert_allclose(entry.vector, [1.0 + cos, cos])

    def test_averages_over_k(self):
        entry = rectify([1.0, 0.0], [[2.0, 0.0], [0.0, 3.0]], k_nn=2)

        np.testing.assert_allclose(entry.vector, [2.0, 0.0])

    def test_aligned_and_orthogonal_pair(self):
        entry = rectify([1.0, 0.0], [[1.0, 0.0], [0.0, 1.0]], k_nn=2)

        np.testing.assert_allclose(entry.vector, [1.5, 0.0], rtol=0, atol=1e-12)

    def test_duplicate_neighbour_doubles_the_target(self):
        entry = rectify([0.3, -0.4], [[0.3, -0.4], [5.0, 5.0]], k_nn=1)

        np.testing.assert_allclose(entry.vector, [0.6, -0.8], rtol=0, atol=1e-12)

    def test_not_enough_neighbours(self):
        with pytest.raises(EmptyNeighborSet):
            rectify([1.0, 0.0], [[2.0, 0.0]], k_nn=2)

    def test_zero_target(self):
        with pytest.raises(ZeroVector):
            rectify([0.0, 0.0], [[2.0, 0.0]], k_nn=1)

    def test_excluded_row_is_skipped(self):
        entry = rectify([1.0, 0.0], [[1.0, 0.0], [0.0, 1.0]], k_nn=1, exclude=0)

        np.testing.assert_allclose(entry.vector, [1.0, 0.0])


class TestRectifyAll:

    def test_seen_labels_leave_themselves_out(self, seen_projected):
        projected = {"s_a": seen_projected[0], "s_b": seen_projected[1], "u": np.array([1.0, 1.0])}
        seen = {"s_a": seen_projected[0], "s_b": seen_projected[1]}

        result = rectify_all(projected, seen, k_nn=1)

        assert result["s_a"].source == SEEN
        np.testing.assert_allclose(result["s_a"].vector, [1.0, 0.0])
        assert result["u"].source == UNSEEN

    def test_plain_embeddings_keep_the_vectors(self):
        result = plain_embeddings({"u": [1.0, 2.0]})

        np.testing.assert_array_equal(result["u"].vector, [1.0, 2.0])


class TestZslPredict:

    def test_top_seen_class_picks_the_closest_unseen(self, seen_projected, unseen_rectified):
        assert zsl_predict([0.9, 0.1], seen_projected, unseen_rectified) == "u_right"
        assert zsl_predict([0.2, 0.8], seen_projected, unseen_rectified) == "u_up"

    def test_tie_goes_to_the_smallest_label(self, seen_projected):
        unseen = {
            "b": RectifiedEmbedding("b", np.array([1.0, 0.0])),
            "a": RectifiedEmbedding("a", np.array([2.0, 0.0])),
        }

        assert zsl_predict([0.9, 0.1], seen_projected, unseen) == "a"

    def test_unseen_scale_does_not_matter(self, seen_projected, unseen_rectified):
        scaled = {
            label: RectifiedEmbedding(label, entry.vector * 40.0)
            for label, entry in unseen_rectified.items()
        }

        for probs in ([0.9, 0.1], [0.3, 0.7]):
            assert (zsl_predict(probs, seen_projected, scaled)
                    == zsl_predict(probs, seen_projected, unseen_rectified))

    def test_soft_query_blends_seen_projections(self, seen_projected, unseen_rectified):
        unseen = dict(unseen_rectified, u_diag=RectifiedEmbedding("u_diag", np.array([1.0, 1.0])))

        assert zsl_predict([0.55, 0.45], seen_projected, unseen, soft_query=True) == "u_diag"
        assert zsl_predict([0.55, 0.45], seen_projected, unseen) == "u_right"

    def test_matches_linear_scan(self):
        rng = np.random.default_rng(0)
        seen = rng.standard_normal((4, 3))
        unseen = {f"u{i}": RectifiedEmbedding(f"u{i}", rng.standard_normal(3)) for i in range(5)}
        probs = rng.dirichlet(np.ones(4), size=1000)

        predictions = zsl_predict_batch(probs, seen, unseen)

        for row, predicted in zip(probs, predictions):
            query = seen[np.argmax(row)]
            cosines = {
                label: query @ e.vector / (np.linalg.norm(query) * np.linalg.norm(e.vector))
                for label, e in unseen.items()
            }
            assert predicted == max(sorted(cosines), key=cosines.get)

    def test_empty_unseen_set(self, seen_projected):
        with pytest.raises(EmptyUnseenSet):
            zsl_predict([0.5, 0.5], seen_projected, {})

    def test_zero_query(self, unseen_rectified):
        with pytest.raises(ZeroVector):
            zsl_predict([1.0, 0.0], np.array([[0.0, 0.0], [1.0, 0.0]]), unseen_rectified)


class TestNearestUnseen:

    def test_query_outside_the_seen_span(self, unseen_rectified):
        unseen = dict(unseen_rectified, u_down=RectifiedEmbedding("u_down", np.array([0.2, -1.0])))

        assert nearest_unseen([[0.1, -3.0], [5.0, 0.4]], unseen) == ["u_down", "u_right"]

    def test_agrees_with_seen_queries(self, seen_projected, unseen_rectified):
        probs = np.random.default_rng(5).dirichlet(np.ones(2), size=30)
        queries = seen_projected[np.argmax(probs, axis=1)]

        assert nearest_unseen(queries, unseen_rectified) == zsl_predict_batch(
            probs, seen_projected, unseen_rectified)

    def test_query_width_must_match(self, unseen_rectified):
        with pytest.raises(ShapeMismatch):
            nearest_unseen([[1.0, 0.0, 0.0]], unseen_rectified)

    def test_zero_query(self, unseen_rectified):
        with pytest.raises(ZeroVector):
            nearest_unseen([[0.0, 0.0]], unseen_rectified)

    def test_empty_unseen_set(self):
        with pytest.raises(EmptyUnseenSet):
            nearest_unseen([[1.0, 0.0]], {})


class TestGate:

    def test_threshold_is_inclusive(self):
        assert bias_gate([0.5, 0.5], GateConfig(tau=0.5)) == SEEN
        assert bias_gate([0.4, 0.6], GateConfig(tau=0.7)) == UNSEEN

    @pytest.mark.parametrize("tau", [0.0, 1.0, -0.2])
    def test_tau_must_be_inside_the_unit_interval(self, tau):
        with pytest.raises(ValidationError):
            GateConfig(tau=tau)


class TestGzslPredict:

    def test_confident_row_stays_seen(self, seen_projected, unseen_rectified):
        route = gzsl_predict([0.9, 0.1], GateConfig(tau=0.5), ["s_a", "s_b"],
                             seen_projected, unseen_rectified)

        assert route == (SEEN, "s_a")

    def test_unsure_row_goes_unseen(self, seen_projected, unseen_rectified):
        route = gzsl_predict([0.3, 0.7], GateConfig(tau=0.8), ["s_a", "s_b"],
                             seen_projected, unseen_rectified)

        assert route == (UNSEEN, "u_up")

    def test_threshold_near_one_reduces_to_zsl(self, seen_projected, unseen_rectified):
        probs = np.random.default_rng(2).dirichlet(np.ones(2), size=50)

        routes = gzsl_predict_batch(probs, GateConfig(tau=1 - 1e-12), ["s_a", "s_b"],
                                    seen_projected, unseen_rectified)

        assert [label for _, label in routes] == zsl_predict_batch(probs, seen_projected, unseen_rectified)
        assert all(route == UNSEEN for route, _ in routes)

    def test_tiny_threshold_never_routes_unseen(self, seen_projected, unseen_rectified):
        probs = np.random.default_rng(3).dirichlet(np.ones(2), size=50)

        routes = gzsl_predict_batch(probs, GateConfig(tau=1e-9), ["s_a", "s_b"],
                                    seen_projected, unseen_rectified)

        assert all(route == SEEN for route, _ in routes)

    def test_rows_keep_their_order(self, seen_projected, unseen_rectified):
        probs = np.array([[0.3, 0.7], [0.95, 0.05], [0.6, 0.4]])

        routes = gzsl_predict_batch(probs, GateConfig(tau=0.9), ["s_a", "s_b"],
                                    seen_projected, unseen_rectified)

        assert routes == [(UNSEEN, "u_up"), (SEEN, "s_a"), (UNSEEN, "u_right")]

    def test_given_queries_replace_the_seen_query(self, seen_projected, unseen_rectified):
        probs = np.array([[0.3, 0.7], [0.95, 0.05], [0.6, 0.4]])
        queries = np.array([[1.0, 0.0], [0.0, 1.0], [0.0, 2.0]])

        routes = gzsl_predict_batch(probs, GateConfig(tau=0.9), ["s_a", "s_b"],
                                    seen_projected, unseen_rectified, queries=queries)

        assert routes == [(UNSEEN, "u_right"), (SEEN, "s_a"), (UNSEEN, "u_up")]


class TestTuneTau:

    def test_quantile_of_held_out_confidences(self):
        values = np.linspace(0.1, 1.0, 10)

        assert tune_tau(values, 0.9) == pytest.approx(np.quantile(values, 0.1))

    def test_stays_inside_the_unit_interval(self):
        assert tune_tau([1.0, 1.0], 0.5) == pytest.approx(1 - 1e-6)

    def test_empty_holdout(self):
        with pytest.raises(EmptyInput):
            tune_tau([], 0.9)
