import math

import numpy as np
import pytest
from pydantic import ValidationError

from clustering import ClusterModel
from errors import InvalidProbability, OutOfRange, ShapeMismatch
from reinforce import (
    RLConfig, centroid_update, classification_score, format_schedule,
    match_probability, parse_schedule, reinforce_step, reward, schedule_alpha,
)


class TestRLConfig:

    def test_defaults(self):
        config = RLConfig()

        assert config.total_iterations == 10000
        assert config.schedule == ((0, 0.1), (1000, 0.01), (2000, 0.001))

    def test_schedule_from_text(self):
        config = RLConfig(schedule="0:0.5, 10:0.05")

        assert config.schedule == ((0, 0.5), (10, 0.05))

    def test_schedule_text_round_trip(self):
        schedule = ((0, 0.1), (1000, 0.01))

        assert parse_schedule(format_schedule(schedule)) == schedule

    @pytest.mark.parametrize("schedule", ["5:0.1", "0:0.1,0:0.2", "0:0.1,10:0", "0:-1", "0.1"])
    def test_invalid_schedule(self, schedule):
        with pytest.raises(ValidationError):
            RLConfig(schedule=schedule)

    def test_unknown_field(self):
        with pytest.raises(ValidationError):
            RLConfig(epochs=3)


class TestScheduleAlpha:

    @pytest.mark.parametrize("iteration,expected", [
        (0, 0.1), (999, 0.1), (1000, 0.01), (1999, 0.01), (2000, 0.001), (9999, 0.001),
    ])
    def test_piecewise_constant(self, iteration, expected):
        assert schedule_alpha(RLConfig(), iteration) == expected

    def test_past_the_last_iteration(self):
        with pytest.raises(OutOfRange):
            schedule_alpha(RLConfig(total_iterations=10), 10)


class TestRewardAndScore:

    def test_correct_top_class(self):
        assert reward([0.2, 0.7, 0.1], 1) == 1

    def test_wrong_top_class(self):
        assert reward([0.2, 0.7, 0.1], 0) == -1

    def test_tie_resolves_to_lowest_index(self):
        assert reward([0.5, 0.5], 0) == 1
        assert reward([0.5, 0.5], 1) == -1

    def test_score_is_the_true_class_probability(self):
        assert classification_score([0.2, 0.7, 0.1], 2) == pytest.approx(0.1)

    def test_rejects_non_distributions(self):
        with pytest.raises(InvalidProbability):
            reward([0.9, 0.9], 0)


class TestMatchProbability:

    def test_zero_weight(self):
        assert match_probability(0.0) == pytest.approx(1.0)

    def test_closest_centroid(self):
        expected = 2 * (1 - 1 / (1 + math.exp(-1)))

        assert match_probability(1.0) == pytest.approx(expected, abs=1e-12)
        assert match_probability(1.0) == pytest.approx(0.5379, abs=1e-4)

    def test_stays_in_the_unit_interval(self):
        for eta in np.linspace(0, 1, 11):
            assert 0 <= match_probability(eta) <= 1


class TestCentroidUpdate:

    def test_zero_when_psi_is_the_centroid(self):
        delta = centroid_update(0.1, 1, 0.9, 0.5, [1.0, 2.0], [1.0, 2.0])

        np.testing.assert_array_equal(delta, [0.0, 0.0])

    def test_zero_when_score_equals_match_probability(self):
        delta = centroid_update(0.1, -1, 0.5, 0.5, [1.0, 2.0], [0.0, 0.0])

        np.testing.assert_array_equal(delta, [0.0, 0.0])

    def test_hand_computed(self):
        delta = centroid_update(0.1, 1, 0.9, 0.5, [2.0, 0.0], [0.0, 0.0])

        np.testing.assert_allclose(delta, [0.08, 0.0])

    def test_direction_follows_the_sign(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            psi, c = rng.standard_normal(3), rng.standard_normal(3)
            r = int(rng.choice([-1, 1]))
            z, p = rng.uniform(0, 1, size=2)
            delta = centroid_update(0.05, r, z, p, psi, c)

            alignment = float(delta @ (psi - c))
            assert np.sign(alignment) == np.sign(r * (z - p)) or alignment == 0

    def test_magnitude_is_bounded(self):
        rng = np.random.default_rng(1)
        for _ in range(200):
            psi, c = rng.standard_normal(4), rng.standard_normal(4)
            z, p = rng.uniform(0, 1, size=2)
            alpha = rng.uniform(0, 0.2)
            delta = centroid_update(alpha, 1, z, p, psi, c)

            assert np.linalg.norm(delta) <= alpha * np.linalg.norm(psi - c) + 1e-12

    def test_invalid_reward(self):
        with pytest.raises(OutOfRange):
            centroid_update(0.1, 0, 0.5, 0.5, [1.0], [0.0])

    def test_negative_alpha(self):
        with pytest.raises(OutOfRange):
            centroid_update(-0.1, 1, 0.5, 0.5, [1.0], [0.0])

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            centroid_update(0.1, 1, 0.5, 0.5, [1.0, 2.0], [0.0])


class TestReinforceStep:

    def test_only_the_closest_centroid_moves(self):
        model = ClusterModel(np.array([[0.0, 0.0], [10.0, 10.0], [-10.0, 5.0]]))
        before = model.vectors.copy()

        step = reinforce_step(model, np.array([1.0, 1.0]), [0.9, 0.1], 0, alpha=0.1)

        assert step.cluster == 0
        assert step.reward == 1
        np.testing.assert_array_equal(model.vectors[1:], before[1:])
        np.testing.assert_allclose(model.vectors[0], before[0] + step.delta)

    def test_confident_correct_prediction_pulls_the_centroid_closer(self):
        model = ClusterModel(np.array([[0.0, 0.0], [10.0, 10.0]]))
        psi = np.array([1.0, 0.0])

        reinforce_step(model, psi, [0.95, 0.05], 0, alpha=0.1)

        assert np.linalg.norm(psi - model.vectors[0]) < 1.0

    def test_match_probability_of_the_closest_centroid(self):
        model = ClusterModel(np.array([[0.0], [4.0]]))

        step = reinforce_step(model, np.array([1.0]), [0.5, 0.5], 0, alpha=0.1)

        assert step.p == pytest.approx(match_probability(1.0))
