import csv

import numpy as np
import pytest

from app.core.errors import BudgetError, ShapeError
from app.models.reward_model import FeatureMap
from app.schemas.world import Bump, FeatureMapSpec, RewardSpec
from app.services.reward_world import (
    FeedbackChannel,
    FeedbackDataset,
    RewardLandscape,
    feedback_noise_check,
    query_feedback,
    realizable_theta,
    remaining_budget,
    true_reward,
)


@pytest.fixture
def bump_landscape(model_1d):
    spec = RewardSpec(kind="gaussian_bump", bumps=[Bump(center=[1.5], width=0.5, height=0.8)])
    return RewardLandscape(spec, model_1d)


def test_bump_peak_value(bump_landscape):
    """Test that the bump reaches its height at its center."""
    assert true_reward(bump_landscape, np.array([1.5])) == pytest.approx(0.8)
    assert isinstance(bump_landscape(np.array([1.5])), float)


def test_reward_is_zero_outside_feasible_set(model_1d):
    """Test the feasibility mask on a bump placed in a low-density region."""
    spec = RewardSpec(kind="gaussian_bump", bumps=[Bump(center=[6.0], width=0.5, height=1.0)])
    landscape = RewardLandscape(spec, model_1d)
    assert landscape.unconstrained(np.array([[6.0]]))[0] == pytest.approx(1.0)
    assert landscape(np.array([6.0])) == 0.0


def test_multi_bump_takes_the_maximum(model_2d):
    """Test that overlapping bumps combine by maximum."""
    spec = RewardSpec(kind="multi_bump_hard_exploration", bumps=[
        Bump(center=[-2.0, 0.0], width=0.6, height=0.4),
        Bump(center=[2.0, 0.0], width=0.6, height=0.9),
    ])
    landscape = RewardLandscape(spec, model_2d)
    values = landscape(np.array([[-2.0, 0.0], [2.0, 0.0]]))
    assert np.allclose(values, [0.4, 0.9])


def test_linear_reward_stays_in_unit_interval(model_1d, rng):
    """Test that realizable weights give rewards in [0, 1] without clipping."""
    features = FeatureMapSpec(kind="random_fourier", input_dim=1, dim=16, bandwidth=0.7, seed=2)
    spec = RewardSpec(kind="linear_in_features", features=features, theta_seed=5)
    landscape = RewardLandscape(spec, model_1d)
    x = rng.uniform(-3.0, 3.0, size=(200, 1))
    raw = landscape.features(x) @ landscape.theta_star
    assert np.all(raw >= 0.0) and np.all(raw <= 1.0)
    assert np.allclose(landscape.unconstrained(x), raw)


def test_realizable_theta_is_seeded():
    """Test reproducible linear weights."""
    features = FeatureMap(FeatureMapSpec(input_dim=2, dim=8))
    assert np.array_equal(realizable_theta(features, 1), realizable_theta(features, 1))
    assert realizable_theta(features, 1).shape == (8,)


def test_reward_dimension_mismatch(model_2d):
    """Test that a 1-D reward cannot be built on a 2-D model."""
    spec = RewardSpec(kind="gaussian_bump", bumps=[Bump(center=[0.0], width=1.0)])
    with pytest.raises(ShapeError):
        RewardLandscape(spec, model_2d)


def test_reward_rejects_wrong_state_shape(bump_landscape):
    """Test the input shape check."""
    with pytest.raises(ShapeError):
        bump_landscape(np.zeros((3, 2)))


def test_query_feedback_counts_queries(bump_landscape):
    """Test budget accounting and noiseless answers."""
    channel = FeedbackChannel(noise_std=0.0, budget=5)
    xs = np.array([[1.5], [0.0], [-1.5]])
    ys = query_feedback(channel, bump_landscape, xs)
    assert np.allclose(ys, bump_landscape(xs))
    assert channel.queries_used == 3
    assert remaining_budget(channel) == 2


def test_query_over_budget_consumes_nothing(bump_landscape):
    """Test that an oversized batch raises BudgetError and leaves the counter alone."""
    channel = FeedbackChannel(noise_std=0.1, budget=2)
    with pytest.raises(BudgetError):
        query_feedback(channel, bump_landscape, np.zeros((3, 1)))
    assert channel.queries_used == 0


def test_feedback_noise_is_seeded(bump_landscape):
    """Test that the same seed gives the same noisy answers."""
    xs = np.array([[1.0], [1.2]])
    a = query_feedback(FeedbackChannel(0.1, 10, rng_seed=4), bump_landscape, xs)
    b = query_feedback(FeedbackChannel(0.1, 10, rng_seed=4), bump_landscape, xs)
    c = query_feedback(FeedbackChannel(0.1, 10, rng_seed=5), bump_landscape, xs)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)


def test_feedback_noise_check(bump_landscape):
    """Test the empirical mean and spread of repeated queries."""
    channel = FeedbackChannel(noise_std=0.1, budget=5000, rng_seed=0)
    mean, std, lag1 = feedback_noise_check(channel, bump_landscape, np.array([1.5]), 4000)
    assert mean == pytest.approx(0.8, abs=0.01)
    assert std == pytest.approx(0.1, abs=0.01)
    assert abs(lag1) < 0.1


def test_dataset_append_and_view():
    """Test iteration tags and prefix views."""
    data = FeedbackDataset(dim=1)
    data.append(np.array([[0.1], [0.2]]), np.array([1.0, 2.0]), 1)
    data.append(np.array([[0.3]]), np.array([3.0]), 2)
    assert len(data) == 3
    first = data.view(1)
    assert len(first) == 2
    assert np.allclose(first.xs[:, 0], [0.1, 0.2])
    assert np.allclose(data.ys, [1.0, 2.0, 3.0])
    assert data.sizes_by_iteration() == [(1, 2), (2, 3)]


def test_dataset_rejects_bad_appends():
    """Test label count and tag order checks."""
    data = FeedbackDataset(dim=1)
    with pytest.raises(ShapeError):
        data.append(np.zeros((2, 1)), np.zeros(3), 1)
    data.append(np.zeros((1, 1)), np.zeros(1), 2)
    with pytest.raises(ValueError):
        data.append(np.zeros((1, 1)), np.zeros(1), 1)


def test_dataset_csv(tmp_path):
    """Test the feedback CSV layout."""
    data = FeedbackDataset(dim=2)
    data.append(np.array([[0.5, -0.5]]), np.array([0.25]), 1)
    path = tmp_path / "feedback.csv"
    data.to_csv(path)
    with open(path) as f:
        rows = list(csv.reader(f))
    assert rows[0] == ["iteration", "x0", "x1", "y"]
    assert rows[1] == ["1", "0.5", "-0.5", "0.25"]
