import math

import numpy as np
import pytest
from scipy.spatial.distance import pdist
from scipy.special import logsumexp

from app.core.errors import DegenerateDensityError, DomainError, ShapeError
from app.schemas.experiment import GridSpec
from app.schemas.world import Bump, RewardSpec
from app.services.eval_oracle import (
    DriftCheck,
    FeynmanKacProbe,
    GridDensity,
    cesaro_regret,
    comparator_optimum,
    comparator_value_mc,
    diversity,
    empirical_density,
    estimate_value,
    feynman_kac_value,
    grid_centers,
    grid_target_density,
    grid_value,
    kl_grid,
    pretrained_density,
    regret_curve,
    tv_distance,
)
from app.services.reward_world import RewardLandscape
from app.services.sde_engine import DriftStack

GRID = GridSpec(lower=[-4.0], upper=[4.0], cells=[80])


@pytest.fixture
def landscape(model_1d):
    spec = RewardSpec(kind="gaussian_bump", bumps=[Bump(center=[1.5], width=0.5, height=1.0)])
    return RewardLandscape(spec, model_1d)


@pytest.fixture
def pre(model_1d):
    return pretrained_density(model_1d, GRID)


def test_grid_centers():
    """Test cell centers in one and two dimensions."""
    assert np.allclose(grid_centers(GridSpec(lower=[-1.0], upper=[1.0], cells=[4]))[:, 0],
                       [-0.75, -0.25, 0.25, 0.75])
    centers = grid_centers(GridSpec(lower=[0.0, 0.0], upper=[2.0, 3.0], cells=[2, 3]))
    assert centers.shape == (6, 2)
    assert np.allclose(centers[1], [0.5, 1.5])


def test_pretrained_density_is_normalized(pre, model_1d):
    """Test the discretized pre-trained density."""
    assert pre.probs.shape == (80,)
    assert pre.probs.sum() == pytest.approx(1.0)
    with pytest.raises(ShapeError):
        pretrained_density(model_1d, GridSpec(lower=[0.0, 0.0], upper=[1.0, 1.0], cells=[2, 2]))


def test_grid_density_shape_check():
    """Test that probabilities must match the grid."""
    with pytest.raises(ShapeError):
        GridDensity(GRID, np.ones(10))


def test_empirical_density():
    """Test the histogram and the out-of-range fraction."""
    grid = GridSpec(lower=[0.0], upper=[4.0], cells=[4])
    density = empirical_density(np.array([0.5, 0.6, 2.5, 9.0]), grid)
    assert np.allclose(density.probs, [2 / 3, 0.0, 1 / 3, 0.0])
    assert density.out_of_range_mass == pytest.approx(0.25)
    with pytest.raises(DegenerateDensityError):
        empirical_density(np.array([10.0, 11.0]), grid)


def test_tv_and_kl():
    """Test TV and KL on hand-made densities."""
    grid = GridSpec(lower=[0.0], upper=[2.0], cells=[2])
    p = GridDensity(grid, np.array([1.0, 0.0]))
    q = GridDensity(grid, np.array([0.0, 1.0]))
    r = GridDensity(grid, np.array([0.25, 0.75]))
    assert tv_distance(p, p) == 0.0
    assert tv_distance(p, q) == 1.0
    assert kl_grid(r, r) < 1e-9
    expected = 0.5 * math.log(0.5 / 0.25) + 0.5 * math.log(0.5 / 0.75)
    assert kl_grid(GridDensity(grid, np.array([0.5, 0.5])), r) == pytest.approx(expected, abs=1e-9)
    with pytest.raises(ShapeError):
        tv_distance(p, GridDensity(GRID, np.full(80, 1 / 80)))


def test_two_cell_target_and_distance():
    """Test the two-cell product form (0.269, 0.731) and its TV of 0.231 to uniform."""
    grid = GridSpec(lower=[0.0], upper=[2.0], cells=[2])
    uniform = GridDensity(grid, np.array([0.5, 0.5]))
    target = grid_target_density(np.array([0.0, 2.0]), uniform, uniform, 1.0, 1.0)
    e = math.e
    assert np.allclose(target.probs, [1.0 / (1.0 + e), e / (1.0 + e)])
    assert target.probs == pytest.approx([0.269, 0.731], abs=5e-4)
    assert tv_distance(target, uniform) == pytest.approx(0.231, abs=5e-4)


def test_target_without_previous_weight_is_tilted_pre(pre, landscape):
    """Test that beta = 0 gives exp(r / alpha) p_pre."""
    alpha = 0.2
    target = grid_target_density(landscape, pre, pre, alpha, 0.0)
    rewards = landscape(grid_centers(GRID))
    expected = pre.probs * np.exp(rewards / alpha)
    assert np.allclose(target.probs, expected / expected.sum())


def test_target_schedule_fixed_point(pre, landscape):
    """Test that the theory KL schedule keeps the tilted density when the reward is unchanged."""
    alpha = 0.1
    first = grid_target_density(landscape, pre, pre, alpha, 0.0)
    second = grid_target_density(landscape, first, pre, alpha, alpha)
    third = grid_target_density(landscape, second, pre, alpha, 2.0 * alpha)
    assert np.allclose(second.probs, first.probs, atol=1e-12)
    assert np.allclose(third.probs, first.probs, atol=1e-12)


def test_target_input_checks(pre, landscape):
    """Test domain, alignment and degeneracy checks."""
    with pytest.raises(DomainError):
        grid_target_density(landscape, pre, pre, 0.0, 0.0)
    empty = GridDensity(GRID, np.zeros(80))
    with pytest.raises(DegenerateDensityError):
        grid_target_density(landscape, empty, empty, 0.1, 0.0)
    other = GridDensity(GridSpec(lower=[-4.0], upper=[4.0], cells=[40]), np.full(40, 1 / 40))
    with pytest.raises(ShapeError):
        grid_target_density(landscape, other, pre, 0.1, 0.1)


def test_comparator_value_is_log_partition(pre, landscape):
    """Test max J_alpha = alpha log sum p_pre exp(r / alpha)."""
    alpha = 0.05
    optimum, value = comparator_optimum(landscape, pre, alpha)
    rewards = landscape(grid_centers(GRID))
    assert value == pytest.approx(alpha * logsumexp(rewards / alpha, b=pre.probs), rel=1e-8)
    assert value >= grid_value(pre, rewards, pre, alpha)
    uniform = GridDensity(GRID, np.full(80, 1 / 80))
    assert value >= grid_value(uniform, rewards, pre, alpha)
    assert optimum.probs.sum() == pytest.approx(1.0)
    with pytest.raises(DomainError):
        comparator_optimum(landscape, pre, 0.0)


def test_comparator_value_mc(landscape):
    """Test the sample version of the log partition."""
    samples = np.array([[1.5], [0.0], [-1.5]])
    rewards = landscape(samples)
    alpha = 0.5
    expected = alpha * math.log(np.mean(np.exp(rewards / alpha)))
    assert comparator_value_mc(landscape, samples, alpha) == pytest.approx(expected)
    with pytest.raises(DomainError):
        comparator_value_mc(landscape, samples, 0.0)


def test_diversity(rng):
    """Test the sorted 1-D shortcut and the chunked path against pdist."""
    one = rng.standard_normal(300)
    assert diversity(one) == pytest.approx(pdist(one[:, None]).mean())
    two = rng.standard_normal((50, 2))
    assert diversity(two) == pytest.approx(pdist(two).mean())
    with pytest.raises(DomainError):
        diversity(np.zeros((1, 2)))


def test_diversity_of_standard_normal(rng):
    """Test that 10^4 standard-normal samples have mean pairwise distance 2 / sqrt(pi) within 2%."""
    assert diversity(rng.standard_normal(10_000)) == pytest.approx(2.0 / math.sqrt(math.pi), rel=0.02)


def test_estimate_value_with_grid(pre, landscape, model_1d):
    """Test the report fields when a grid is available."""
    samples = np.array([[1.5], [1.4], [-1.5], [0.1]])
    report = estimate_value(samples, landscape, pre, 0.1, kl_pathwise=3.0, target=pre)
    assert report.mean_reward == pytest.approx(float(np.mean(landscape(samples))))
    assert report.J_alpha == pytest.approx(report.mean_reward - 0.1 * report.kl_grid)
    assert report.kl_pathwise == 3.0
    assert report.tv_to_target is not None
    assert report.frac_infeasible == 0.0


def test_estimate_value_without_grid(landscape):
    """Test the pathwise fallback and the missing-KL error."""
    samples = np.array([[1.5], [12.0]])
    report = estimate_value(samples, landscape, None, 0.1, kl_pathwise=2.0)
    assert report.kl_grid is None
    assert report.J_alpha == pytest.approx(report.mean_reward - 0.2)
    assert report.frac_infeasible == 0.5
    with pytest.raises(DomainError):
        estimate_value(samples, landscape, None, 0.1)
    with pytest.raises(DomainError):
        estimate_value(samples, landscape, None, -1.0, kl_pathwise=1.0)


def test_cesaro_regret():
    """Test running regret and the statistical-error term."""
    points = cesaro_regret([1.0, 2.0, 3.0], 4.0, [0.5, 0.5, 0.5])
    assert [p.regret for p in points] == [3.0, 2.5, 2.0]
    assert [p.statistical_error for p in points] == [1.0, 1.0, 1.0]
    assert cesaro_regret([1.0], 1.0)[0].statistical_error is None


def test_feynman_kac_probe_weights():
    """Test that both KL weights cannot vanish."""
    with pytest.raises(DomainError):
        FeynmanKacProbe([], 0.0, 0.0)
    assert FeynmanKacProbe([], 0.1, 0.3).gamma == pytest.approx(0.4)


def test_feynman_kac_value_at_final_time(model_1d, schedule, landscape):
    """Test that v_T(x) / gamma equals the terminal reward over gamma."""
    x = np.array([1.2])
    probe = FeynmanKacProbe([(schedule.n_steps, x)], 0.1, 0.1, n_samples=16)
    estimate = feynman_kac_value(probe, landscape, DriftStack(model_1d), schedule)[0]
    assert estimate.log_value == pytest.approx(landscape(x) / 0.2, rel=1e-12)
    assert estimate.effective_samples == pytest.approx(16.0)
    assert not estimate.low_precision


def test_feynman_kac_value_of_zero_reward(model_1d, schedule):
    """Test that a zero terminal reward under the pre-trained drift gives value one."""
    probe = FeynmanKacProbe([(3, np.array([0.5]))], 0.1, 0.0, n_samples=32)
    estimate = feynman_kac_value(probe, lambda x: np.zeros(x.shape[0]), DriftStack(model_1d), schedule)[0]
    assert estimate.value == pytest.approx(1.0)
    assert estimate.standard_error == pytest.approx(0.0, abs=1e-12)
    assert estimate.t == pytest.approx(schedule.grid()[3])


def test_drift_check_deviations():
    """Test the deviation summaries."""
    check = DriftCheck([], np.array([[0.0, 0.0], [1.0, 1.0]]), np.array([[3.0, 4.0], [1.0, 1.0]]))
    assert np.allclose(check.deviations, [5.0, 0.0])
    assert check.mean_absolute_deviation == pytest.approx(7.0 / 4.0)


def test_regret_curve_of_run(tiny_run):
    """Test the regret curve of a two-iteration run against its reports."""
    points = regret_curve(tiny_run, tiny_run.comparator)
    values = [it.report.J_alpha for it in tiny_run.iterations]
    assert [p.iteration for p in points] == [1, 2]
    assert points[-1].regret == pytest.approx(tiny_run.comparator - np.mean(values))
    assert points[0].statistical_error == pytest.approx(2.0 * tiny_run.iterations[0].mean_bonus)
