import math

import numpy as np
import pytest

from app.core.config import parse_experiment
from app.core.errors import BudgetError
from app.models.pretrained import PretrainedModel
from app.schemas.experiment import GREEDY_ALPHA_FLOOR, SeedConfig
from app.services.online_loop import (
    beta_for,
    beta_schedule,
    build_world,
    run_method,
    run_seiko,
)

THREE_D_CONFIG = """\
name: no-grid
world:
  gmm:
    weights: [0.5, 0.5]
    means: [[-1.5, 0.0, 0.0], [1.5, 0.0, 0.0]]
    covariances:
      - [[0.3, 0.0, 0.0], [0.0, 0.3, 0.0], [0.0, 0.0, 0.3]]
      - [[0.3, 0.0, 0.0], [0.0, 0.3, 0.0], [0.0, 0.0, 0.3]]
  schedule:
    n_steps: 10
  reward:
    kind: gaussian_bump
    bumps:
      - center: [1.5, 0.0, 0.0]
        width: 0.7
  budget: 20
method:
  K: 1
  batch_sizes: [20]
  alpha: 0.1
  features:
    input_dim: 3
    dim: 16
  drift:
    hidden_widths: [8]
    time_embedding_dim: 2
planner:
  n_paths_per_step: 8
  n_opt_steps: 2
evaluation:
  n_samples: 100
  trajectory_dump: 0
"""


def with_method(cfg, **updates):
    return cfg.model_copy(update={"method": cfg.method.model_copy(update=updates)})


def test_beta_schedule():
    """Test the previous-iterate weight alpha (i - 1)."""
    assert beta_schedule(0.01, 1) == 0.0
    assert beta_schedule(0.01, 3) == pytest.approx(0.02)
    with pytest.raises(ValueError):
        beta_schedule(0.01, 0)


def test_beta_rules(tiny_config):
    """Test the constant and custom beta rules."""
    constant = with_method(tiny_config, beta_rule="constant", beta=0.7)
    assert beta_for(constant, 2) == 0.7
    custom = with_method(tiny_config, beta_rule="custom", beta_values=[0.0, 0.3])
    assert beta_for(custom, 2) == 0.3
    assert beta_for(tiny_config, 2) == pytest.approx(0.1)


def test_run_uses_the_whole_budget(tiny_run):
    """Test batch accounting, dataset growth and stack depth per iteration."""
    assert len(tiny_run.iterations) == 2
    assert tiny_run.queries_used == 40
    assert tiny_run.dataset.sizes_by_iteration() == [(1, 20), (2, 40)]
    for i, it in enumerate(tiny_run.iterations, start=1):
        assert it.iteration == i
        assert it.dataset_size == 20 * i
        assert it.stack.depth == i
        assert it.stack.active_trainable is None
        assert it.samples.shape == (20, 1)
        assert it.eval_samples.shape == (200, 1)
        assert len(it.trajectories) == 2
    assert tiny_run.final_stack is tiny_run.iterations[-1].stack


def test_run_records_evaluation(tiny_run):
    """Test the comparator, bonus, information gain and KL weights of each iteration."""
    assert tiny_run.comparator is not None and math.isfinite(tiny_run.comparator)
    assert tiny_run.pre_density is not None
    assert len(tiny_run.targets) == 2
    first, second = tiny_run.iterations
    assert first.beta == 0.0
    assert second.beta == pytest.approx(0.1)
    for it in tiny_run.iterations:
        assert it.mean_bonus is not None and it.mean_bonus >= 0.0
        assert it.log_det_gram is not None
        assert it.report.kl_grid is not None
        assert it.report.tv_to_target is not None
        assert it.target is not None
    assert second.log_det_gram > first.log_det_gram


def test_run_is_reproducible(tiny_config, tiny_run):
    """Test that the same config and seed give the same samples and values."""
    again = run_method(tiny_config)
    for a, b in zip(tiny_run.iterations, again.iterations):
        assert np.array_equal(a.samples, b.samples)
        assert np.array_equal(a.eval_samples, b.eval_samples)
        assert a.report.J_alpha == b.report.J_alpha
    other = run_method(tiny_config.model_copy(update={"seeds": SeedConfig(master=1)}))
    assert not np.array_equal(other.iterations[0].samples, tiny_run.iterations[0].samples)


def test_greedy_baseline(tiny_config):
    """Test that greedy drops the bonus and the previous-iterate KL."""
    record = run_method(with_method(tiny_config, name="greedy"))
    assert record.method == "greedy"
    assert len(record.iterations) == 2
    for it in record.iterations:
        assert it.alpha == GREEDY_ALPHA_FLOOR
        assert it.beta == 0.0
        assert it.mean_bonus is None
        assert not it.surrogate.optimistic


def test_nonadaptive_baseline(tiny_config):
    """Test a single batch of the whole budget from the pre-trained model."""
    record = run_method(with_method(tiny_config, name="nonadaptive"))
    assert len(record.iterations) == 1
    assert record.iterations[0].batch_size == 40
    assert record.queries_used == 40


def test_guidance_baseline(tiny_config):
    """Test that guidance keeps the pre-trained stack and spends the budget once."""
    record = run_method(with_method(tiny_config, name="guidance", guidance_level=0.1))
    assert len(record.iterations) == 1
    it = record.iterations[0]
    assert it.stack.depth == 0
    assert it.batch_size == 40
    assert it.report is not None
    assert record.queries_used == 40


def test_ppo_baseline(tiny_config):
    """Test that PPO trains one residual on true feedback without a surrogate."""
    record = run_method(with_method(tiny_config, name="ppo"))
    assert len(record.iterations) == 2
    for it in record.iterations:
        assert it.surrogate is None
        assert it.stack.depth == 1
        assert len(it.curve) == tiny_config.method.ppo.epochs
    assert record.queries_used == 40


def test_ppo_round_without_update_epochs(tiny_config):
    """Test that a PPO round with zero update epochs is still evaluated and logged."""
    ppo = tiny_config.method.ppo.model_copy(update={"epochs": 0})
    record = run_method(with_method(tiny_config, name="ppo", ppo=ppo))
    assert [len(it.curve) for it in record.iterations] == [0, 0]
    assert all(it.report is not None for it in record.iterations)
    assert record.queries_used == 40


def test_bootstrap_oracle(tiny_config):
    """Test the bootstrap variant: no Gram matrix, nonnegative bonus."""
    record = run_method(with_method(tiny_config, name="seiko-bootstrap"))
    for it in record.iterations:
        assert it.surrogate.kind == "bootstrap"
        assert it.log_det_gram is None
        assert it.mean_bonus >= 0.0


def test_budget_error_carries_partial_record(tiny_config):
    """Test that a budget overrun stops the run and keeps finished iterations."""
    world = build_world(tiny_config)
    world.channel.budget = 30
    with pytest.raises(BudgetError) as exc:
        run_method(tiny_config, world)
    partial = exc.value.partial_record
    assert len(partial.iterations) == 1
    assert partial.queries_used == 20


def test_foreign_pretrained_model_is_rejected(tiny_config):
    """Test that the loop refuses a model other than the world's."""
    world = build_world(tiny_config)
    other = PretrainedModel(tiny_config.world.gmm, tiny_config.world.schedule)
    with pytest.raises(ValueError):
        run_seiko(tiny_config, world, other)


def test_run_without_grid():
    """Test the sample-based comparator and pathwise KL in three dimensions."""
    cfg = parse_experiment(THREE_D_CONFIG, "no-grid.yaml")
    assert cfg.grid() is None
    record = run_method(cfg)
    assert math.isfinite(record.comparator)
    assert record.pre_density is None and record.targets == []
    report = record.iterations[0].report
    assert report.kl_grid is None
    assert report.tv_to_target is None
    assert math.isfinite(report.J_alpha)
