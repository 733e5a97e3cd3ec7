"""Online fine-tuning under a feedback budget, plus the baselines.

Every method shares the same loop: draw samples from the current model,
query feedback, refit the surrogate on all feedback so far, update the
model without further queries, evaluate. The methods differ in the
uncertainty oracle, the KL weights and the model update.
"""
import logging
from dataclasses import dataclass, field
from typing import Callable, List, Optional

import numpy as np

from app.autodiff.adam import AdamState
from app.autodiff.mlp import mlp_init
from app.core.errors import BudgetError, PlannerError
from app.core.seeding import derive_seed
from app.models.pretrained import PretrainedModel
from app.models.reward_model import (
    FeatureMap,
    RewardSurrogate,
    c1_of_delta,
    fit_bootstrap,
    fit_ridge,
    information_gain,
)
from app.schemas.experiment import GREEDY_ALPHA_FLOOR, ExperimentConfig
from app.services.eval_oracle import (
    GridDensity,
    ValueReport,
    comparator_optimum,
    comparator_value_mc,
    estimate_value,
    grid_target_density,
    pretrained_density,
)
from app.services.planner import (
    ControlProblem,
    CurvePoint,
    collect_ppo_batch,
    guidance_drift,
    guidance_sampler,
    optimize_control,
    ppo_update,
)
from app.services.reward_world import (
    FeedbackChannel,
    FeedbackDataset,
    RewardLandscape,
    query_feedback,
)
from app.services.sde_engine import DriftStack, PathBatch, Residual, Trajectory, rollout

logger = logging.getLogger(__name__)


@dataclass
class World:
    """Pre-trained model, ground-truth reward and the feedback channel."""
    model: PretrainedModel
    landscape: RewardLandscape
    channel: FeedbackChannel


def build_world(cfg: ExperimentConfig) -> World:
    model = PretrainedModel(cfg.world.gmm, cfg.world.schedule, cfg.world.feasibility_ratio)
    landscape = RewardLandscape(cfg.world.reward, model)
    channel = FeedbackChannel(cfg.world.noise_std, cfg.world.budget, cfg.seeds.resolve("feedback"))
    return World(model, landscape, channel)


def beta_schedule(alpha: float, i: int) -> float:
    """Weight ``alpha (i - 1)`` on the previous-iterate KL at iteration ``i``."""
    if i < 1:
        raise ValueError(f"Iterations start at 1, got {i}")
    return alpha * (i - 1)


def beta_for(cfg: ExperimentConfig, i: int) -> float:
    method = cfg.method
    if method.beta_rule == "theory":
        return beta_schedule(method.alpha, i)
    if method.beta_rule == "constant":
        return method.beta
    return method.beta_values[i - 1]


@dataclass
class IterationRecord:
    """Artifacts of one online iteration.

    ``samples`` were drawn from the model of the previous iteration and
    queried before ``surrogate`` was fitted; ``eval_samples`` come from the
    model produced at this iteration.
    """
    iteration: int
    batch_size: int
    dataset_size: int
    samples: np.ndarray
    feedback: np.ndarray
    surrogate: Optional[RewardSurrogate]
    stack: DriftStack
    alpha: float
    beta: float
    curve: List[CurvePoint] = field(default_factory=list)
    eval_samples: Optional[np.ndarray] = None
    report: Optional[ValueReport] = None
    mean_bonus: Optional[float] = None
    log_det_gram: Optional[float] = None
    trajectories: List[Trajectory] = field(default_factory=list)
    target: Optional[GridDensity] = None


@dataclass
class RunRecord:
    """Everything a run produced, in iteration order."""
    method: str
    seed: int
    budget: int
    iterations: List[IterationRecord] = field(default_factory=list)
    dataset: Optional[FeedbackDataset] = None
    queries_used: int = 0
    comparator: Optional[float] = None
    comparator_density: Optional[GridDensity] = None
    pre_density: Optional[GridDensity] = None
    targets: List[GridDensity] = field(default_factory=list)

    @property
    def final_stack(self) -> Optional[DriftStack]:
        return self.iterations[-1].stack if self.iterations else None


class _Evaluator:
    """Per-run evaluation state: grid, product-form targets, comparator."""

    def __init__(self, cfg: ExperimentConfig, world: World, record: RunRecord):
        self.cfg = cfg
        self.world = world
        self.record = record
        grid = cfg.grid()
        self.pre = pretrained_density(world.model, grid) if grid is not None else None
        self.target = self.pre
        record.pre_density = self.pre
        if cfg.evaluation.alpha <= 0:
            return
        if self.pre is not None:
            record.comparator_density, record.comparator = comparator_optimum(
                world.landscape, self.pre, cfg.evaluation.alpha)
        else:
            seed = derive_seed(cfg.seeds.resolve("evaluation"), 0)
            pre_samples = rollout(DriftStack(world.model), cfg.world.schedule, cfg.evaluation.n_samples, seed).x_T
            record.comparator = comparator_value_mc(world.landscape, pre_samples, cfg.evaluation.alpha)

    def advance_target(self, surrogate: Optional[RewardSurrogate], alpha: float, beta: float) -> Optional[GridDensity]:
        if self.pre is None or surrogate is None or alpha + beta <= 0:
            return None
        self.target = grid_target_density(surrogate, self.target, self.pre, alpha, beta)
        self.record.targets.append(self.target)
        return self.target

    def evaluate(self, it: IterationRecord, batch: PathBatch, target: Optional[GridDensity]) -> None:
        it.eval_samples = batch.x_T
        it.target = target
        kl_path = float(np.mean(batch.z_T))
        it.report = estimate_value(batch.x_T, self.world.landscape, self.pre, self.cfg.evaluation.alpha,
                                   kl_pathwise=kl_path, target=target)
        if it.surrogate is not None and it.surrogate.optimistic:
            it.mean_bonus = float(np.mean(it.surrogate.bonus(batch.x_T)))
        logger.info("Iteration evaluated", extra={
            "method": self.record.method, "iteration": it.iteration,
            "mean_reward": it.report.mean_reward, "J_alpha": it.report.J_alpha,
            "frac_infeasible": it.report.frac_infeasible,
        })


def fit_surrogate(cfg: ExperimentConfig, world: World, data, iteration: int, optimistic: bool,
                  model_kind: str, iterations_total: int) -> RewardSurrogate:
    """Fit the configured reward model on ``data``."""
    method = cfg.method
    if model_kind == "ridge":
        features = FeatureMap(method.feature_map(world.model.dim))
        c1 = method.c1
        if c1 is None:
            c1 = c1_of_delta(method.delta, features.bound, method.ridge_lambda, world.channel.noise_std,
                             features.dim, iterations_total)
        model = fit_ridge(data, features, method.ridge_lambda, c1, method.delta)
    else:
        spec = method.bootstrap.spec(world.model.dim)
        model = fit_bootstrap(data, spec, method.bootstrap_heads, method.bootstrap,
                              derive_seed(cfg.seeds.resolve("surrogate"), iteration))
    return RewardSurrogate(model, optimistic=optimistic)


def _dump_paths(cfg: ExperimentConfig, stack: DriftStack, seed: int, extra=None) -> List[Trajectory]:
    n = cfg.evaluation.trajectory_dump
    if n == 0:
        return []
    return rollout(stack, cfg.world.schedule, n, seed, keep_states=True, extra_drift=extra).trajectories()


def _online(cfg: ExperimentConfig, world: World, method: str, batch_sizes: List[int],
            alpha: float, beta_fn: Callable[[int], float], optimistic: bool, model_kind: str,
            greedy: bool = False) -> RunRecord:
    schedule = cfg.world.schedule
    record = RunRecord(method, cfg.seeds.master, world.channel.budget,
                       dataset=FeedbackDataset(world.model.dim))
    evaluator = _Evaluator(cfg, world, record)
    stack = DriftStack(world.model)
    residual_spec = cfg.method.drift.spec(world.model.dim)
    planner_cfg = cfg.planner.model_copy(update={"seed": derive_seed(cfg.seeds.resolve("planner"), 0)})
    sampling_seed = cfg.seeds.resolve("sampling")
    eval_seed = cfg.seeds.resolve("evaluation")
    total = len(batch_sizes)
    try:
        for i, m_i in enumerate(batch_sizes, start=1):
            xs = rollout(stack, schedule, m_i, derive_seed(sampling_seed, i)).x_T
            ys = query_feedback(world.channel, world.landscape, xs)
            record.dataset.append(xs, ys, i)
            data = record.dataset.view(i)
            surrogate = fit_surrogate(cfg, world, data, i, optimistic, model_kind, total)
            beta = beta_fn(i)
            problem = ControlProblem(surrogate, alpha, beta, stack, schedule, residual_spec, greedy=greedy)
            stack, curve = optimize_control(problem, planner_cfg)
            it = IterationRecord(i, m_i, len(data), xs, ys, surrogate, stack, alpha, beta, curve,
                                 log_det_gram=information_gain(surrogate.model))
            target = evaluator.advance_target(surrogate, alpha, beta)
            batch = rollout(stack, schedule, cfg.evaluation.n_samples, derive_seed(eval_seed, i))
            evaluator.evaluate(it, batch, target)
            it.trajectories = _dump_paths(cfg, stack, derive_seed(eval_seed, i))
            record.iterations.append(it)
            logger.info("Online iteration finished", extra={
                "method": method, "iteration": i, "queries_used": world.channel.queries_used,
                "alpha": alpha, "beta": beta,
            })
    except (BudgetError, PlannerError) as e:
        record.queries_used = world.channel.queries_used
        e.partial_record = record
        raise
    record.queries_used = world.channel.queries_used
    return record


def run_seiko(cfg: ExperimentConfig, world: World, pretrained: Optional[PretrainedModel] = None) -> RunRecord:
    """Optimistic online fine-tuning with the configured oracle and KL schedule.

    Raises:
        BudgetError: if the batches exceed the budget (partial record attached)
        PlannerError: if a model update diverges (partial record attached)
    """
    _check_model(world, pretrained)
    method = cfg.method
    return _online(cfg, world, method.name, list(method.batch_sizes), method.alpha,
                   lambda i: beta_for(cfg, i), method.oracle_kind != "none", method.model_kind)


def run_nonadaptive(cfg: ExperimentConfig, world: World, pretrained: Optional[PretrainedModel] = None) -> RunRecord:
    """All feedback from the pre-trained model in one batch, one fit, one fine-tune."""
    _check_model(world, pretrained)
    return _online(cfg, world, "nonadaptive", [world.channel.budget], cfg.method.alpha,
                   lambda i: 0.0, False, cfg.method.model_kind)


def run_greedy(cfg: ExperimentConfig, world: World, pretrained: Optional[PretrainedModel] = None,
               alpha: float = GREEDY_ALPHA_FLOOR) -> RunRecord:
    """Online loop without uncertainty bonus or previous-iterate KL.

    ``alpha`` defaults to a tiny floor that keeps the drift bounded; pass 0
    for the unregularized ablation.
    """
    _check_model(world, pretrained)
    return _online(cfg, world, "greedy", list(cfg.method.batch_sizes), alpha,
                   lambda i: 0.0, False, cfg.method.model_kind, greedy=True)


def run_guidance(cfg: ExperimentConfig, world: World, pretrained: Optional[PretrainedModel] = None) -> RunRecord:
    """Fit the surrogate on pre-trained samples and sample with reward guidance."""
    _check_model(world, pretrained)
    schedule = cfg.world.schedule
    record = RunRecord("guidance", cfg.seeds.master, world.channel.budget,
                       dataset=FeedbackDataset(world.model.dim))
    evaluator = _Evaluator(cfg, world, record)
    stack = DriftStack(world.model)
    m = world.channel.budget
    try:
        xs = rollout(stack, schedule, m, derive_seed(cfg.seeds.resolve("sampling"), 1)).x_T
        ys = query_feedback(world.channel, world.landscape, xs)
    except BudgetError as e:
        e.partial_record = record
        raise
    record.dataset.append(xs, ys, 1)
    surrogate = fit_surrogate(cfg, world, record.dataset.view(1), 1, False, cfg.method.model_kind, 1)
    eval_seed = derive_seed(cfg.seeds.resolve("evaluation"), 1)
    level = cfg.method.guidance_level
    batch = guidance_sampler(world.model, surrogate, level, schedule, cfg.evaluation.n_samples, eval_seed)
    it = IterationRecord(1, m, len(record.dataset), xs, ys, surrogate, stack, 0.0, 0.0)
    evaluator.evaluate(it, batch, None)
    it.trajectories = _dump_paths(cfg, stack, eval_seed,
                                  extra=guidance_drift(surrogate, schedule, level) if level > 0 else None)
    record.iterations.append(it)
    record.queries_used = world.channel.queries_used
    return record


def run_ppo(cfg: ExperimentConfig, world: World, pretrained: Optional[PretrainedModel] = None) -> RunRecord:
    """Online KL-penalized PPO on true feedback, one round per batch."""
    _check_model(world, pretrained)
    schedule = cfg.world.schedule
    method = cfg.method
    record = RunRecord("ppo", cfg.seeds.master, world.channel.budget,
                       dataset=FeedbackDataset(world.model.dim))
    evaluator = _Evaluator(cfg, world, record)
    spec = method.drift.spec(world.model.dim)
    planner_seed = cfg.seeds.resolve("planner")
    params = mlp_init(spec, derive_seed(planner_seed, 0))
    stack = DriftStack(world.model).push(Residual(spec, params))
    state = AdamState.fresh(params.size, method.ppo.learning_rate)
    sampling_seed = cfg.seeds.resolve("sampling")
    eval_seed = cfg.seeds.resolve("evaluation")
    try:
        for i, m_i in enumerate(method.batch_sizes, start=1):
            batch = collect_ppo_batch(stack, schedule, m_i, derive_seed(sampling_seed, i))
            ys = query_feedback(world.channel, world.landscape, batch.x_T)
            record.dataset.append(batch.x_T, ys, i)
            curve = []
            stats = None
            for epoch in range(method.ppo.epochs):
                stack, state, stats = ppo_update(stack, schedule, batch, ys, method.ppo.clip_eps,
                                                 method.alpha, state)
                curve.append(CurvePoint(epoch, float(np.mean(ys)), float(batch.kl_steps.sum(axis=1).mean()),
                                        0.0, stats.objective))
            frozen = stack.frozen()
            it = IterationRecord(i, m_i, len(record.dataset), batch.x_T, ys, None, frozen,
                                 method.alpha, 0.0, curve)
            eval_batch = rollout(frozen, schedule, cfg.evaluation.n_samples, derive_seed(eval_seed, i))
            evaluator.evaluate(it, eval_batch, None)
            it.trajectories = _dump_paths(cfg, frozen, derive_seed(eval_seed, i))
            record.iterations.append(it)
            logger.info("PPO round finished", extra={
                "iteration": i, "queries_used": world.channel.queries_used,
                "clip_fraction": stats.clip_fraction if stats is not None else None,
            })
    except (BudgetError, PlannerError) as e:
        record.queries_used = world.channel.queries_used
        e.partial_record = record
        raise
    record.queries_used = world.channel.queries_used
    return record


def _check_model(world: World, pretrained: Optional[PretrainedModel]) -> None:
    if pretrained is not None and pretrained is not world.model:
        raise ValueError("The pretrained model must be the one the world was built on")


METHODS = {
    "seiko-ucb": run_seiko,
    "seiko-bootstrap": run_seiko,
    "greedy": run_greedy,
    "nonadaptive": run_nonadaptive,
    "guidance": run_guidance,
    "ppo": run_ppo,
}


def run_method(cfg: ExperimentConfig, world: Optional[World] = None) -> RunRecord:
    """Run the method named in the config on a fresh (or given) world."""
    world = world if world is not None else build_world(cfg)
    return METHODS[cfg.method.name](cfg, world, world.model)
