"""Diffusion-model updates against a fitted reward surrogate.

``optimize_control`` maximizes

    E[(r_hat + g_hat)(x_T)] - alpha * E[z_T] - beta * E[Z_T]

by Adam ascent through the unrolled Euler-Maruyama chain. The module also
holds the two baselines that change the sampler without this objective:
reward guidance and a clipped PPO update.
"""
import logging
import math
from dataclasses import dataclass
from typing import Callable, List, NamedTuple, Optional

import numpy as np

from app.autodiff import tape
from app.autodiff.adam import AdamState, adam_step
from app.autodiff.mlp import mlp_forward_var, mlp_init
from app.autodiff.tape import ParamVector, Var
from app.core.errors import ConfigurationError, NumericError, PlannerError, SimulationError
from app.core.seeding import derive_seed
from app.models.pretrained import PretrainedModel
from app.models.reward_model import RewardSurrogate
from app.schemas.experiment import MlpSpec, PlannerConfig
from app.schemas.world import NoiseSchedule
from app.services.sde_engine import (
    DriftStack,
    PathBatch,
    Residual,
    differentiable_rollout,
    rollout,
    sample_terminal,
)

logger = logging.getLogger(__name__)


@dataclass
class ControlProblem:
    """One fine-tuning problem.

    Attributes:
        surrogate: supplies the optimistic reward
        alpha: weight of the KL term against the pre-trained model
        beta: weight of the KL term against ``reference_stack``
        reference_stack: drift of the previous iterate
        schedule: noise schedule and Euler grid
        residual_spec: architecture of the residual appended by the planner
        greedy: allow ``alpha + beta == 0``
    """
    surrogate: RewardSurrogate
    alpha: float
    beta: float
    reference_stack: DriftStack
    schedule: NoiseSchedule
    residual_spec: MlpSpec
    greedy: bool = False

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ConfigurationError(f"KL weights must be nonnegative, got alpha={self.alpha}, beta={self.beta}")
        if self.alpha + self.beta <= 0 and not self.greedy:
            raise ConfigurationError("alpha + beta must be positive outside greedy mode")


class CurvePoint(NamedTuple):
    step: int
    B: float
    A1: float
    A2: float
    objective: float


class ObjectiveEstimate(NamedTuple):
    """Monte Carlo estimates of the three objective terms with standard errors."""
    B_term: float
    A1_term: float
    A2_term: float
    B_se: float
    A1_se: float
    A2_se: float


def _clip_norm(grad: ParamVector, max_norm: Optional[float], step: int) -> ParamVector:
    if max_norm is None:
        return grad
    norm = float(np.linalg.norm(grad.values))
    if norm <= max_norm:
        return grad
    logger.warning("Clipped planner gradient", extra={"step": step, "norm": norm, "max_norm": max_norm})
    return grad.with_values(grad.values * (max_norm / norm))


def optimize_control(problem: ControlProblem, cfg: PlannerConfig) -> tuple:
    """Append a zero-initialized residual and train it by Adam ascent.

    Returns:
        Tuple of (frozen DriftStack, list of CurvePoint with one entry per step)

    Raises:
        PlannerError: if the objective or gradient becomes non-finite; the
            stack from the last finite step is attached
    """
    reference = problem.reference_stack.frozen()
    depth = reference.depth
    params = mlp_init(problem.residual_spec, derive_seed(cfg.seed, depth))
    stack = reference.push(Residual(problem.residual_spec, params))
    state = AdamState.fresh(params.size, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.eps)
    terminal = problem.surrogate.value_on_tape
    curve: List[CurvePoint] = []

    for step in range(cfg.n_opt_steps):
        try:
            result = differentiable_rollout(
                stack, problem.schedule, cfg.n_paths_per_step, derive_seed(cfg.seed, depth, step),
                terminal, alpha=problem.alpha, beta=problem.beta,
            )
            grad = _clip_norm(result.gradient, cfg.max_grad_norm, step)
            new_params, state = adam_step(stack.residuals[-1].params, grad, state, ascent=True)
        except (NumericError, SimulationError) as e:
            raise PlannerError(f"Planner diverged at step {step}: {e}",
                               last_finite_stack=stack.frozen()) from e
        curve.append(CurvePoint(step, result.reward_term, result.kl_pretrained,
                                result.kl_previous, result.objective))
        if step % cfg.objective_log_every == 0 or step == cfg.n_opt_steps - 1:
            logger.info("Planner step", extra={
                "step": step, "depth": depth + 1, "objective": result.objective,
                "B": result.reward_term, "A1": result.kl_pretrained, "A2": result.kl_previous,
            })
        stack = stack.with_params(depth, new_params)
    return stack.frozen(), curve


def objective_estimate(stack: DriftStack, problem: ControlProblem, n: int, seed: int) -> ObjectiveEstimate:
    """Estimate the reward term and both KL terms of ``stack`` separately.

    The A2 term is measured against ``problem.reference_stack``, whose
    residuals must be a prefix of ``stack``'s.
    """
    ref_depth = min(problem.reference_stack.depth, stack.depth)
    measured = DriftStack(stack.base, stack.residuals, previous_depth=ref_depth)
    batch = rollout(measured, problem.schedule, n, seed)
    rewards = np.asarray(problem.surrogate.value(batch.x_T), dtype=np.float64)

    def se(values: np.ndarray) -> float:
        return float(np.std(values, ddof=1) / math.sqrt(values.size)) if values.size > 1 else 0.0

    return ObjectiveEstimate(
        float(rewards.mean()), float(batch.z_T.mean()), float(batch.Z_T.mean()),
        se(rewards), se(batch.z_T), se(batch.Z_T),
    )


def guidance_drift(surrogate: RewardSurrogate, schedule: NoiseSchedule,
                   level: float) -> Callable[[float, np.ndarray], np.ndarray]:
    """Extra drift ``level * sigma(t)^2 * grad mu(x)`` from the surrogate mean ``mu``."""

    def extra(t: float, x: np.ndarray) -> np.ndarray:
        if level == 0.0:
            return np.zeros_like(x)
        return level * schedule.sigma(t) ** 2 * surrogate.mean_gradient(x)

    return extra


def guidance_sampler(model: PretrainedModel, surrogate: RewardSurrogate, level: float,
                     schedule: NoiseSchedule, n: int, seed: int,
                     stack: Optional[DriftStack] = None) -> PathBatch:
    """Sample the pre-trained SDE with reward guidance at strength ``level``.

    ``level = 0`` reproduces pre-trained sampling path by path.
    """
    if level < 0:
        raise ConfigurationError(f"Guidance level must be nonnegative, got {level}")
    base_stack = stack if stack is not None else DriftStack(model)
    extra = guidance_drift(surrogate, schedule, level) if level > 0 else None
    return sample_terminal(base_stack, schedule, n, seed, extra_drift=extra)


@dataclass
class PpoBatch:
    """Trajectories collected under the old policy.

    Attributes:
        states: (n, n_steps + 1, d) paths
        log_prob_old: (n, n_steps) Gaussian transition log-densities
        kl_steps: (n, n_steps) per-step KL increments against the pre-trained drift
        seed: rollout seed
    """
    states: np.ndarray
    log_prob_old: np.ndarray
    kl_steps: np.ndarray
    seed: int

    @property
    def x_T(self) -> np.ndarray:
        return self.states[:, -1]


@dataclass
class PpoStats:
    objective: float
    clip_fraction: float
    mean_ratio: float


def _transition_log_prob(stack: DriftStack, schedule: NoiseSchedule, states: np.ndarray) -> np.ndarray:
    grid = schedule.grid()
    dt = schedule.dt
    out = np.empty((states.shape[0], schedule.n_steps))
    for k in range(schedule.n_steps):
        t = float(grid[k])
        var = schedule.sigma(t) ** 2 * dt
        mean = states[:, k] + stack.drift(t, states[:, k]) * dt
        out[:, k] = -np.sum((states[:, k + 1] - mean) ** 2, axis=1) / (2.0 * var)
    return out


def collect_ppo_batch(stack: DriftStack, schedule: NoiseSchedule, n: int, seed: int) -> PpoBatch:
    """Roll out the current policy and store what the clipped update needs."""
    batch = rollout(stack, schedule, n, seed, keep_states=True)
    return PpoBatch(
        states=batch.states,
        log_prob_old=_transition_log_prob(stack, schedule, batch.states),
        kl_steps=np.diff(batch.z_path, axis=1),
        seed=seed,
    )


def ppo_advantages(rewards: np.ndarray, kl_steps: np.ndarray, alpha_kl: float) -> np.ndarray:
    """Per-step advantages ``r(x_T) - alpha * kl_t`` minus their batch mean at each step."""
    shaped = np.asarray(rewards, dtype=np.float64)[:, None] - alpha_kl * kl_steps
    return shaped - shaped.mean(axis=0, keepdims=True)


def ppo_update(stack: DriftStack, schedule: NoiseSchedule, batch: PpoBatch, rewards: np.ndarray,
               clip_eps: float, alpha_kl: float, state: AdamState) -> tuple:
    """One clipped-surrogate ascent step on the active residual.

    Maximizes the batch mean of ``sum_t min(ratio * A, clip(ratio, 1 - eps, 1 + eps) * A)``.

    Returns:
        Tuple of (updated stack, new AdamState, PpoStats)

    Raises:
        ConfigurationError: if the stack has no active residual
        NumericError: if a probability ratio is non-finite
    """
    if stack.active_trainable is None:
        raise ConfigurationError("ppo_update needs an active trainable residual")
    active = stack.active_trainable
    residual = stack.residuals[active]
    others = [r for k, r in enumerate(stack.residuals) if k != active]
    advantages = ppo_advantages(rewards, batch.kl_steps, alpha_kl)
    grid = schedule.grid()
    dt = schedule.dt
    states = batch.states
    ratios = []

    def objective(flat: Var) -> Var:
        total = 0.0
        for k in range(schedule.n_steps):
            t = float(grid[k])
            x_k = states[:, k]
            fixed = stack.base.drift(t, x_k)
            for other in others:
                fixed = fixed + other(t, x_k)
            control = mlp_forward_var(residual.spec, residual.params, flat, t, x_k)
            mean = (control + fixed) * dt + x_k
            var = schedule.sigma(t) ** 2 * dt
            log_prob = tape.reduce_sum(tape.square(mean - states[:, k + 1]), axis=1) * (-0.5 / var)
            ratio = tape.exp(log_prob - batch.log_prob_old[:, k])
            ratios.append(ratio.value)
            adv = advantages[:, k]
            clipped = tape.clip(ratio, 1.0 - clip_eps, 1.0 + clip_eps)
            total = total + tape.elementwise_min(ratio * adv, clipped * adv)
        return tape.reduce_mean(total)

    try:
        value, grad = tape.value_and_grad(objective, residual.params.values)
    except NumericError as e:
        raise NumericError(f"Non-finite PPO ratio: {e}", node=e.node) from e
    new_params, state = adam_step(residual.params, residual.params.with_values(grad), state, ascent=True)
    all_ratios = np.stack(ratios)
    stats = PpoStats(
        objective=value,
        clip_fraction=float(np.mean(np.abs(all_ratios - 1.0) > clip_eps)),
        mean_ratio=float(all_ratios.mean()),
    )
    return stack.with_params(active, new_params), state, stats
