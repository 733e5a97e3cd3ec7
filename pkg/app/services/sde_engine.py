"""Euler-Maruyama simulation of drift stacks.

Each path ``j`` draws its initial state and all Brownian increments from its
own stream seeded by ``derive_seed(master_seed, j)``. Paths are simulated in
fixed-size blocks, so results are bitwise identical for any worker count.

Along every path two pathwise KL accumulators are integrated:

* ``z``: ``|f - f_pre|^2 / (2 sigma^2) dt``, against the pre-trained drift
* ``Z``: ``|f - f_prev|^2 / (2 sigma^2) dt``, against the previous iterate
"""
import csv
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, List, NamedTuple, Optional, Protocol, Sequence, Tuple, Union

import numpy as np

from app.autodiff import tape
from app.autodiff.mlp import mlp_eval, mlp_forward_var
from app.autodiff.tape import ParamVector, Var
from app.core.config import get_settings
from app.core.errors import ConfigurationError, NumericError, ShapeError, SimulationError
from app.core.seeding import derive_seed
from app.schemas.experiment import MlpSpec
from app.schemas.world import NoiseSchedule

logger = logging.getLogger(__name__)

BLOCK_SIZE = 256

DriftFn = Callable[[float, np.ndarray], np.ndarray]


class BaseDrift(Protocol):
    """Drift of the reference SDE: the pre-trained model or a test process."""
    dim: int

    def drift(self, t: float, x: np.ndarray) -> np.ndarray: ...

    def drift_vjp(self, t: float, x: np.ndarray, v: np.ndarray) -> np.ndarray: ...


@dataclass(frozen=True)
class Residual:
    """One learned drift correction."""
    spec: MlpSpec
    params: ParamVector

    def __call__(self, t: float, x: np.ndarray) -> np.ndarray:
        return mlp_eval(self.spec, self.params, t, x)

    def scaled(self, factor: float) -> "Residual":
        """Residual whose output is multiplied by ``factor`` (the last layer is linear)."""
        values = self.params.values.copy()
        n_layers = len(self.spec.layer_widths) - 1
        for name, start, stop, _ in self.params.offsets():
            if name in (f"W{n_layers - 1}", f"b{n_layers - 1}"):
                values[start:stop] *= factor
        return Residual(self.spec, self.params.with_values(values))


@dataclass(frozen=True)
class DriftStack:
    """Pre-trained drift plus a stack of residual networks.

    Attributes:
        base: reference drift f_pre
        residuals: corrections for iterations 1..i; the drift is their pointwise sum with ``base``
        active_trainable: index of the residual being optimized, if any
        previous_depth: residuals before this index form f_prev; defaults to all but the last
    """
    base: BaseDrift
    residuals: Tuple[Residual, ...] = ()
    active_trainable: Optional[int] = None
    previous_depth: Optional[int] = None

    def __post_init__(self):
        object.__setattr__(self, "residuals", tuple(self.residuals))
        for k, residual in enumerate(self.residuals):
            if residual.spec.state_dim != self.dim or residual.spec.output_dim != self.dim:
                raise ShapeError(
                    f"Residual {k} maps {residual.spec.state_dim} -> {residual.spec.output_dim} "
                    f"dimensions, stack is {self.dim}-dimensional"
                )
        if self.active_trainable is not None and not 0 <= self.active_trainable < len(self.residuals):
            raise ConfigurationError(f"active_trainable {self.active_trainable} has no residual")
        if self.previous_depth is not None and not 0 <= self.previous_depth <= len(self.residuals):
            raise ConfigurationError(f"previous_depth {self.previous_depth} out of range")

    @property
    def dim(self) -> int:
        return self.base.dim

    @property
    def depth(self) -> int:
        return len(self.residuals)

    @property
    def reference_depth(self) -> int:
        if self.previous_depth is not None:
            return self.previous_depth
        return max(self.depth - 1, 0)

    def residual_sum(self, t: float, x: np.ndarray, start: int = 0, stop: Optional[int] = None) -> np.ndarray:
        out = np.zeros_like(x, dtype=np.float64)
        for residual in self.residuals[start:stop]:
            out = out + residual(t, x)
        return out

    def drift(self, t: float, x: np.ndarray) -> np.ndarray:
        return self.base.drift(t, x) + self.residual_sum(t, x)

    def push(self, residual: Residual) -> "DriftStack":
        """Append a trainable residual; the current stack becomes the reference."""
        return DriftStack(self.base, self.residuals + (residual,), self.depth, self.depth)

    def with_params(self, index: int, params: ParamVector) -> "DriftStack":
        residuals = list(self.residuals)
        residuals[index] = Residual(residuals[index].spec, params)
        return replace(self, residuals=tuple(residuals))

    def frozen(self) -> "DriftStack":
        return replace(self, active_trainable=None)

    def truncated(self, depth: int) -> "DriftStack":
        """The stack of an earlier iteration."""
        return DriftStack(self.base, self.residuals[:depth])

    def blended(self, weight: float) -> "DriftStack":
        """Stack ``f_pre + weight * (f - f_pre)``."""
        return DriftStack(self.base, tuple(r.scaled(weight) for r in self.residuals))


@dataclass
class Trajectory:
    """One discretized path and its KL accumulators.

    Attributes:
        states: (n_steps + 1, d) states on the time grid
        z_path: running KL integrand against the pre-trained drift
        Z_path: running KL integrand against the previous iterate
        noise_seed: seed of the path's noise stream
    """
    states: np.ndarray
    z_path: np.ndarray
    Z_path: np.ndarray
    noise_seed: int
    traj_id: int = 0

    @property
    def x_T(self) -> np.ndarray:
        return self.states[-1]

    @property
    def z_T(self) -> float:
        return float(self.z_path[-1])

    @property
    def Z_T(self) -> float:
        return float(self.Z_path[-1])


@dataclass
class PathBatch:
    """Vectorized rollout output; ``states`` is only kept on request."""
    x_T: np.ndarray
    z_T: np.ndarray
    Z_T: np.ndarray
    master_seed: int
    states: Optional[np.ndarray] = None
    z_path: Optional[np.ndarray] = None
    Z_path: Optional[np.ndarray] = None
    extras: dict = field(default_factory=dict)

    @property
    def size(self) -> int:
        return int(self.x_T.shape[0])

    def trajectories(self) -> List[Trajectory]:
        if self.states is None:
            raise ValueError("Rollout was run without keeping states")
        return [
            Trajectory(self.states[j], self.z_path[j], self.Z_path[j],
                       derive_seed(self.master_seed, j), traj_id=j)
            for j in range(self.size)
        ]


def path_noise(master_seed: int, index: int, n_steps: int, dim: int) -> Tuple[np.ndarray, np.ndarray]:
    """Initial state and standard normal increments of path ``index``."""
    rng = np.random.default_rng(derive_seed(master_seed, index))
    x0 = rng.standard_normal(dim)
    xi = rng.standard_normal((n_steps, dim))
    return x0, xi


def _block_noise(master_seed: int, indices: Sequence[int], n_steps: int, dim: int):
    pairs = [path_noise(master_seed, j, n_steps, dim) for j in indices]
    return np.stack([p[0] for p in pairs]), np.stack([p[1] for p in pairs])


def euler_maruyama(schedule: NoiseSchedule, drift: DriftFn, x0: np.ndarray, xi: np.ndarray,
                   penalties: Sequence[DriftFn] = (), start_index: int = 0,
                   keep_states: bool = False):
    """Integrate ``dx = drift dt + sigma dw`` from grid index ``start_index`` to ``T``.

    ``xi`` holds standard normal draws for all grid steps; the increment at
    step k is ``sqrt(dt) * xi[:, k]``. For each penalty function ``g`` the
    accumulator ``int |g|^2 / (2 sigma^2) dt`` is integrated along the way.

    Returns:
        Tuple of (x_T, accumulators (n_penalties, n, steps + 1), states or None)

    Raises:
        SimulationError: if a state becomes non-finite
    """
    grid = schedule.grid()
    dt = schedule.dt
    sqrt_dt = math.sqrt(dt)
    x = np.array(x0, dtype=np.float64)
    n = x.shape[0]
    n_steps = schedule.n_steps - start_index
    acc = np.zeros((len(penalties), n, n_steps + 1))
    states = np.empty((n, n_steps + 1, x.shape[1])) if keep_states else None
    if keep_states:
        states[:, 0] = x
    for offset in range(n_steps):
        k = start_index + offset
        t = float(grid[k])
        sigma = schedule.sigma(t)
        for p, penalty in enumerate(penalties):
            g = penalty(t, x)
            acc[p, :, offset + 1] = acc[p, :, offset] + np.sum(g * g, axis=1) * dt / (2.0 * sigma ** 2)
        x = x + drift(t, x) * dt + sigma * sqrt_dt * xi[:, k]
        if not np.all(np.isfinite(x)):
            raise SimulationError(f"Non-finite state at Euler step {k}", step=k)
        if keep_states:
            states[:, offset + 1] = x
    return x, acc, states


def _run_blocks(n: int, block_fn: Callable[[range], tuple], workers: Optional[int]) -> List[tuple]:
    blocks = [range(lo, min(lo + BLOCK_SIZE, n)) for lo in range(0, n, BLOCK_SIZE)]
    workers = workers if workers is not None else get_settings().THREADS
    started = time.perf_counter()
    if workers <= 1 or len(blocks) == 1:
        results = [block_fn(b) for b in blocks]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(block_fn, blocks))
    logger.debug("Rollout finished", extra={
        "paths": n, "blocks": len(blocks), "workers": workers,
        "seconds": round(time.perf_counter() - started, 4),
    })
    return results


def rollout(stack: DriftStack, schedule: NoiseSchedule, n: int, master_seed: int,
            keep_states: bool = False, extra_drift: Optional[DriftFn] = None,
            workers: Optional[int] = None) -> PathBatch:
    """Simulate ``n`` paths of ``stack``; see :func:`simulate`.

    ``extra_drift`` is added to the drift and counts as a deviation from both
    reference drifts (guidance uses it).
    """
    if n < 1:
        raise ConfigurationError("Need at least one path")
    prev = stack.reference_depth

    def deviation(t, x, lo):
        out = stack.residual_sum(t, x, lo)
        return out + extra_drift(t, x) if extra_drift is not None else out

    drift = stack.drift if extra_drift is None else (lambda t, x: stack.drift(t, x) + extra_drift(t, x))
    penalties = [lambda t, x: deviation(t, x, 0), lambda t, x: deviation(t, x, prev)]

    def block_fn(indices: range):
        x0, xi = _block_noise(master_seed, indices, schedule.n_steps, stack.dim)
        return euler_maruyama(schedule, drift, x0, xi, penalties, keep_states=keep_states)

    results = _run_blocks(n, block_fn, workers)
    acc = np.concatenate([r[1] for r in results], axis=1)
    return PathBatch(
        x_T=np.concatenate([r[0] for r in results]),
        z_T=acc[0, :, -1].copy(),
        Z_T=acc[1, :, -1].copy(),
        master_seed=master_seed,
        states=np.concatenate([r[2] for r in results]) if keep_states else None,
        z_path=acc[0] if keep_states else None,
        Z_path=acc[1] if keep_states else None,
    )


def simulate(stack: DriftStack, schedule: NoiseSchedule, n: int, master_seed: int,
             workers: Optional[int] = None) -> List[Trajectory]:
    """Simulate ``n`` full trajectories with KL accumulators.

    Raises:
        SimulationError: on a non-finite state, naming the step
    """
    return rollout(stack, schedule, n, master_seed, keep_states=True, workers=workers).trajectories()


def sample_terminal(stack: DriftStack, schedule: NoiseSchedule, n: int, master_seed: int,
                    extra_drift: Optional[DriftFn] = None, workers: Optional[int] = None) -> PathBatch:
    """Fast mode: terminal states and accumulator totals only."""
    return rollout(stack, schedule, n, master_seed, extra_drift=extra_drift, workers=workers)


def simulate_from(stack: DriftStack, schedule: NoiseSchedule, start_index: int, x: np.ndarray,
                  n: int, master_seed: int, penalty: Optional[DriftFn] = None,
                  workers: Optional[int] = None) -> Tuple[np.ndarray, np.ndarray]:
    """Restart ``n`` paths at grid index ``start_index`` from the fixed state ``x``.

    Path ``j`` reuses the increments of path ``j`` in :func:`simulate`, which
    gives common random numbers across start points.

    Returns:
        Tuple of terminal states (n, d) and the penalty integral per path
    """
    if not 0 <= start_index <= schedule.n_steps:
        raise ConfigurationError(f"start_index {start_index} outside the time grid")
    x = np.asarray(x, dtype=np.float64).reshape(1, stack.dim)
    penalties = [penalty] if penalty is not None else []

    def block_fn(indices: range):
        _, xi = _block_noise(master_seed, indices, schedule.n_steps, stack.dim)
        x0 = np.repeat(x, len(indices), axis=0)
        return euler_maruyama(schedule, stack.drift, x0, xi, penalties, start_index=start_index)

    results = _run_blocks(n, block_fn, workers)
    x_T = np.concatenate([r[0] for r in results])
    if penalty is None:
        return x_T, np.zeros(n)
    return x_T, np.concatenate([r[1][0, :, -1] for r in results])


def pathwise_kl(trajectories: Union[Sequence[Trajectory], PathBatch]) -> Tuple[float, float]:
    """Mean accumulated KL against the pre-trained drift and against the previous iterate.

    The initial distribution is fixed to the standard normal, so there is no
    initial log-ratio term.
    """
    if isinstance(trajectories, PathBatch):
        return float(np.mean(trajectories.z_T)), float(np.mean(trajectories.Z_T))
    if not trajectories:
        raise ValueError("pathwise_kl needs at least one trajectory")
    z = np.array([tr.z_T for tr in trajectories])
    Z = np.array([tr.Z_T for tr in trajectories])
    return float(z.mean()), float(Z.mean())


class RolloutResult(NamedTuple):
    """Objective of a differentiable rollout and its parts (means over paths)."""
    objective: float
    gradient: ParamVector
    reward_term: float
    kl_pretrained: float
    kl_previous: float
    reward_se: float = 0.0
    kl_pretrained_se: float = 0.0
    kl_previous_se: float = 0.0


def _base_node(base: BaseDrift, t: float, x: Var) -> Var:
    value = base.drift(t, x.value)
    x_value = x.value
    return tape.custom(value, x, lambda g: base.drift_vjp(t, x_value, g), "base_drift")


def _standard_error(values: np.ndarray) -> float:
    if values.size < 2:
        return 0.0
    return float(np.std(values, ddof=1) / math.sqrt(values.size))


def differentiable_rollout(stack: DriftStack, schedule: NoiseSchedule, n: int, seed: int,
                           terminal_fn: Callable[[Var], Var], alpha: float = 0.0,
                           beta: float = 0.0) -> RolloutResult:
    """Mean of ``terminal_fn(x_T) - alpha z_T - beta Z_T`` and its gradient.

    The gradient is taken with respect to the active residual's parameters
    through the whole unrolled Euler chain, with the noise of every path held
    fixed. ``terminal_fn`` maps an ``(n, d)`` tape value to ``(n,)`` values.

    Raises:
        ConfigurationError: if the stack has no active residual
        NumericError: if the objective or its gradient is non-finite
    """
    if stack.active_trainable is None:
        raise ConfigurationError("differentiable_rollout needs an active trainable residual")
    active = stack.active_trainable
    prev = stack.reference_depth
    trainable = stack.residuals[active]
    leaf = Var.leaf(trainable.params.values)
    frozen = {k: tape.Var(r.params.values) for k, r in enumerate(stack.residuals) if k != active}

    x0, xi = _block_noise(seed, range(n), schedule.n_steps, stack.dim)
    grid = schedule.grid()
    dt = schedule.dt
    x: Var = tape.Var(x0)
    z: Union[Var, float] = 0.0
    Z: Union[Var, float] = 0.0
    for k in range(schedule.n_steps):
        t = float(grid[k])
        sigma = schedule.sigma(t)
        outputs = []
        for j, residual in enumerate(stack.residuals):
            flat = leaf if j == active else frozen[j]
            outputs.append(mlp_forward_var(residual.spec, residual.params, flat, t, x))
        weight = dt / (2.0 * sigma ** 2)
        if outputs:
            total = outputs[0]
            for out in outputs[1:]:
                total = total + out
            z = z + tape.reduce_sum(tape.square(total), axis=1) * weight
            if prev < len(outputs):
                recent = outputs[prev]
                for out in outputs[prev + 1:]:
                    recent = recent + out
                Z = Z + tape.reduce_sum(tape.square(recent), axis=1) * weight
            drift = _base_node(stack.base, t, x) + total
        else:
            drift = _base_node(stack.base, t, x)
        x = x + drift * dt + sigma * math.sqrt(dt) * xi[:, k]

    reward = tape.lift(terminal_fn(x))
    if reward.shape != (n,):
        raise ShapeError(f"terminal_fn must return one value per path, got shape {reward.shape}")
    per_path = reward - tape.mul(z, alpha) - tape.mul(Z, beta)
    objective = tape.reduce_mean(per_path)
    if not np.isfinite(objective.value):
        raise NumericError("Non-finite rollout objective", node="objective")
    if objective.requires_grad:
        tape.backward(objective)
    grad = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.value)
    z_values = np.broadcast_to(tape.lift(z).value, (n,))
    Z_values = np.broadcast_to(tape.lift(Z).value, (n,))
    return RolloutResult(
        objective=float(objective.value),
        gradient=trainable.params.with_values(grad),
        reward_term=float(np.mean(reward.value)),
        kl_pretrained=float(np.mean(z_values)),
        kl_previous=float(np.mean(Z_values)),
        reward_se=_standard_error(reward.value),
        kl_pretrained_se=_standard_error(np.asarray(z_values)),
        kl_previous_se=_standard_error(np.asarray(Z_values)),
    )


def dump_trajectories(trajectories: Sequence[Trajectory], schedule: NoiseSchedule,
                      path: Union[str, Path], append: bool = False, iteration: Optional[int] = None) -> None:
    """Write one CSV row per (trajectory, step): traj_id, step, t, x..., z, Z.

    With ``iteration`` set, a leading ``iteration`` column is added.
    """
    path = Path(path)
    grid = schedule.grid()
    write_header = not (append and path.exists())
    with open(path, "a" if append else "w", newline="") as f:
        writer = csv.writer(f)
        if write_header and trajectories:
            d = trajectories[0].states.shape[1]
            header = ["traj_id", "step", "t"] + [f"x{i}" for i in range(d)] + ["z", "Z"]
            writer.writerow((["iteration"] if iteration is not None else []) + header)
        for tr in trajectories:
            for step, state in enumerate(tr.states):
                row = [tr.traj_id, step, repr(float(grid[step]))]
                row += [repr(float(v)) for v in state]
                row += [repr(float(tr.z_path[step])), repr(float(tr.Z_path[step]))]
                writer.writerow(([iteration] if iteration is not None else []) + row)
