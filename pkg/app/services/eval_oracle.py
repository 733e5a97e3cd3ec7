"""Ground-truth evaluation on grids and value-function checks.

Densities in one or two dimensions are represented on rectangular grids of
cell probabilities. The evaluation value of a sampler is

    J_alpha(p) = E_p[r] - alpha * KL(p || p_pre)

and the tilted target of one fine-tuning step is, cell by cell,

    p_i ∝ exp((r_hat + g_hat) / (alpha + beta)) * p_prev^(beta / (alpha + beta)) * p_pre^(alpha / (alpha + beta))
"""
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.spatial.distance import cdist
from scipy.special import logsumexp

from app.core.errors import DegenerateDensityError, DomainError, ShapeError
from app.models.pretrained import PretrainedModel
from app.models.reward_model import RewardSurrogate
from app.schemas.experiment import GridSpec
from app.schemas.world import NoiseSchedule
from app.services.reward_world import RewardLandscape
from app.services.sde_engine import DriftStack, simulate_from

logger = logging.getLogger(__name__)

KL_SMOOTHING = 1e-12
MIN_EFFECTIVE_SAMPLES = 10
_DIVERSITY_CHUNK = 1024

RewardSource = Union[RewardSurrogate, Callable[[np.ndarray], np.ndarray], np.ndarray]


@dataclass
class GridDensity:
    """Cell probabilities on a rectangular grid.

    Attributes:
        grid: axis ranges and resolutions
        probs: array of shape ``grid.cells``, nonnegative, summing to 1
        out_of_range_mass: fraction of samples that fell outside the grid (empirical densities)
    """
    grid: GridSpec
    probs: np.ndarray
    out_of_range_mass: float = 0.0

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=np.float64)
        if self.probs.shape != tuple(self.grid.cells):
            raise ShapeError(f"Grid has cells {self.grid.cells} but probabilities have shape {self.probs.shape}")

    def flat(self) -> np.ndarray:
        return self.probs.reshape(-1)


def grid_edges(grid: GridSpec) -> List[np.ndarray]:
    return [np.linspace(lo, hi, n + 1) for lo, hi, n in zip(grid.lower, grid.upper, grid.cells)]


def grid_centers(grid: GridSpec) -> np.ndarray:
    """Cell centers in C order, shape ``(prod(cells), d)``."""
    axes = [0.5 * (e[:-1] + e[1:]) for e in grid_edges(grid)]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.reshape(-1) for m in mesh], axis=1)


def _normalize_log(grid: GridSpec, log_mass: np.ndarray) -> GridDensity:
    finite = np.isfinite(log_mass)
    if not np.any(finite):
        raise DegenerateDensityError("Grid density has no mass to normalize")
    log_mass = np.where(finite, log_mass, -np.inf)
    probs = np.exp(log_mass - logsumexp(log_mass[finite]))
    return GridDensity(grid, probs.reshape(grid.cells))


def analytic_density(log_density: Callable[[np.ndarray], np.ndarray], grid: GridSpec) -> GridDensity:
    """Discretize a log density by its values at the cell centers."""
    return _normalize_log(grid, np.asarray(log_density(grid_centers(grid)), dtype=np.float64))


def pretrained_density(model: PretrainedModel, grid: GridSpec) -> GridDensity:
    if grid.dim != model.dim:
        raise ShapeError(f"Grid has {grid.dim} axes, model is {model.dim}-dimensional")
    return analytic_density(model.log_density, grid)


def _reward_values(source: RewardSource, grid: GridSpec) -> np.ndarray:
    if isinstance(source, RewardSurrogate):
        return np.asarray(source.value(grid_centers(grid)), dtype=np.float64)
    if callable(source):
        return np.asarray(source(grid_centers(grid)), dtype=np.float64)
    values = np.asarray(source, dtype=np.float64).reshape(-1)
    if values.size != int(np.prod(grid.cells)):
        raise ShapeError(f"Expected {int(np.prod(grid.cells))} reward values, got {values.size}")
    return values


def _check_aligned(p: GridDensity, q: GridDensity) -> None:
    if p.grid != q.grid or p.probs.shape != q.probs.shape:
        raise ShapeError("Grid densities are defined on different grids")


def _safe_log(probs: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore"):
        return np.log(probs)


def grid_target_density(surrogate: RewardSource, prev: GridDensity, pre: GridDensity,
                        alpha: float, beta: float) -> GridDensity:
    """Product-form target of one fine-tuning step, normalized on the grid.

    Raises:
        DomainError: if ``alpha + beta`` is not positive
        ShapeError: if the grids differ
        DegenerateDensityError: if no cell keeps any mass
    """
    _check_aligned(prev, pre)
    gamma = alpha + beta
    if alpha < 0 or beta < 0 or gamma <= 0:
        raise DomainError(f"Need alpha, beta >= 0 with alpha + beta > 0, got {alpha}, {beta}")
    log_mass = _reward_values(surrogate, pre.grid) / gamma
    if beta > 0:
        log_mass = log_mass + (beta / gamma) * _safe_log(prev.flat())
    if alpha > 0:
        log_mass = log_mass + (alpha / gamma) * _safe_log(pre.flat())
    return _normalize_log(pre.grid, log_mass)


def empirical_density(samples: np.ndarray, grid: GridSpec) -> GridDensity:
    """Histogram of samples normalized over the in-range mass.

    Raises:
        DegenerateDensityError: if every sample is outside the grid
    """
    samples = np.asarray(samples, dtype=np.float64).reshape(-1, grid.dim)
    edges = grid_edges(grid)
    counts, _ = np.histogramdd(samples, bins=edges)
    inside = counts.sum()
    if inside == 0:
        raise DegenerateDensityError("All samples fall outside the evaluation grid")
    return GridDensity(grid, counts / inside, out_of_range_mass=1.0 - inside / samples.shape[0])


def tv_distance(p: GridDensity, q: GridDensity) -> float:
    """Total variation ``sum |p - q| / 2``."""
    _check_aligned(p, q)
    return float(min(1.0, 0.5 * np.abs(p.probs - q.probs).sum()))


def kl_grid(p: GridDensity, q: GridDensity) -> float:
    """``KL(p || q)`` with additive smoothing on ``p`` only."""
    _check_aligned(p, q)
    ps = p.flat() + KL_SMOOTHING
    ps = ps / ps.sum()
    qs = np.maximum(q.flat(), np.finfo(np.float64).tiny)
    return float(max(0.0, np.sum(ps * (np.log(ps) - np.log(qs)))))


def grid_value(q: GridDensity, rewards: np.ndarray, pre: GridDensity, alpha: float) -> float:
    """``J_alpha(q)`` evaluated exactly on the grid."""
    _check_aligned(q, pre)
    qs = q.flat()
    mask = qs > 0
    kl = float(np.sum(qs[mask] * (np.log(qs[mask]) - _safe_log(pre.flat()[mask])))) if alpha > 0 else 0.0
    return float(np.dot(qs, rewards)) - alpha * kl


@dataclass
class ValueReport:
    """Evaluation of one sample set.

    ``J_alpha`` is ``mean_reward - alpha * kl_grid`` when a grid is available
    and ``mean_reward - alpha * kl_pathwise`` otherwise.
    """
    mean_reward: float
    kl_grid: Optional[float]
    kl_pathwise: Optional[float]
    J_alpha: float
    diversity: float
    alpha: float
    frac_infeasible: float
    tv_to_target: Optional[float] = None
    extras: dict = field(default_factory=dict)


def diversity(samples: np.ndarray, metric: str = "euclidean") -> float:
    """Mean pairwise distance over distinct unordered pairs.

    Raises:
        DomainError: with fewer than two samples
    """
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim == 1:
        samples = samples[:, None]
    n = samples.shape[0]
    if n < 2:
        raise DomainError("diversity needs at least two samples")
    pairs = n * (n - 1) / 2.0
    if samples.shape[1] == 1 and metric == "euclidean":
        ordered = np.sort(samples[:, 0])
        ranks = np.arange(n)
        return float(np.sum(ordered * (2.0 * ranks - n + 1)) / pairs)
    total = 0.0
    for lo in range(0, n, _DIVERSITY_CHUNK):
        block = cdist(samples[lo:lo + _DIVERSITY_CHUNK], samples, metric=metric)
        total += float(block.sum())
    return total / (2.0 * pairs)


def estimate_value(samples: np.ndarray, landscape: RewardLandscape, pre: Optional[GridDensity],
                   alpha: float, kl_pathwise: Optional[float] = None,
                   target: Optional[GridDensity] = None) -> ValueReport:
    """Evaluate a sample set against the true reward.

    Raises:
        DomainError: if ``alpha`` is negative or no KL estimate is available
        DegenerateDensityError: if all samples fall outside the grid
    """
    if alpha < 0:
        raise DomainError(f"alpha must be nonnegative, got {alpha}")
    samples = np.asarray(samples, dtype=np.float64).reshape(-1, landscape.dim)
    rewards = landscape(samples)
    mean_reward = float(np.mean(rewards))
    kl_value, tv = None, None
    if pre is not None:
        empirical = empirical_density(samples, pre.grid)
        kl_value = kl_grid(empirical, pre)
        if target is not None:
            tv = tv_distance(empirical, target)
    kl_used = kl_value if kl_value is not None else kl_pathwise
    if kl_used is None:
        if alpha > 0:
            raise DomainError("estimate_value needs a grid or a pathwise KL when alpha > 0")
        kl_used = 0.0
    return ValueReport(
        mean_reward=mean_reward,
        kl_grid=kl_value,
        kl_pathwise=kl_pathwise,
        J_alpha=mean_reward - alpha * kl_used,
        diversity=diversity(samples) if samples.shape[0] >= 2 else 0.0,
        alpha=alpha,
        frac_infeasible=float(np.mean(~landscape.model.is_feasible(samples))),
        tv_to_target=tv,
    )


def comparator_optimum(landscape: RewardLandscape, pre: GridDensity, alpha: float) -> Tuple[GridDensity, float]:
    """Maximizer ``pi* ∝ exp(r / alpha) p_pre`` of ``J_alpha`` on the grid and its value.

    Raises:
        DomainError: if ``alpha`` is not positive
    """
    if alpha <= 0:
        raise DomainError("comparator_optimum needs alpha > 0")
    rewards = landscape(grid_centers(pre.grid))
    optimum = _normalize_log(pre.grid, rewards / alpha + _safe_log(pre.flat()))
    return optimum, grid_value(optimum, rewards, pre, alpha)


def comparator_value_mc(landscape: RewardLandscape, pre_samples: np.ndarray, alpha: float) -> float:
    """``max_p J_alpha(p) = alpha log E_pre[exp(r / alpha)]`` from pre-trained samples.

    Used when no grid is available; the maximizer is the same tilt as in
    :func:`comparator_optimum`.
    """
    if alpha <= 0:
        raise DomainError("comparator_value_mc needs alpha > 0")
    rewards = np.asarray(landscape(np.asarray(pre_samples, dtype=np.float64)), dtype=np.float64)
    return float(alpha * (logsumexp(rewards / alpha) - math.log(rewards.size)))


class RegretPoint(NamedTuple):
    iteration: int
    regret: float
    statistical_error: Optional[float]


def cesaro_regret(values: Sequence[float], comparator: float,
                  bonuses: Optional[Sequence[float]] = None) -> List[RegretPoint]:
    """Running ``comparator - mean_{k<=i} J(p_k)`` and ``(2 / i) sum_{k<=i} E[g_hat_k]``."""
    out = []
    for i in range(1, len(values) + 1):
        regret = comparator - float(np.mean(values[:i]))
        error = 2.0 * float(np.sum(bonuses[:i])) / i if bonuses is not None else None
        out.append(RegretPoint(i, regret, error))
    return out


def regret_curve(record, comparator: float) -> List[RegretPoint]:
    """Cesàro regret of every iteration of an evaluated run record."""
    values = [it.report.J_alpha for it in record.iterations]
    bonuses = [it.mean_bonus for it in record.iterations]
    if any(b is None for b in bonuses):
        bonuses = None
    return cesaro_regret(values, comparator, bonuses)


@dataclass
class FeynmanKacProbe:
    """Query points for the value-function check.

    Attributes:
        points: (grid index, state) pairs
        alpha: weight against the pre-trained drift
        beta: weight against the previous drift
        n_samples: Monte Carlo paths per point
        seed: noise seed shared by all points
    """
    points: List[Tuple[int, np.ndarray]]
    alpha: float
    beta: float
    n_samples: int = 4096
    seed: int = 0

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0 or self.alpha + self.beta <= 0:
            raise DomainError("Feynman-Kac probes need alpha, beta >= 0 with alpha + beta > 0")

    @property
    def gamma(self) -> float:
        return self.alpha + self.beta


@dataclass
class FeynmanKacEstimate:
    """Estimate of ``exp(v_t(x) / gamma)``; ``log_value`` is ``v_t(x) / gamma``."""
    step: int
    t: float
    x: np.ndarray
    value: float
    standard_error: float
    log_value: float
    effective_samples: float
    low_precision: bool


def _fk_weights(prev: DriftStack, terminal: Callable[[np.ndarray], np.ndarray], schedule: NoiseSchedule,
                probe: FeynmanKacProbe, step: int, x: np.ndarray) -> np.ndarray:
    gamma = probe.gamma
    blended = prev.blended(probe.beta / gamma)
    scale = math.sqrt(probe.alpha * probe.beta) / gamma

    def penalty(t: float, z: np.ndarray) -> np.ndarray:
        return scale * prev.residual_sum(t, z)

    x_T, integral = simulate_from(blended, schedule, step, x, probe.n_samples, probe.seed,
                                  penalty=penalty if scale > 0 else None)
    return np.asarray(terminal(x_T), dtype=np.float64) / gamma - integral


def feynman_kac_value(probe: FeynmanKacProbe, surrogate: RewardSource, prev: DriftStack,
                      schedule: NoiseSchedule) -> List[FeynmanKacEstimate]:
    """Monte Carlo estimate of ``exp(v_t(x) / gamma)`` at every probe point.

    Paths run under the blended drift ``(alpha f_pre + beta f_prev) / gamma``
    and are weighted by ``exp(terminal / gamma - alpha beta / gamma^2 int |f_prev - f_pre|^2 / (2 sigma^2))``.
    Estimates with fewer than ten effective samples are flagged and logged.
    """
    terminal = surrogate.value if isinstance(surrogate, RewardSurrogate) else surrogate
    grid = schedule.grid()
    out = []
    for step, x in probe.points:
        x = np.asarray(x, dtype=np.float64).reshape(-1)
        w = _fk_weights(prev, terminal, schedule, probe, step, x)
        log_mean = float(logsumexp(w) - math.log(w.size))
        shifted = np.exp(w - w.max())
        ess = float(shifted.sum() ** 2 / np.sum(shifted ** 2))
        se = float(math.exp(w.max()) * np.std(shifted, ddof=1) / math.sqrt(w.size)) if w.size > 1 else 0.0
        low = ess < MIN_EFFECTIVE_SAMPLES
        if low:
            logger.warning("Low effective sample size in Feynman-Kac estimate",
                           extra={"step": step, "effective_samples": ess})
        out.append(FeynmanKacEstimate(step, float(grid[step]), x, math.exp(log_mean), se, log_mean, ess, low))
    return out


@dataclass
class DriftCheck:
    """Trained drift versus the drift implied by the value function."""
    points: List[Tuple[int, np.ndarray]]
    formula: np.ndarray
    trained: np.ndarray

    @property
    def deviations(self) -> np.ndarray:
        return np.linalg.norm(self.formula - self.trained, axis=1)

    @property
    def mean_absolute_deviation(self) -> float:
        return float(np.mean(np.abs(self.formula - self.trained)))


def feynman_kac_drift_check(probe: FeynmanKacProbe, surrogate: RewardSource, prev: DriftStack,
                            trained: DriftStack, schedule: NoiseSchedule, h: float = 1e-2) -> DriftCheck:
    """Compare ``trained`` with ``sigma^2 grad(v / gamma) + (alpha f_pre + beta f_prev) / gamma``.

    The gradient uses central differences with common random numbers.
    """
    terminal = surrogate.value if isinstance(surrogate, RewardSurrogate) else surrogate
    grid = schedule.grid()
    blended = prev.blended(probe.beta / probe.gamma)
    formula, actual = [], []
    for step, x in probe.points:
        x = np.asarray(x, dtype=np.float64).reshape(-1)
        t = float(grid[step])
        grad = np.zeros_like(x)
        for i in range(x.size):
            shift = np.zeros_like(x)
            shift[i] = h
            up = _fk_weights(prev, terminal, schedule, probe, step, x + shift)
            down = _fk_weights(prev, terminal, schedule, probe, step, x - shift)
            grad[i] = (logsumexp(up) - logsumexp(down)) / (2.0 * h)
        formula.append(schedule.sigma(t) ** 2 * grad + blended.drift(t, x[None, :])[0])
        actual.append(trained.drift(t, x[None, :])[0])
    return DriftCheck(list(probe.points), np.array(formula), np.array(actual))
