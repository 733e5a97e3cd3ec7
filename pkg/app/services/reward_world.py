"""Ground-truth rewards and the budgeted feedback channel.

The feedback channel is the only place where reward queries are counted.
"""
import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Tuple, Union

import numpy as np

from app.core.errors import BudgetError, ShapeError
from app.models.pretrained import PretrainedModel
from app.models.reward_model import FeatureMap
from app.schemas.world import RewardSpec

logger = logging.getLogger(__name__)


def realizable_theta(features: FeatureMap, seed: int) -> np.ndarray:
    """Weights whose linear reward ``theta . phi`` stays inside [0, 1].

    The constant feature carries 0.5 and the other weights form a random
    combination with L1 norm 0.5 on features bounded by 1 after rescaling.
    """
    rng = np.random.default_rng(seed)
    w = rng.standard_normal(features.dim - 1)
    w = w / np.sum(np.abs(w))
    theta = np.concatenate([[0.5], 0.5 * w])
    return theta / features.scale


class RewardLandscape:
    """Reward ``r(x)`` in [0, 1], zero outside the feasible set of ``model``."""

    def __init__(self, spec: RewardSpec, model: PretrainedModel):
        self.spec = spec
        self.model = model
        self.features: Optional[FeatureMap] = None
        self.theta_star: Optional[np.ndarray] = None
        if spec.kind == "linear_in_features":
            self.features = FeatureMap(spec.features)
            if spec.theta_star is not None:
                self.theta_star = np.asarray(spec.theta_star, dtype=np.float64)
            else:
                self.theta_star = realizable_theta(self.features, spec.theta_seed)
        else:
            self.centers = np.array([b.center for b in spec.bumps], dtype=np.float64)
            self.widths = np.array([b.width for b in spec.bumps], dtype=np.float64)
            self.heights = np.array([b.height for b in spec.bumps], dtype=np.float64)
        dim = spec.dim()
        if dim is not None and dim != model.dim:
            raise ShapeError(f"Reward is {dim}-dimensional but the pretrained model is {model.dim}-dimensional")

    @property
    def dim(self) -> int:
        return self.model.dim

    def unconstrained(self, x: np.ndarray) -> np.ndarray:
        """Reward before the feasibility mask, clamped to [0, 1]; ``x`` is (n, d)."""
        if self.spec.kind == "linear_in_features":
            raw = self.features(x) @ self.theta_star
        else:
            sq = np.sum((x[:, None, :] - self.centers[None, :, :]) ** 2, axis=2)
            raw = np.max(self.heights * np.exp(-sq / (2.0 * self.widths ** 2)), axis=1)
        return np.clip(raw, 0.0, 1.0)

    def __call__(self, x) -> Union[float, np.ndarray]:
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        batch = x[None, :] if single else x
        if batch.ndim != 2 or batch.shape[1] != self.dim:
            raise ShapeError(f"Expected states of dimension {self.dim}, got shape {x.shape}")
        out = np.where(self.model.is_feasible(batch), self.unconstrained(batch), 0.0)
        return float(out[0]) if single else out


def true_reward(landscape: RewardLandscape, x) -> Union[float, np.ndarray]:
    """Ground-truth reward; exactly 0 outside the feasible set."""
    return landscape(x)


@dataclass
class FeedbackChannel:
    """Noisy reward oracle with a hard query budget.

    Attributes:
        noise_std: standard deviation of the Gaussian feedback noise
        budget: total queries allowed (M)
        rng_seed: seed of the noise stream
        queries_used: queries answered so far
    """
    noise_std: float
    budget: int
    rng_seed: int = 0
    queries_used: int = 0
    _rng: np.random.Generator = field(init=False, repr=False)

    def __post_init__(self):
        self._rng = np.random.default_rng(self.rng_seed)


def remaining_budget(channel: FeedbackChannel) -> int:
    return channel.budget - channel.queries_used


def query_feedback(channel: FeedbackChannel, landscape: RewardLandscape, xs) -> np.ndarray:
    """Answer a batch of queries with ``r(x) + eps``, ``eps ~ N(0, noise_std^2)``.

    Raises:
        BudgetError: if the batch does not fit in the remaining budget; nothing is consumed
    """
    xs = np.asarray(xs, dtype=np.float64).reshape(-1, landscape.dim)
    n = xs.shape[0]
    if n > remaining_budget(channel):
        raise BudgetError(
            f"Feedback budget exceeded: {n} queries requested, {remaining_budget(channel)} remaining"
        )
    rewards = landscape(xs)
    noise = channel._rng.normal(0.0, 1.0, size=n) * channel.noise_std
    channel.queries_used += n
    logger.info("Feedback queried", extra={"queries": n, "queries_used": channel.queries_used,
                                            "budget": channel.budget})
    return rewards + noise


@dataclass
class FeedbackView:
    """Read-only slice of a dataset."""
    xs: np.ndarray
    ys: np.ndarray
    tags: np.ndarray

    def __len__(self) -> int:
        return len(self.ys)


@dataclass
class FeedbackDataset:
    """Append-only list of (x, y, iteration) entries."""
    dim: int
    _xs: List[np.ndarray] = field(default_factory=list, repr=False)
    _ys: List[float] = field(default_factory=list, repr=False)
    _tags: List[int] = field(default_factory=list, repr=False)

    def __len__(self) -> int:
        return len(self._ys)

    def append(self, xs, ys, iteration: int) -> None:
        xs = np.asarray(xs, dtype=np.float64).reshape(-1, self.dim)
        ys = np.asarray(ys, dtype=np.float64).reshape(-1)
        if xs.shape[0] != ys.shape[0]:
            raise ShapeError(f"{xs.shape[0]} samples but {ys.shape[0]} labels")
        if self._tags and iteration < self._tags[-1]:
            raise ValueError(f"Iteration tags must not decrease ({iteration} after {self._tags[-1]})")
        for x, y in zip(xs, ys):
            self._xs.append(x.copy())
            self._ys.append(float(y))
            self._tags.append(int(iteration))

    def view(self, max_iteration: Optional[int] = None) -> FeedbackView:
        """Entries with ``iteration <= max_iteration`` (all entries when None)."""
        tags = np.asarray(self._tags, dtype=np.int64)
        keep = np.ones(len(tags), dtype=bool) if max_iteration is None else tags <= max_iteration
        xs = np.asarray(self._xs, dtype=np.float64).reshape(-1, self.dim)[keep]
        ys = np.asarray(self._ys, dtype=np.float64)[keep]
        return FeedbackView(xs, ys, tags[keep])

    @property
    def xs(self) -> np.ndarray:
        return self.view().xs

    @property
    def ys(self) -> np.ndarray:
        return self.view().ys

    def sizes_by_iteration(self) -> List[Tuple[int, int]]:
        """Cumulative dataset size after each iteration tag."""
        out, count = [], 0
        for tag in sorted(set(self._tags)):
            count += self._tags.count(tag)
            out.append((tag, count))
        return out

    def to_csv(self, path: Union[str, Path]) -> None:
        """Write columns ``iteration, x0..x{d-1}, y``."""
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["iteration"] + [f"x{i}" for i in range(self.dim)] + ["y"])
            for tag, x, y in zip(self._tags, self._xs, self._ys):
                writer.writerow([tag] + [repr(float(v)) for v in x] + [repr(y)])


def feedback_noise_check(channel: FeedbackChannel, landscape: RewardLandscape, x, n: int) -> Tuple[float, float, float]:
    """Mean, standard deviation and lag-1 autocorrelation of ``n`` repeated queries at ``x``."""
    ys = query_feedback(channel, landscape, np.repeat(np.atleast_2d(x), n, axis=0))
    centered = ys - ys.mean()
    denom = float(np.sum(centered ** 2))
    lag1 = float(np.sum(centered[1:] * centered[:-1]) / denom) if denom > 0 else 0.0
    return float(ys.mean()), float(ys.std(ddof=1)) if n > 1 else 0.0, lag1 if math.isfinite(lag1) else 0.0
