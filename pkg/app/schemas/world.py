"""Configuration schemas for the simulated world.

These models describe the pre-trained diffusion model (mixture data
distribution plus noise schedule), the ground-truth reward landscape and
the feature maps shared by the reward landscape and the linear surrogate.
"""
import math
from typing import List, Literal, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator


class ConfigModel(BaseModel):
    """Base class for config sections: unknown keys are rejected."""
    model_config = ConfigDict(extra="forbid")


class GmmSpec(ConfigModel):
    """Gaussian-mixture data distribution of the pre-trained model.

    Attributes:
        weights: mixture weights on the simplex
        means: one mean vector per component
        covariances: one symmetric positive-definite matrix per component
    """
    weights: List[float] = Field(..., min_length=1, description="Mixture weights, summing to 1")
    means: List[List[float]] = Field(..., min_length=1, description="Component means")
    covariances: List[List[List[float]]] = Field(..., min_length=1, description="Component covariances")

    @model_validator(mode="after")
    def check_shapes(self) -> "GmmSpec":
        m = len(self.weights)
        if len(self.means) != m or len(self.covariances) != m:
            raise ValueError("weights, means and covariances must have one entry per component")
        d = len(self.means[0])
        if d == 0:
            raise ValueError("means must be non-empty vectors")
        for k in range(m):
            if len(self.means[k]) != d:
                raise ValueError(f"mean {k} has dimension {len(self.means[k])}, expected {d}")
            cov = self.covariances[k]
            if len(cov) != d or any(len(row) != d for row in cov):
                raise ValueError(f"covariance {k} must be {d}x{d}")
        if any(w < 0 for w in self.weights):
            raise ValueError("weights must be nonnegative")
        if abs(math.fsum(self.weights) - 1.0) > 1e-12:
            raise ValueError(f"weights must sum to 1, got {math.fsum(self.weights)!r}")
        return self

    @property
    def dim(self) -> int:
        return len(self.means[0])

    @classmethod
    def isotropic(cls, weights: List[float], means: List[List[float]], variances: List[float]) -> "GmmSpec":
        """Build a mixture whose components have covariance ``variance * I``."""
        d = len(means[0])
        covs = [(v * np.eye(d)).tolist() for v in variances]
        return cls(weights=weights, means=means, covariances=covs)


class NoiseSchedule(ConfigModel):
    """Variance-preserving schedule with a linear noise rate.

    The noise rate in forward time ``s`` is ``b(s) = b_min + s (b_max - b_min) / T``;
    generative time runs ``t = T - s`` and the diffusion coefficient is
    ``sigma(t)^2 = b(T - t)``.
    """
    kind: Literal["variance_preserving"] = "variance_preserving"
    b_min: float = Field(0.1, gt=0)
    b_max: float = Field(20.0, gt=0)
    T: float = Field(1.0, gt=0)
    n_steps: int = Field(50, ge=2)
    sigma_override: Optional[float] = Field(
        None, gt=0, description="Constant diffusion coefficient replacing sqrt(b(T - t))"
    )

    @model_validator(mode="after")
    def check_rates(self) -> "NoiseSchedule":
        if self.b_min > self.b_max:
            raise ValueError("b_min must not exceed b_max")
        return self

    @property
    def dt(self) -> float:
        return self.T / self.n_steps

    def grid(self) -> np.ndarray:
        """Generative time grid ``t_0 = 0 < ... < t_N = T``."""
        return np.linspace(0.0, self.T, self.n_steps + 1)

    def rate(self, s: float) -> float:
        """Noise rate ``b(s)`` at forward time ``s``."""
        return self.b_min + s * (self.b_max - self.b_min) / self.T

    def integrated_rate(self, s: float) -> float:
        """Integral of ``b`` over ``[0, s]``."""
        return self.b_min * s + 0.5 * (self.b_max - self.b_min) * s * s / self.T

    def alpha_bar(self, s: float) -> float:
        """Signal fraction ``exp(-int_0^s b)`` at forward time ``s``."""
        return math.exp(-self.integrated_rate(s))

    def sigma(self, t: float) -> float:
        """Diffusion coefficient at generative time ``t``."""
        if self.sigma_override is not None:
            return self.sigma_override
        return math.sqrt(self.rate(self.T - t))


class FeatureMapSpec(ConfigModel):
    """Feature map phi used by linear rewards and the ridge surrogate.

    ``random_fourier`` features are ``(B / sqrt(D)) [1, cos(w_j . x + b_j)]``;
    ``polynomial`` features are all monomials of degree <= 2 divided by
    ``(1 + |x|^2)`` and scaled by ``B / sqrt(D)``. Both satisfy ``|phi(x)| <= B``.
    ``affine`` features ``(B / sqrt(D)) [1, x]`` are unbounded; they give rewards
    that are exactly linear in ``x``.
    """
    kind: Literal["random_fourier", "polynomial", "affine"] = "random_fourier"
    input_dim: int = Field(..., ge=1)
    dim: int = Field(64, ge=2, description="Number of features D")
    bound: float = Field(1.0, gt=0, description="Norm bound B")
    bandwidth: float = Field(1.0, gt=0, description="Length scale of random Fourier frequencies")
    seed: int = 0

    @model_validator(mode="after")
    def check_feature_dim(self) -> "FeatureMapSpec":
        if self.kind == "polynomial":
            d = self.input_dim
            expected = 1 + d + d * (d + 1) // 2
            if self.dim != expected:
                raise ValueError(f"polynomial features in {d} dimensions have dim {expected}")
        elif self.kind == "affine" and self.dim != self.input_dim + 1:
            raise ValueError(f"affine features in {self.input_dim} dimensions have dim {self.input_dim + 1}")
        return self


class Bump(ConfigModel):
    """One Gaussian bump ``height * exp(-|x - center|^2 / (2 width^2))``."""
    center: List[float]
    width: float = Field(..., gt=0)
    height: float = Field(1.0, ge=0, le=1)


class RewardSpec(ConfigModel):
    """Ground-truth reward landscape, clamped to [0, 1] and zero outside the feasible set."""
    kind: Literal["linear_in_features", "gaussian_bump", "multi_bump_hard_exploration"]
    bumps: List[Bump] = Field(default_factory=list, description="Bumps for the bump kinds")
    features: Optional[FeatureMapSpec] = Field(None, description="Feature map for linear rewards")
    theta_star: Optional[List[float]] = Field(
        None, description="Linear weights; drawn from theta_seed when omitted"
    )
    theta_seed: int = 0

    @model_validator(mode="after")
    def check_kind(self) -> "RewardSpec":
        if self.kind == "linear_in_features":
            if self.features is None:
                raise ValueError("linear_in_features rewards need a feature map")
            if self.theta_star is not None and len(self.theta_star) != self.features.dim:
                raise ValueError("theta_star length must equal the feature dimension")
        elif self.kind == "gaussian_bump":
            if len(self.bumps) != 1:
                raise ValueError("gaussian_bump rewards have exactly one bump")
        elif len(self.bumps) < 2:
            raise ValueError("multi_bump_hard_exploration rewards need at least two bumps")
        dims = {len(b.center) for b in self.bumps}
        if len(dims) > 1:
            raise ValueError("all bump centers must share one dimension")
        return self

    def dim(self) -> Optional[int]:
        if self.features is not None:
            return self.features.input_dim
        return len(self.bumps[0].center) if self.bumps else None
