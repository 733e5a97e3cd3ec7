"""Experiment configuration schemas.

An experiment file has five sections (``world``, ``method``, ``planner``,
``evaluation``, ``seeds``) plus a name. Every section rejects unknown keys and
the cross-section checks run in :class:`ExperimentConfig`.
"""
from typing import List, Literal, Optional

from pydantic import Field, field_validator, model_validator

from app.core.seeding import derive_seed
from app.schemas.world import ConfigModel, FeatureMapSpec, GmmSpec, NoiseSchedule, RewardSpec

Activation = Literal["tanh", "relu", "silu"]
MethodName = Literal["seiko-ucb", "seiko-bootstrap", "greedy", "nonadaptive", "guidance", "ppo"]

GREEDY_ALPHA_FLOOR = 1e-6


class MlpSpec(ConfigModel):
    """Architecture of a small fully connected network.

    ``layer_widths`` lists every layer including input and output; the input
    width counts the sinusoidal time features, so a drift network in ``d``
    dimensions has ``layer_widths[0] == d + time_embedding_dim``.
    """
    layer_widths: List[int] = Field(..., description="Input, hidden and output widths")
    activation: Activation = "tanh"
    time_embedding_dim: int = Field(8, ge=0, description="Number of sinusoidal time features")

    @field_validator("layer_widths")
    @classmethod
    def check_widths(cls, widths: List[int]) -> List[int]:
        if len(widths) < 3:
            raise ValueError("an MLP needs an input, at least one hidden layer and an output")
        if any(w <= 0 for w in widths):
            raise ValueError("layer widths must be positive")
        return widths

    @model_validator(mode="after")
    def check_embedding(self) -> "MlpSpec":
        if self.time_embedding_dim % 2:
            raise ValueError("time_embedding_dim must be even (sin and cos pairs)")
        if self.layer_widths[0] <= self.time_embedding_dim:
            raise ValueError("input width must exceed the time embedding width")
        return self

    @property
    def state_dim(self) -> int:
        """Width of the state part of the input."""
        return self.layer_widths[0] - self.time_embedding_dim

    @property
    def output_dim(self) -> int:
        return self.layer_widths[-1]


class DriftNetConfig(ConfigModel):
    """Residual drift network used for every fine-tuning iteration."""
    hidden_widths: List[int] = Field(default_factory=lambda: [64, 64])
    activation: Activation = "tanh"
    time_embedding_dim: int = Field(8, ge=0)

    def spec(self, dim: int) -> MlpSpec:
        widths = [dim + self.time_embedding_dim, *self.hidden_widths, dim]
        return MlpSpec(layer_widths=widths, activation=self.activation,
                       time_embedding_dim=self.time_embedding_dim)


class BootstrapTrainConfig(ConfigModel):
    """Training setup for each bootstrap regressor head."""
    epochs: int = Field(300, ge=1)
    learning_rate: float = Field(1e-2, gt=0)
    hidden_widths: List[int] = Field(default_factory=lambda: [32, 32])
    activation: Activation = "tanh"

    def spec(self, dim: int) -> MlpSpec:
        return MlpSpec(layer_widths=[dim, *self.hidden_widths, 1], activation=self.activation,
                       time_embedding_dim=0)


class PpoConfig(ConfigModel):
    clip_eps: float = Field(0.1, gt=0, lt=1)
    epochs: int = Field(4, ge=1, description="Clipped updates per feedback round")
    learning_rate: float = Field(1e-3, gt=0)


class PlannerConfig(ConfigModel):
    """Settings for direct backpropagation through the discretized SDE."""
    n_paths_per_step: int = Field(64, ge=1)
    n_opt_steps: int = Field(100, ge=0)
    learning_rate: float = Field(1e-3, gt=0)
    beta1: float = Field(0.9, ge=0, lt=1)
    beta2: float = Field(0.999, ge=0, lt=1)
    eps: float = Field(1e-8, gt=0)
    seed: int = 0
    objective_log_every: int = Field(10, ge=1)
    max_grad_norm: Optional[float] = Field(None, gt=0, description="Clip the gradient norm; off when unset")


class MethodConfig(ConfigModel):
    """Online method and its hyperparameters."""
    name: MethodName = "seiko-ucb"
    K: int = Field(4, ge=1, description="Online iterations")
    batch_sizes: List[int] = Field(..., description="Feedback queries per iteration, M_1..M_K")
    alpha: float = Field(0.01, ge=0, description="Weight of the KL term against the pretrained model")
    beta_rule: Literal["theory", "constant", "custom"] = "theory"
    beta: float = Field(0.0, ge=0, description="Previous-iterate KL weight for beta_rule=constant")
    beta_values: Optional[List[float]] = Field(None, description="Per-iteration weights for beta_rule=custom")
    ridge_lambda: float = Field(1.0, gt=0)
    delta: float = Field(0.05, gt=0, lt=1)
    c1: Optional[float] = Field(None, ge=0, description="Confidence scale; derived from delta when unset")
    features: Optional[FeatureMapSpec] = None
    bootstrap_heads: int = Field(3, ge=2)
    bootstrap: BootstrapTrainConfig = Field(default_factory=BootstrapTrainConfig)
    baseline_model: Literal["ridge", "bootstrap"] = Field(
        "ridge", description="Surrogate used by greedy, nonadaptive and guidance"
    )
    guidance_level: float = Field(10.0, ge=0)
    ppo: PpoConfig = Field(default_factory=PpoConfig)
    drift: DriftNetConfig = Field(default_factory=DriftNetConfig)

    @field_validator("batch_sizes")
    @classmethod
    def check_batches(cls, sizes: List[int]) -> List[int]:
        if not sizes or any(m < 1 for m in sizes):
            raise ValueError("batch sizes must be positive")
        return sizes

    @model_validator(mode="after")
    def check_schedule(self) -> "MethodConfig":
        if len(self.batch_sizes) != self.K:
            raise ValueError(f"batch_sizes has {len(self.batch_sizes)} entries but K = {self.K}")
        if self.beta_rule == "custom":
            if self.beta_values is None or len(self.beta_values) != self.K:
                raise ValueError("beta_rule custom needs beta_values with K entries")
            if any(b < 0 for b in self.beta_values):
                raise ValueError("beta_values must be nonnegative")
        return self

    @property
    def oracle_kind(self) -> str:
        """Uncertainty oracle: ``ucb``, ``bootstrap`` or ``none``."""
        return {"seiko-ucb": "ucb", "seiko-bootstrap": "bootstrap"}.get(self.name, "none")

    @property
    def model_kind(self) -> str:
        """Surrogate family: ``ridge`` or ``bootstrap``."""
        if self.name == "seiko-ucb":
            return "ridge"
        if self.name == "seiko-bootstrap":
            return "bootstrap"
        return self.baseline_model

    def feature_map(self, dim: int) -> FeatureMapSpec:
        return self.features if self.features is not None else FeatureMapSpec(input_dim=dim)


class GridSpec(ConfigModel):
    """Rectangular evaluation grid; one entry per state dimension."""
    lower: List[float]
    upper: List[float]
    cells: List[int]

    @model_validator(mode="after")
    def check_axes(self) -> "GridSpec":
        if not (len(self.lower) == len(self.upper) == len(self.cells)) or not self.cells:
            raise ValueError("lower, upper and cells must have one entry per dimension")
        if any(lo >= hi for lo, hi in zip(self.lower, self.upper)):
            raise ValueError("every axis needs lower < upper")
        if any(c < 2 for c in self.cells):
            raise ValueError("every axis needs at least 2 cells")
        return self

    @property
    def dim(self) -> int:
        return len(self.cells)

    @classmethod
    def default(cls, dim: int, half_width: float = 5.0) -> "GridSpec":
        cells = 512 if dim == 1 else 256
        return cls(lower=[-half_width] * dim, upper=[half_width] * dim, cells=[cells] * dim)


class EvaluationConfig(ConfigModel):
    alpha: float = Field(1e-5, ge=0, description="Alpha used by the evaluation value")
    n_samples: int = Field(2000, ge=2, description="Samples drawn from each p^(i) for evaluation")
    grid: Optional[GridSpec] = Field(None, description="Density grid; built from the dimension when unset")
    trajectory_dump: int = Field(16, ge=0, description="Paths per iteration written to trajectories.csv")


class SeedConfig(ConfigModel):
    """Master seed plus optional per-component overrides.

    Components without an override use a seed derived from the master.
    """
    master: int = 0
    sampling: Optional[int] = None
    feedback: Optional[int] = None
    surrogate: Optional[int] = None
    planner: Optional[int] = None
    evaluation: Optional[int] = None

    def resolve(self, component: str) -> int:
        codes = {"sampling": 1, "feedback": 2, "surrogate": 3, "planner": 4, "evaluation": 5}
        if component not in codes:
            raise KeyError(f"Unknown seed component: {component}")
        override = getattr(self, component)
        return override if override is not None else derive_seed(self.master, codes[component])


class WorldConfig(ConfigModel):
    gmm: GmmSpec
    schedule: NoiseSchedule = Field(default_factory=NoiseSchedule)
    reward: RewardSpec
    noise_std: float = Field(0.1, ge=0, description="Feedback noise standard deviation")
    budget: int = Field(..., ge=1, description="Total feedback budget M")
    feasibility_ratio: float = Field(1e-4, gt=0, lt=1, description="X_pre threshold relative to max density")

    @model_validator(mode="after")
    def check_dimensions(self) -> "WorldConfig":
        reward_dim = self.reward.dim()
        if reward_dim is not None and reward_dim != self.gmm.dim:
            raise ValueError(f"reward is {reward_dim}-dimensional but gmm is {self.gmm.dim}-dimensional")
        return self


class ExperimentConfig(ConfigModel):
    """A complete, validated experiment description."""
    name: str = "experiment"
    world: WorldConfig
    method: MethodConfig
    planner: PlannerConfig = Field(default_factory=PlannerConfig)
    evaluation: EvaluationConfig = Field(default_factory=EvaluationConfig)
    seeds: SeedConfig = Field(default_factory=SeedConfig)

    @model_validator(mode="after")
    def check_consistency(self) -> "ExperimentConfig":
        total = sum(self.method.batch_sizes)
        if total != self.world.budget:
            raise ValueError(f"batch sizes sum to {total} but the feedback budget is {self.world.budget}")
        d = self.world.gmm.dim
        if self.method.features is not None and self.method.features.input_dim != d:
            raise ValueError(f"feature map input_dim must equal the state dimension {d}")
        if self.evaluation.grid is not None and self.evaluation.grid.dim != d:
            raise ValueError(f"evaluation grid must have {d} axes")
        return self

    @property
    def dim(self) -> int:
        return self.world.gmm.dim

    def grid(self) -> Optional[GridSpec]:
        """Evaluation grid, or None when the dimension is too high for grids."""
        if self.evaluation.grid is not None:
            return self.evaluation.grid
        return GridSpec.default(self.dim) if self.dim <= 2 else None
