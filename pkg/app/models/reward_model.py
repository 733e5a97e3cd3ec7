"""Reward surrogates and uncertainty oracles.

Two families are supported:

* ridge regression on a fixed feature map with an elliptical UCB bonus
  ``C1 * min(1, sqrt(phi^T Sigma^-1 phi))`` where ``Sigma = lambda I + sum phi phi^T``
* a bootstrap ensemble of small MLP regressors, optimistic value = max over heads

Every surrogate evaluates on numpy arrays and on the gradient tape; the
planner differentiates the tape version with respect to terminal states.
"""
import json
import logging
import math
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import List, Optional, Protocol, Union

import numpy as np
from scipy import linalg

from app.autodiff import tape
from app.autodiff.adam import AdamState, adam_step
from app.autodiff.mlp import mlp_eval, mlp_forward_var, mlp_init
from app.autodiff.tape import ParamVector, Var
from app.core.errors import ConfigurationError, ShapeError
from app.core.seeding import derive_seed, make_rng
from app.schemas.experiment import BootstrapTrainConfig, MlpSpec
from app.schemas.world import FeatureMapSpec

logger = logging.getLogger(__name__)


class LabeledData(Protocol):
    """Anything exposing stacked inputs ``xs`` (n, d) and targets ``ys`` (n,)."""
    xs: np.ndarray
    ys: np.ndarray


class FeatureMap:
    """Feature map with ``|phi(x)| <= bound`` for every ``x`` (affine maps excepted)."""

    def __init__(self, spec: FeatureMapSpec):
        self.spec = spec
        self.scale = spec.bound / math.sqrt(spec.dim)
        if spec.kind == "random_fourier":
            rng = np.random.default_rng(spec.seed)
            self.frequencies = rng.normal(0.0, 1.0 / spec.bandwidth, size=(spec.input_dim, spec.dim - 1))
            self.phases = rng.uniform(0.0, 2.0 * math.pi, size=spec.dim - 1)
        elif spec.kind == "polynomial":
            d = spec.input_dim
            self.pairs = [(i, j) for i in range(d) for j in range(i, d)]

    @property
    def dim(self) -> int:
        return self.spec.dim

    @property
    def bound(self) -> float:
        return self.spec.bound

    def __call__(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        batch = x[None, :] if single else x
        if batch.ndim != 2 or batch.shape[1] != self.spec.input_dim:
            raise ShapeError(f"Feature map expects inputs of dimension {self.spec.input_dim}, got {x.shape}")
        ones = np.ones((batch.shape[0], 1))
        if self.spec.kind == "random_fourier":
            raw = np.concatenate([ones, np.cos(batch @ self.frequencies + self.phases)], axis=1)
        elif self.spec.kind == "affine":
            raw = np.concatenate([ones, batch], axis=1)
        else:
            quad = [batch[:, i] * batch[:, j] for i, j in self.pairs]
            raw = np.concatenate([ones, batch, np.stack(quad, axis=1)], axis=1)
            raw = raw / (1.0 + np.sum(batch * batch, axis=1, keepdims=True))
        out = self.scale * raw
        return out[0] if single else out

    def on_tape(self, x: Var) -> Var:
        """Tape version for a batch ``(n, d)``."""
        n = x.shape[0]
        ones = np.ones((n, 1))
        if self.spec.kind == "random_fourier":
            raw = tape.concat([ones, tape.cos(tape.affine(x, self.frequencies, self.phases))], axis=1)
        elif self.spec.kind == "affine":
            raw = tape.concat([ones, x], axis=1)
        else:
            quad = [tape.reshape(tape.column(x, i) * tape.column(x, j), (n, 1)) for i, j in self.pairs]
            raw = tape.concat([ones, x, *quad], axis=1)
            norm = tape.reshape(1.0 + tape.reduce_sum(tape.square(x), axis=1), (n, 1))
            raw = raw / norm
        return raw * self.scale


def c1_of_delta(delta: float, bound: float, ridge_lambda: float, noise_std: float,
                dim: int, iterations: int) -> float:
    """Confidence scale ``B sqrt(lambda) + sqrt(sigma^2 (log(1/delta^2) + d log(1 + K B^2 / (d lambda))))``."""
    if not 0.0 < delta < 1.0:
        raise ConfigurationError(f"delta must lie in (0, 1), got {delta}")
    if ridge_lambda <= 0 or bound <= 0 or dim <= 0 or iterations <= 0 or noise_std < 0:
        raise ConfigurationError("c1_of_delta needs positive bound, lambda, dim and K")
    information = math.log(1.0 / delta ** 2) + dim * math.log(1.0 + iterations * bound ** 2 / (dim * ridge_lambda))
    return bound * math.sqrt(ridge_lambda) + math.sqrt(noise_std ** 2 * information)


@dataclass(frozen=True)
class LinearRewardModel:
    """Ridge estimate with the Gram matrix it was solved with.

    Attributes:
        features: feature map phi
        theta_hat: fitted weights
        gram: ``lambda I + sum phi phi^T``
        ridge_lambda: ridge weight
        c1: confidence scale of the bonus
        delta: failure probability the scale was chosen for
        n_obs: number of observations behind the fit
    """
    features: FeatureMap
    theta_hat: np.ndarray
    gram: np.ndarray
    ridge_lambda: float
    c1: float
    delta: float
    n_obs: int = 0

    @cached_property
    def gram_inverse(self) -> np.ndarray:
        factor = linalg.cho_factor(self.gram, lower=True)
        return linalg.cho_solve(factor, np.eye(self.gram.shape[0]))

    @property
    def log_det_gram(self) -> float:
        factor = linalg.cho_factor(self.gram, lower=True)
        return float(2.0 * np.sum(np.log(np.diag(factor[0]))))

    def predict(self, x) -> Union[float, np.ndarray]:
        return self.features(x) @ self.theta_hat

    def bonus(self, x) -> Union[float, np.ndarray]:
        phi = self.features(x)
        quad = np.einsum("...i,ij,...j->...", phi, self.gram_inverse, phi)
        return self.c1 * np.minimum(1.0, np.sqrt(np.maximum(quad, 0.0)))

    def predict_on_tape(self, x: Var) -> Var:
        return tape.matmul(self.features.on_tape(x), self.theta_hat[:, None])

    def bonus_on_tape(self, x: Var) -> Var:
        phi = self.features.on_tape(x)
        quad = tape.reduce_sum(phi * tape.matmul(phi, self.gram_inverse), axis=1)
        return tape.minimum(tape.sqrt(quad), 1.0) * self.c1


def fit_ridge(data: LabeledData, features: FeatureMap, ridge_lambda: float, c1: float,
              delta: float) -> LinearRewardModel:
    """Solve ``(lambda I + sum phi phi^T) theta = sum phi y`` by Cholesky.

    Raises:
        ConfigurationError: if ``ridge_lambda`` is not positive
    """
    if ridge_lambda <= 0:
        raise ConfigurationError(f"ridge_lambda must be positive, got {ridge_lambda}")
    D = features.dim
    xs = np.asarray(data.xs, dtype=np.float64)
    ys = np.asarray(data.ys, dtype=np.float64)
    gram = ridge_lambda * np.eye(D)
    target = np.zeros(D)
    if len(ys):
        phi = features(xs.reshape(len(ys), -1))
        gram = gram + phi.T @ phi
        target = phi.T @ ys
    theta = linalg.cho_solve(linalg.cho_factor(gram, lower=True), target)
    logger.debug("Ridge surrogate fitted", extra={"n_obs": len(ys), "features": D})
    return LinearRewardModel(features, theta, gram, float(ridge_lambda), float(c1), float(delta), len(ys))


def ucb_bonus(model: LinearRewardModel, x) -> Union[float, np.ndarray]:
    """Uncertainty bonus ``C1 * min(1, sqrt(phi^T Sigma^-1 phi))`` in ``[0, C1]``."""
    return model.bonus(x)


@dataclass(frozen=True)
class BootstrapEnsemble:
    """Regressor heads, each trained on its own resample of the data."""
    spec: MlpSpec
    heads: List[ParamVector]

    @property
    def size(self) -> int:
        return len(self.heads)

    def head_predictions(self, x) -> np.ndarray:
        """Predictions of every head, shape (M,) for one state or (M, n) for a batch."""
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        batch = x[None, :] if single else x
        preds = np.stack([mlp_eval(self.spec, head, None, batch)[:, 0] for head in self.heads])
        return preds[:, 0] if single else preds

    def heads_on_tape(self, x: Var) -> List[Var]:
        return [
            tape.column(mlp_forward_var(self.spec, head, tape.Var(head.values), None, x), 0)
            for head in self.heads
        ]


def _train_head(spec: MlpSpec, params: ParamVector, xs: np.ndarray, ys: np.ndarray,
                train: BootstrapTrainConfig) -> ParamVector:
    state = AdamState.fresh(params.size, learning_rate=train.learning_rate)

    def loss(flat: Var) -> Var:
        pred = tape.column(mlp_forward_var(spec, params, flat, None, xs), 0)
        return tape.reduce_mean(tape.square(pred - ys))

    for _ in range(train.epochs):
        grad = tape.gradient(loss, params)
        params, state = adam_step(params, grad, state)
    return params


def fit_bootstrap(data: LabeledData, spec: MlpSpec, heads: int, train: BootstrapTrainConfig,
                  seed: int) -> BootstrapEnsemble:
    """Fit ``heads`` regressors on with-replacement resamples of the data.

    Each head gets its own resample and its own initialization seed.

    Raises:
        ConfigurationError: on empty data or fewer than two heads
    """
    xs = np.asarray(data.xs, dtype=np.float64)
    ys = np.asarray(data.ys, dtype=np.float64)
    if len(ys) == 0:
        raise ConfigurationError("Cannot fit a bootstrap ensemble on an empty dataset")
    if heads < 2:
        raise ConfigurationError(f"A bootstrap ensemble needs at least 2 heads, got {heads}")
    if spec.output_dim != 1 or spec.time_embedding_dim != 0:
        raise ConfigurationError("Bootstrap heads map states to one value without time features")
    xs = xs.reshape(len(ys), -1)
    fitted = []
    for j in range(heads):
        rng = make_rng(seed, j)
        idx = rng.integers(0, len(ys), size=len(ys))
        params = mlp_init(spec, derive_seed(seed, j, 1))
        fitted.append(_train_head(spec, params, xs[idx], ys[idx], train))
    logger.debug("Bootstrap ensemble fitted", extra={"heads": heads, "n_obs": len(ys)})
    return BootstrapEnsemble(spec, fitted)


@dataclass(frozen=True)
class RewardSurrogate:
    """Fitted reward model with its uncertainty oracle.

    With ``optimistic`` unset the oracle is identically zero: a linear model
    returns its ridge prediction and an ensemble returns its mean.
    """
    model: Union[LinearRewardModel, BootstrapEnsemble]
    optimistic: bool = True

    @property
    def kind(self) -> str:
        return "linear" if isinstance(self.model, LinearRewardModel) else "bootstrap"

    def mean(self, x):
        """Point prediction r_hat."""
        if isinstance(self.model, LinearRewardModel):
            return self.model.predict(x)
        return self.model.head_predictions(x).mean(axis=0)

    def bonus(self, x):
        """Uncertainty oracle g_hat."""
        if not self.optimistic:
            return np.zeros_like(np.asarray(self.mean(x), dtype=np.float64))
        if isinstance(self.model, LinearRewardModel):
            return self.model.bonus(x)
        preds = self.model.head_predictions(x)
        return preds.max(axis=0) - preds.mean(axis=0)

    def value(self, x):
        """Optimistic reward used by the planner."""
        if isinstance(self.model, BootstrapEnsemble) and self.optimistic:
            return self.model.head_predictions(x).max(axis=0)
        return self.mean(x) + self.bonus(x)

    def mean_on_tape(self, x: Var) -> Var:
        if isinstance(self.model, LinearRewardModel):
            return tape.reshape(self.model.predict_on_tape(x), (x.shape[0],))
        heads = self.model.heads_on_tape(x)
        total = heads[0]
        for head in heads[1:]:
            total = total + head
        return total * (1.0 / len(heads))

    def value_on_tape(self, x: Var) -> Var:
        """Tape version of :meth:`value` for a batch; shape ``(n,)``."""
        if not self.optimistic:
            return self.mean_on_tape(x)
        if isinstance(self.model, LinearRewardModel):
            return self.mean_on_tape(x) + self.model.bonus_on_tape(x)
        return tape.stack_max(self.model.heads_on_tape(x))

    def mean_gradient(self, x: np.ndarray) -> np.ndarray:
        """Gradient of the point prediction for every row of a batch ``(n, d)``."""
        x = np.asarray(x, dtype=np.float64)
        _, grad = tape.value_and_grad(lambda v: tape.reduce_sum(self.mean_on_tape(v)), x)
        return grad


def optimistic_reward(surrogate: RewardSurrogate, x):
    """``r_hat + g_hat`` for a linear model, max over heads for an ensemble."""
    return surrogate.value(x)


def save_surrogate(surrogate: RewardSurrogate, path: Union[str, Path]) -> None:
    """Write a self-describing ``.npz`` checkpoint."""
    model = surrogate.model
    header = {"kind": surrogate.kind, "optimistic": surrogate.optimistic}
    arrays = {}
    if isinstance(model, LinearRewardModel):
        header.update(features=model.features.spec.model_dump(), ridge_lambda=model.ridge_lambda,
                      c1=model.c1, delta=model.delta, n_obs=model.n_obs)
        arrays.update(theta_hat=model.theta_hat, gram=model.gram)
    else:
        header.update(spec=model.spec.model_dump(), layout=model.heads[0].layout)
        for j, head in enumerate(model.heads):
            arrays[f"head_{j}"] = head.values
    with open(path, "wb") as f:
        np.savez(f, header=np.array(json.dumps(header, sort_keys=True)), **arrays)


def load_surrogate(path: Union[str, Path]) -> RewardSurrogate:
    """Read a checkpoint written by :func:`save_surrogate`."""
    with np.load(path, allow_pickle=False) as archive:
        header = json.loads(str(archive["header"]))
        if header["kind"] == "linear":
            features = FeatureMap(FeatureMapSpec(**header["features"]))
            model = LinearRewardModel(
                features, archive["theta_hat"].copy(), archive["gram"].copy(),
                header["ridge_lambda"], header["c1"], header["delta"], header["n_obs"],
            )
        else:
            spec = MlpSpec(**header["spec"])
            layout = [(name, tuple(shape)) for name, shape in header["layout"]]
            n_heads = sum(1 for key in archive.files if key.startswith("head_"))
            heads = [ParamVector(archive[f"head_{j}"].copy(), layout) for j in range(n_heads)]
            model = BootstrapEnsemble(spec, heads)
    return RewardSurrogate(model, optimistic=header["optimistic"])


def information_gain(model: Optional[LinearRewardModel]) -> Optional[float]:
    """``log det Sigma`` of a linear model, None for other surrogates."""
    return model.log_det_gram if isinstance(model, LinearRewardModel) else None
