"""Closed-form pre-trained diffusion model.

The data distribution is a Gaussian mixture, so every noised marginal of the
variance-preserving forward process is again a Gaussian mixture and the
generative drift follows from its exact score.

Generative time ``t`` runs from 0 to ``T``; forward time is ``s = T - t``.
"""
import logging
import math
import threading
from dataclasses import dataclass, field
from functools import cached_property
from typing import Dict, NamedTuple, Union

import numpy as np
from scipy import linalg, optimize
from scipy.special import logsumexp, softmax

from app.core.errors import ConfigurationError, DomainError, ShapeError
from app.schemas.world import GmmSpec, NoiseSchedule

logger = logging.getLogger(__name__)

_TIME_TOLERANCE = 1e-12


class _Components(NamedTuple):
    log_weights: np.ndarray   # (m,)
    means: np.ndarray         # (m, d)
    precisions: np.ndarray    # (m, d, d)
    log_norms: np.ndarray     # (m,) log of the Gaussian normalizing constants


def _prepare(gmm: GmmSpec) -> _Components:
    means = np.asarray(gmm.means, dtype=np.float64)
    d = means.shape[1]
    precisions, log_norms = [], []
    for k, cov in enumerate(gmm.covariances):
        cov = np.asarray(cov, dtype=np.float64)
        if not np.allclose(cov, cov.T, atol=1e-12):
            raise ConfigurationError(f"Covariance {k} is not symmetric")
        try:
            factor = linalg.cho_factor(cov, lower=True)
        except linalg.LinAlgError as e:
            raise ConfigurationError(f"Covariance {k} is not positive definite") from e
        precisions.append(linalg.cho_solve(factor, np.eye(d)))
        log_det = 2.0 * np.sum(np.log(np.diag(factor[0])))
        log_norms.append(-0.5 * (d * math.log(2.0 * math.pi) + log_det))
    with np.errstate(divide="ignore"):
        log_weights = np.log(np.asarray(gmm.weights, dtype=np.float64))
    return _Components(log_weights, means, np.stack(precisions), np.asarray(log_norms))


def _as_batch(x, d: int):
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    batch = x[None, :] if single else x
    if batch.ndim != 2 or batch.shape[1] != d:
        raise ShapeError(f"Expected states of dimension {d}, got shape {x.shape}")
    return batch, single


def _component_terms(comp: _Components, x: np.ndarray):
    """Per-component log joint terms (n, m) and precision-weighted offsets (n, m, d)."""
    diff = x[:, None, :] - comp.means[None, :, :]
    pulled = -np.einsum("kij,nkj->nki", comp.precisions, diff)
    quad = -np.einsum("nki,nki->nk", diff, pulled)
    return comp.log_weights + comp.log_norms - 0.5 * quad, pulled


def _log_density(comp: _Components, x: np.ndarray) -> np.ndarray:
    terms, _ = _component_terms(comp, x)
    return logsumexp(terms, axis=1)


def _score(comp: _Components, x: np.ndarray) -> np.ndarray:
    terms, pulled = _component_terms(comp, x)
    resp = softmax(terms, axis=1)
    return np.einsum("nk,nki->ni", resp, pulled)


def _score_vjp(comp: _Components, x: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Hessian of the log density applied to ``v`` (the Hessian is symmetric)."""
    terms, pulled = _component_terms(comp, x)
    resp = softmax(terms, axis=1)
    score = np.einsum("nk,nki->ni", resp, pulled)
    curvature = -np.einsum("nk,kij,nj->ni", resp, comp.precisions, v)
    along = np.einsum("nki,ni->nk", pulled, v)
    spread = np.einsum("nk,nk,nki->ni", resp, along, pulled)
    return curvature + spread - np.sum(score * v, axis=1, keepdims=True) * score


def gmm_log_density(gmm: GmmSpec, x) -> Union[float, np.ndarray]:
    """Log density of the mixture at one state or a batch of states.

    Raises:
        ConfigurationError: if a covariance is not SPD
        ShapeError: if the state dimension does not match
    """
    batch, single = _as_batch(x, gmm.dim)
    out = _log_density(_prepare(gmm), batch)
    return float(out[0]) if single else out


def gmm_score(gmm: GmmSpec, x) -> np.ndarray:
    """Gradient of :func:`gmm_log_density` with respect to ``x``."""
    batch, single = _as_batch(x, gmm.dim)
    out = _score(_prepare(gmm), batch)
    return out[0] if single else out


def diffused_gmm(gmm: GmmSpec, schedule: NoiseSchedule, s: float) -> GmmSpec:
    """Marginal of the forward process at forward time ``s``.

    Component k becomes ``N(sqrt(abar) mu_k, abar Sigma_k + (1 - abar) I)``.

    Raises:
        DomainError: if ``s`` is outside ``[0, T]``
    """
    if s < -_TIME_TOLERANCE or s > schedule.T + _TIME_TOLERANCE:
        raise DomainError(f"Forward time {s} outside [0, {schedule.T}]")
    s = min(max(s, 0.0), schedule.T)
    if s == 0.0:
        return gmm
    abar = schedule.alpha_bar(s)
    d = gmm.dim
    means = [(math.sqrt(abar) * np.asarray(mu)).tolist() for mu in gmm.means]
    covs = [(abar * np.asarray(cov) + (1.0 - abar) * np.eye(d)).tolist() for cov in gmm.covariances]
    return GmmSpec.model_construct(weights=list(gmm.weights), means=means, covariances=covs)


class OrnsteinUhlenbeckDrift:
    """Base drift ``-a x`` with no data model behind it.

    Used as the reference process when comparing two linear SDEs.
    """

    def __init__(self, rate: float, dim: int = 1):
        self.rate = float(rate)
        self.dim = int(dim)

    def drift(self, t: float, x: np.ndarray) -> np.ndarray:
        return -self.rate * np.asarray(x, dtype=np.float64)

    def drift_vjp(self, t: float, x: np.ndarray, v: np.ndarray) -> np.ndarray:
        return -self.rate * np.asarray(v, dtype=np.float64)


@dataclass(eq=False)
class PretrainedModel:
    """Pre-trained generative SDE started from a standard normal.

    Attributes:
        gmm: data distribution
        schedule: noise schedule and Euler grid
        feasibility_ratio: X_pre is ``{x : p(x) >= ratio * max p}``
    """
    gmm: GmmSpec
    schedule: NoiseSchedule = field(default_factory=NoiseSchedule)
    feasibility_ratio: float = 1e-4
    _marginals: Dict[float, _Components] = field(default_factory=dict, init=False, repr=False)
    _marginals_lock: threading.Lock = field(default_factory=threading.Lock, init=False, repr=False)

    def __post_init__(self):
        self._data = _prepare(self.gmm)

    @property
    def dim(self) -> int:
        return self.gmm.dim

    def _check_time(self, t: float) -> float:
        if t < -_TIME_TOLERANCE or t > self.schedule.T + _TIME_TOLERANCE:
            raise DomainError(f"Generative time {t} outside [0, {self.schedule.T}]")
        return min(max(float(t), 0.0), self.schedule.T)

    def _marginal(self, s: float) -> _Components:
        comp = self._marginals.get(s)
        if comp is None:
            with self._marginals_lock:
                comp = self._marginals.get(s)
                if comp is None:
                    comp = _prepare(diffused_gmm(self.gmm, self.schedule, s))
                    self._marginals[s] = comp
        return comp

    def drift(self, t: float, x: np.ndarray) -> np.ndarray:
        """Generative drift ``b(s) x / 2 + b(s) score_s(x)`` with ``s = T - t``."""
        t = self._check_time(t)
        batch, single = _as_batch(x, self.dim)
        s = self.schedule.T - t
        b = self.schedule.rate(s)
        out = 0.5 * b * batch + b * _score(self._marginal(s), batch)
        return out[0] if single else out

    def drift_vjp(self, t: float, x: np.ndarray, v: np.ndarray) -> np.ndarray:
        """Row-wise ``v^T (d drift / d x)`` for a batch of states."""
        t = self._check_time(t)
        batch, _ = _as_batch(x, self.dim)
        v = np.asarray(v, dtype=np.float64).reshape(batch.shape)
        s = self.schedule.T - t
        b = self.schedule.rate(s)
        return 0.5 * b * v + b * _score_vjp(self._marginal(s), batch, v)

    def log_density(self, x) -> Union[float, np.ndarray]:
        """Log density of the data distribution p^pre."""
        batch, single = _as_batch(x, self.dim)
        out = _log_density(self._data, batch)
        return float(out[0]) if single else out

    @cached_property
    def max_log_density(self) -> float:
        """Largest log density, found by local search from every component mean."""
        best = -np.inf
        for mean in self._data.means:
            result = optimize.minimize(
                lambda z: -float(_log_density(self._data, z[None, :])[0]),
                mean,
                jac=lambda z: -_score(self._data, z[None, :])[0],
                method="BFGS",
            )
            best = max(best, -float(result.fun))
        logger.debug("Maximum log density located", extra={"max_log_density": best})
        return best

    @property
    def log_threshold(self) -> float:
        return math.log(self.feasibility_ratio) + self.max_log_density

    def is_feasible(self, x) -> Union[bool, np.ndarray]:
        """Membership in X_pre for one state or a batch."""
        batch, single = _as_batch(x, self.dim)
        inside = _log_density(self._data, batch) >= self.log_threshold
        return bool(inside[0]) if single else inside


def pretrained_drift(model: PretrainedModel, t: float, x) -> np.ndarray:
    """Generative drift of the pre-trained model at time ``t``.

    Raises:
        DomainError: if ``t`` is outside ``[0, T]``
    """
    return model.drift(t, x)
