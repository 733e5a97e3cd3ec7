"""Adam with bias correction, usable for ascent or descent."""
from dataclasses import dataclass, replace
from typing import Tuple

import numpy as np

from app.autodiff.tape import ParamVector
from app.core.errors import ShapeError


@dataclass(frozen=True)
class AdamState:
    """Optimizer moments and hyperparameters.

    Attributes:
        first_moment: running mean of gradients
        second_moment: running mean of squared gradients
        step_count: number of updates applied so far
    """
    first_moment: np.ndarray
    second_moment: np.ndarray
    step_count: int = 0
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def fresh(cls, size: int, learning_rate: float = 1e-3, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> "AdamState":
        return cls(np.zeros(size), np.zeros(size), 0, learning_rate, beta1, beta2, eps)


def adam_step(params: ParamVector, grad: ParamVector, state: AdamState,
              ascent: bool = False) -> Tuple[ParamVector, AdamState]:
    """Apply one bias-corrected Adam update.

    Args:
        params: current parameters
        grad: gradient of the objective at ``params``
        state: optimizer state (not modified)
        ascent: climb the objective instead of descending it

    Returns:
        Tuple of updated parameters and the new optimizer state

    Raises:
        ShapeError: if parameter, gradient and moment sizes differ
    """
    if grad.size != params.size or state.first_moment.size != params.size:
        raise ShapeError(
            f"Adam got {params.size} parameters, {grad.size} gradients and "
            f"{state.first_moment.size} moments"
        )
    g = grad.values
    step = state.step_count + 1
    m = state.beta1 * state.first_moment + (1.0 - state.beta1) * g
    v = state.beta2 * state.second_moment + (1.0 - state.beta2) * g * g
    m_hat = m / (1.0 - state.beta1 ** step)
    v_hat = v / (1.0 - state.beta2 ** step)
    direction = 1.0 if ascent else -1.0
    new_values = params.values + direction * state.learning_rate * m_hat / (np.sqrt(v_hat) + state.eps)
    return params.with_values(new_values), replace(state, first_moment=m, second_moment=v, step_count=step)
