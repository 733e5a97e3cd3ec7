"""Exception hierarchy shared by every module.

Input problems subclass ``ValueError`` so callers that only know about
``ValueError`` keep working; numerical failures subclass ``ArithmeticError``.
"""
from typing import Any, Optional


class SeikoError(Exception):
    """Base class for all errors raised by the package."""


class ConfigurationError(SeikoError, ValueError):
    """Invalid configuration: bad spec values, unknown keys, inconsistent budgets."""


class ShapeError(SeikoError, ValueError):
    """Array dimensions do not match what an operation expects."""


class DomainError(SeikoError, ValueError):
    """An argument lies outside the domain of an operation (e.g. time out of range)."""


class DegenerateDensityError(SeikoError, ValueError):
    """A grid density has no mass left to normalize."""


class BudgetError(SeikoError, ValueError):
    """A feedback query would exceed the channel budget.

    Attributes:
        partial_record: RunRecord collected before the failure, if any
    """

    def __init__(self, message: str, partial_record: Optional[Any] = None):
        super().__init__(message)
        self.partial_record = partial_record


class NumericError(SeikoError, ArithmeticError):
    """A non-finite value appeared on the gradient tape.

    Attributes:
        node: name of the primitive that produced the value
    """

    def __init__(self, message: str, node: Optional[str] = None):
        super().__init__(message)
        self.node = node


class SimulationError(SeikoError, ArithmeticError):
    """An Euler-Maruyama rollout produced a non-finite state.

    Attributes:
        step: index of the Euler step where the blow-up happened
    """

    def __init__(self, message: str, step: Optional[int] = None):
        super().__init__(message)
        self.step = step


class PlannerError(SeikoError, ArithmeticError):
    """The control optimization diverged.

    Attributes:
        last_finite_stack: DriftStack from the last step with a finite objective
        partial_record: RunRecord collected before the failure, if any
    """

    def __init__(self, message: str, last_finite_stack: Optional[Any] = None,
                 partial_record: Optional[Any] = None):
        super().__init__(message)
        self.last_finite_stack = last_finite_stack
        self.partial_record = partial_record
