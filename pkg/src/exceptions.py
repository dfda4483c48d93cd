"""
Exception hierarchy for the PGS toolkit.

Every domain error derives from :class:`PgsError`; validation failures also derive
from :class:`ValueError` so callers that only know about ``ValueError`` still catch them.
"""
from typing import Any, Optional


class PgsError(Exception):
    """Base class of all domain errors."""


class DatasetValidationError(PgsError, ValueError):
    """A dataset (or label-quality parameter set) violates its invariants."""

    def __init__(self, message: str, index: Optional[int] = None):
        if index is not None:
            message = f"{message} at index {index}"
        super().__init__(message)
        self.index = index


class InfeasibleRegionError(PgsError, ValueError):
    """The feasible region cannot be satisfied (e.g. eps1 larger than n)."""


class ConvergenceError(PgsError):
    """An iterative solver stopped before reaching its tolerance."""

    def __init__(self, message: str, residual: float, iterations: int):
        super().__init__(f"{message} (residual={residual:.3e}, iterations={iterations})")
        self.residual = residual
        self.iterations = iterations


class CgBreakdownError(ConvergenceError):
    """Conjugate gradient failed or met non-positive curvature."""


class DivergenceError(PgsError):
    """A trajectory or adjoint recursion produced non-finite values."""

    def __init__(self, message: str, step: int):
        super().__init__(f"{message} at step {step}")
        self.step = step


class NonFiniteObjectiveError(PgsError):
    """The upper-level objective became non-finite during the outer loop."""

    def __init__(self, message: str, history: list[dict[str, Any]]):
        super().__init__(message)
        self.history = history


class BudgetExceededError(PgsError, ValueError):
    """The finite-difference oracle was asked for too many coordinates."""


class UnknownMethodError(PgsError, ValueError):
    """An unknown method or model family name was requested."""
