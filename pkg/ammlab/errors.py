"""Exception hierarchy for ammlab.

Every error raised by the library derives from AmmLabError so the CLI can map
failures onto exit codes without inspecting messages.
"""
from typing import List, Optional, Sequence, Tuple


class AmmLabError(Exception):
    """Base class for all ammlab errors."""


class DomainError(AmmLabError, ValueError):
    """An argument lies outside the domain of an operation."""


class PricingFunctionError(DomainError):
    """A custom pricing function violates the pricing-function axioms."""


class NumericalError(AmmLabError, ArithmeticError):
    """A numerical routine failed to produce a trustworthy answer.

    Args:
        message: Human readable description
        interval: Search interval examined before giving up, when relevant
        detail: Free-form diagnostics (worst grid point, residuals, ...)
    """

    def __init__(self, message: str, interval: Optional[Tuple[float, float]] = None, detail: Optional[dict] = None):
        super().__init__(message)
        self.interval = interval
        self.detail = detail or {}


class ConvergenceError(NumericalError):
    """An iterative scheme hit its iteration cap."""

    def __init__(self, message: str, residual_history: Optional[Sequence[float]] = None, detail: Optional[dict] = None):
        super().__init__(message, detail=detail)
        self.residual_history: List[float] = list(residual_history or [])

    @property
    def residual(self) -> float:
        return self.residual_history[-1] if self.residual_history else float("nan")


class InvariantViolation(NumericalError):
    """A property that must hold at runtime was found broken."""


class ConfigError(AmmLabError, ValueError):
    """Invalid configuration file or command-line override."""

    def __init__(self, message: str, line: Optional[int] = None, column: Optional[int] = None):
        super().__init__(message)
        self.line = line
        self.column = column


class DataError(AmmLabError, ValueError):
    """Malformed input data; `rows` lists the offending 1-based file rows."""

    def __init__(self, message: str, rows: Optional[Sequence[int]] = None):
        super().__init__(message)
        self.rows: List[int] = list(rows or [])
