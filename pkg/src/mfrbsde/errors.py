"""Exception hierarchy shared by the solvers and the command line."""

from __future__ import annotations


class MfRbsdeError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class ConfigError(MfRbsdeError, ValueError):
    """Invalid model or run configuration."""

    exit_code = 2


class GridTooCoarseError(ConfigError):
    """A time step is too long for the requested discretisation."""

    def __init__(self, message: str, step: int | None = None):
        super().__init__(message)
        self.step = step


class RegimeError(MfRbsdeError):
    """Parameters fall outside the regime a check is defined for."""

    exit_code = 3

    def __init__(self, message: str, margin: float | None = None):
        super().__init__(message)
        self.margin = margin


class BudgetError(MfRbsdeError):
    """An exact enumeration would exceed its configured size budget."""

    exit_code = 4

    def __init__(self, message: str, required: int | None = None, budget: int | None = None):
        super().__init__(message)
        self.required = required
        self.budget = budget


class ConvergenceError(MfRbsdeError):
    """A fixed-point iteration stopped before reaching its tolerance."""

    exit_code = 5

    def __init__(self, message: str, residuals: list[float] | None = None):
        super().__init__(message)
        self.residuals = list(residuals or [])
