"""Exception types shared across the package."""
from __future__ import annotations


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class ValidationError(ValueError):
    """Input data or configuration failed validation."""


class PreconditionError(ValueError):
    """An operation was called in a state that violates its contract."""


class StateError(RuntimeError):
    """Internal state is missing or inconsistent."""


class TrainingError(RuntimeError):
    """Training diverged or could not proceed."""

    def __init__(self, message: str, epoch: int | None = None):
        super().__init__(message)
        self.epoch = epoch


class AttackError(RuntimeError):
    """An attack cannot be carried out against the given target."""


class SelectionError(RuntimeError):
    """Not enough eligible nodes to build the requested target set."""

    def __init__(self, message: str, available: int | None = None):
        super().__init__(message)
        self.available = available


class ConfigError(ValueError):
    """Bad experiment configuration."""
