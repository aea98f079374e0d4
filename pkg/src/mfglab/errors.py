"""Exception types shared across the package."""

from __future__ import annotations


class ConfigError(ValueError):
    """Invalid configuration: bad keys, ranges, or model declarations."""


class DomainError(ValueError):
    """An operation was called with arguments outside its stated domain."""


class SolverError(RuntimeError):
    """A numerical solve failed (instability, mass imbalance, negativity)."""


class BlowupError(SolverError):
    """A particle state became non-finite or exceeded the blowup guard."""

    def __init__(self, message: str, *, particle: int | None = None, step: int | None = None):
        super().__init__(message)
        self.particle = particle
        self.step = step
