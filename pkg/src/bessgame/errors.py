"""Exception types raised across the package."""

from __future__ import annotations


class BessGameError(Exception):
    """Base class for all package errors."""


class DomainError(BessGameError, ValueError):
    """A time or state argument falls outside the admissible domain."""


class ModelValidationError(BessGameError, ValueError):
    """Raised by :func:`bessgame.model.validate_market` with every violation found."""

    def __init__(self, violations):
        self.violations = list(violations)
        lines = "\n".join(f"  - {v}" for v in self.violations)
        super().__init__(f"{len(self.violations)} model violation(s):\n{lines}")


class InteractionSingularError(BessGameError, ArithmeticError):
    """The price-impact interaction matrix cannot be inverted reliably."""


class RiccatiBlowUpError(BessGameError, ArithmeticError):
    """A Riccati trajectory became non-finite during integration."""

    def __init__(self, t: float, block: str):
        self.t = t
        self.block = block
        super().__init__(f"Riccati blow-up at t={t:.6g} in block {block!r}")


class NotHomogeneousError(BessGameError, ValueError):
    """A routine that requires identical agents received a heterogeneous market."""
