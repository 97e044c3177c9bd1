"""Exception types raised across the package."""

from __future__ import annotations


class VbGlmmError(Exception):
    """Base class for all package errors."""


class ShapeError(VbGlmmError, ValueError):
    """Array dimensions are inconsistent; ``block`` names the offending piece."""

    def __init__(self, message: str, block: str | None = None):
        super().__init__(message)
        self.block = block


class ValidationError(VbGlmmError, ValueError):
    """Dataset or configuration failed validation.

    ``diagnostics`` is a list of ``(cluster_index, row_indices, reason)``
    tuples; ``row_indices`` may be empty for cluster-level problems.
    """

    def __init__(self, message: str, diagnostics=None):
        super().__init__(message)
        self.diagnostics = list(diagnostics or [])


class DomainError(VbGlmmError, ValueError):
    """Argument outside the domain of a special function."""


class SPDError(VbGlmmError, ArithmeticError):
    """Matrix failed a symmetric positive-definite factorization."""

    def __init__(self, message: str, min_pivot: float | None = None):
        super().__init__(message)
        self.min_pivot = min_pivot


class NumericalError(VbGlmmError, ArithmeticError):
    """Non-finite or overflowing intermediate.

    ``context`` carries whatever is useful for diagnosis (indices, arguments)
    and ``state`` an optional snapshot of the variational state at failure.
    """

    def __init__(self, message: str, context=None, state=None):
        super().__init__(message)
        self.context = context or {}
        self.state = state
