"""Exception types shared across the package.

The CLI maps these onto exit codes: UsageError -> 1, DataError and
HashMismatchError -> 2, NumericalError -> 3.
"""


class GradlensError(Exception):
    """Base class for all package errors."""


class DomainError(GradlensError, ValueError):
    """An argument violates a documented precondition (shape, range, finiteness)."""


class DataError(GradlensError, ValueError):
    """Malformed corpus / capture / result data."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class HashMismatchError(GradlensError, ValueError):
    """Content hashes of paired artifacts disagree."""


class NumericalError(GradlensError, RuntimeError):
    """Numerical failure (divergence, NaN) during an iterative procedure."""

    def __init__(self, message: str, iteration: int | None = None):
        self.iteration = iteration
        if iteration is not None:
            message = f"{message} (iteration {iteration})"
        super().__init__(message)


class UsageError(GradlensError, ValueError):
    """Invalid configuration or command usage."""
