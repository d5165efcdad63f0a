"""Exception hierarchy shared across the package."""

from __future__ import annotations


class SieveCIError(Exception):
    """Base class for all errors raised by this package."""


class InputError(SieveCIError, ValueError):
    """Invalid argument (shape mismatch, out-of-range action, bad config)."""


class UnknownStateError(InputError):
    """A state passed to an indicator basis or tabular policy is not listed."""


class DegenerateDataError(SieveCIError, ValueError):
    """The sample cannot support the requested basis (e.g. too few distinct values)."""


class PartitionError(SieveCIError, ValueError):
    """Block partition cannot be formed (e.g. fewer than two blocks)."""


class SingularSystemError(SieveCIError, ArithmeticError):
    """A linear system is numerically singular.

    ``rcond`` carries the reciprocal 1-norm condition estimate; callers may
    retry with a positive ridge penalty.
    """

    def __init__(self, message: str, rcond: float = 0.0, context: str | None = None):
        self.rcond = float(rcond)
        self.context = context
        if context:
            message = f"{context}: {message}"
        super().__init__(message)


class ValidationError(SieveCIError, ValueError):
    """Dataset violates its invariants; ``violations`` lists them."""

    def __init__(self, violations):
        self.violations = list(violations)
        lines = "\n".join(f"  - {v}" for v in self.violations[:20])
        more = "" if len(self.violations) <= 20 else f"\n  ... {len(self.violations) - 20} more"
        super().__init__(f"{len(self.violations)} dataset violation(s):\n{lines}{more}")


class ParseError(SieveCIError, ValueError):
    """Malformed input file; ``line`` is the 1-based line number."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class RunError(SieveCIError, RuntimeError):
    """Failure inside a sequential procedure, tagged with the batch/block index."""

    def __init__(self, message: str, index: int | None = None):
        self.index = index
        super().__init__(message if index is None else f"batch {index}: {message}")
