"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: usage errors exit 1, data errors
exit 2, numerical failures exit 3.
"""


class SpdClassError(Exception):
    """Base class for all errors raised by this package."""


class UsageError(SpdClassError):
    """Bad command-line arguments or an invalid run configuration."""


class DataError(SpdClassError):
    """Malformed, inconsistent, or missing input data."""


class NotSpdError(DataError):
    """A matrix expected to be symmetric positive definite is not."""


class NumericalError(SpdClassError):
    """A numerical routine failed (eigen non-convergence, overflow, NaNs)."""


class BatchError(DataError):
    """One or more items of a batch failed; carries the per-item failures.

    ``failures`` is a list of ``(index, exception)`` pairs in input order.
    """

    def __init__(self, message: str, failures):
        detail = "; ".join(f"[{i}] {exc}" for i, exc in failures[:8])
        if len(failures) > 8:
            detail += f"; ... ({len(failures) - 8} more)"
        super().__init__(f"{message}: {detail}")
        self.failures = list(failures)
