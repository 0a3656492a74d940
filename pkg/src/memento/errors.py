"""Exception hierarchy shared by every module."""


class MementoError(Exception):
    pass


class ValidationError(MementoError, ValueError):
    """Bad user input: arguments, files, configs. CLI exit code 2."""


class ContractError(MementoError, RuntimeError):
    """An internal precondition was violated (masked action, terminal state, ...)."""


class CapacityViolation(ValidationError):
    pass


class CustomerCoverageError(ValidationError):
    """A customer is missing from, or duplicated in, a routing."""


class DelimiterError(ValidationError):
    """A routing does not start and end at the depot."""


class SizeCapError(ValidationError):
    """Brute force refused: the instance is too large to enumerate."""


class FormatError(ValidationError):
    """Unreadable, truncated, corrupted or wrong-version file."""


class DivergenceError(MementoError, FloatingPointError):
    """Numerical divergence detected. CLI exit code 3."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}
