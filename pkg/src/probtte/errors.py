class ProbTTEError(Exception):
    """Base class for errors raised by this package."""


class ValidationError(ProbTTEError, ValueError):
    """Malformed input: bad files, broken invariants, failed preconditions."""


class NumericalError(ProbTTEError, ArithmeticError):
    """A factorization or objective evaluation broke down."""

    def __init__(self, message, **diagnostics):
        super().__init__(message)
        self.diagnostics = diagnostics
