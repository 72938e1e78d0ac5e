"""Exception hierarchy shared across the package."""


class D3Error(Exception):
    """Base class for all errors raised by d3depth."""


class FormatError(D3Error):
    """A file is malformed or uses an unsupported variant of its format."""


class CorruptionError(FormatError):
    """A file is truncated or internally inconsistent."""


class ParameterError(D3Error, ValueError):
    """An argument is outside its documented range."""


class ShapeError(D3Error, ValueError):
    """Arrays or maps that must agree in shape do not."""


class ValidationError(D3Error, ValueError):
    """Data violates an invariant (non-finite values, negative depths...)."""


class InputError(D3Error, ValueError):
    """Input data cannot be processed (e.g. no valid depth at all)."""


class PreconditionError(InputError):
    """A documented precondition of the callee was not established."""


class EvaluationError(D3Error, ValueError):
    """Metrics or losses cannot be computed for the given data."""


class NumericError(D3Error, ArithmeticError):
    """Training or checking produced non-finite or out-of-tolerance numbers."""
