"""Exception hierarchy; the CLI maps these onto exit codes."""


class ImmunoError(Exception):
    """Base class for all package errors."""


class DataError(ImmunoError, ValueError):
    """Malformed or invariant-violating input data."""


class FormatError(DataError):
    """A binary container failed validation."""


class NumericalError(ImmunoError, ArithmeticError):
    """Non-finite values encountered during training or scoring."""
