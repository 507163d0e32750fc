"""Exception hierarchy shared across the package.

CLI exit-code mapping: usage problems exit 1, data/file problems exit 2,
numerical failures exit 3.
"""


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class NumericalError(ArithmeticError):
    """An operation produced a non-finite value, or a numeric check failed."""


class DivergenceError(NumericalError):
    """Training loss became non-finite; the run was aborted."""


class DataError(RuntimeError):
    """Dataset trees, image files, or fixtures are missing or malformed."""


class CheckpointError(RuntimeError):
    """A checkpoint file is truncated, corrupt, or from a foreign format."""


class ConfigError(RuntimeError):
    """A config file or flag value could not be parsed or validated."""
