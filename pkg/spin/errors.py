"""Exception types shared across the lab.

The CLI maps each category to an exit code:
ConfigError → 1, StorageError → 2, DivergenceError → 3, and InvariantError or
NonDifferentiableError → 4.
"""


class SpinError(Exception):
    """Base class for every error raised on purpose by this project."""


class ConfigError(SpinError, ValueError):
    """Invalid run configuration or command-line usage."""


class StorageError(SpinError, OSError):
    """A file could not be read or written, or failed its integrity checks."""


class DivergenceError(SpinError, ArithmeticError):
    """Training or sampling produced non-finite values or ran away."""


class NonDifferentiableError(SpinError, TypeError):
    """A loss closure used an operation the reverse-mode engine cannot follow."""


class InvariantError(SpinError, RuntimeError):
    """An internal guarantee was broken, such as the frozen opponent changing mid-iteration."""
