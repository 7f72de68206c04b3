"""Exception hierarchy shared across the package.

The CLI maps these onto process exit codes, so keep the categories coarse.
"""


class DualVisionError(Exception):
    """Base class for every error raised deliberately by this package."""


class ConfigError(DualVisionError, ValueError):
    """Invalid configuration (exit code 2)."""


class DataError(DualVisionError):
    """Malformed or inconsistent on-disk data (exit code 3)."""


class ShapeError(DualVisionError, ValueError):
    """Operand extents do not conform."""


class CapacityError(ShapeError):
    """A sequence exceeds a fixed capacity such as ``max_len``."""


class ContractError(DualVisionError, RuntimeError):
    """A documented precondition was violated by the caller."""


class NumericError(DualVisionError, ArithmeticError):
    """Non-finite values where finite ones are required (exit code 4)."""
