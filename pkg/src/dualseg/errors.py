"""Exception types shared across the package.

Four failure categories: shape/extent problems, violated call contracts,
non-finite numerics, and bad run configuration.
"""


class DimensionError(ValueError):
    """Operand shapes or extents are incompatible."""


class ContractError(ValueError):
    """A documented precondition was violated by the caller."""


class NumericError(ArithmeticError):
    """Non-finite values where finite ones are required."""


class ConfigError(ValueError):
    """A run configuration is invalid or unreadable."""


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""
