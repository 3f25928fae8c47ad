"""Exception types shared across the package.

The CLI maps these onto process exit codes (usage/config -> 1,
data -> 2, verification -> 3), so raising the right class matters.
"""


class ShapeError(ValueError):
    """Operand shapes are inconsistent. Message names both operands."""


class ConfigError(ValueError):
    """Invalid or contradictory configuration."""


class DataError(ValueError):
    """Malformed or degenerate input data."""


class VerificationError(RuntimeError):
    """A numerical verification (gradient check, checkpoint integrity) failed."""
