"""Exception types shared across the package.

Every failure mode maps to one of a small number of categories so callers
can distinguish "you handed me garbage" (shape/format/config) from "the
numerics went bad" (definiteness, overflow, NaN).
"""


class ShapeError(ValueError):
    """Operands have incompatible or unexpected dimensions."""


class DefinitenessError(ValueError):
    """A matrix that must be symmetric positive (semi)definite is not."""


class NumericError(ArithmeticError):
    """Non-finite values or numerically meaningless results."""


class FormatError(ValueError):
    """A file or byte stream does not match its expected layout."""


class ConfigError(ValueError):
    """Inconsistent or unsupported configuration values."""
