"""Shared exception types."""


class ShapeMismatchError(ValueError):
    """Operand shapes do not conform."""


class DTypeMismatchError(TypeError):
    """Operands mix 32-bit and 64-bit floats."""


class NonFiniteError(FloatingPointError):
    """A NaN or Inf appeared where a finite value is required."""


class TapeError(RuntimeError):
    """Misuse of the differentiation tape (non-scalar output, off-tape wrt, ...)."""


class ConfigError(ValueError):
    """Invalid or unknown configuration value."""


class DataFormatError(ValueError):
    """Corrupt, truncated or version-mismatched on-disk data."""


class NumericFailure(ArithmeticError):
    """Training produced a non-finite loss or gradient."""
