"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Operand shapes do not line up."""


class ConfigError(ValueError):
    """A configuration value is outside its valid range."""


class StructureError(ValueError):
    """Two parameter trees do not have matching names/shapes."""


class FormatError(ValueError):
    """A binary file does not follow its expected layout."""


class NonFiniteError(FloatingPointError):
    """NaN or Inf showed up where finite values are required."""
