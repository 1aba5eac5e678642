"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Array dimensions disagree with what an operation requires."""


class DegenerateVectorError(ValueError):
    """A vector with (near-)zero norm reached a normalization step."""


class NumericError(ArithmeticError):
    """A computation produced or received non-finite values."""


class ConfigError(ValueError):
    """A configuration value violates its documented constraints."""


class FormatError(ValueError):
    """A binary file does not conform to its declared layout."""


class IncompatibilityError(ValueError):
    """Two artifacts (checkpoint, dataset, config) cannot be combined."""
