"""Exception types shared across the package."""


class ShuffleMixError(Exception):
    """Base class so callers can catch everything from this package at once."""


class DimensionError(ShuffleMixError):
    """Tensor rank or shape does not match what an operation requires."""


class ParameterError(ShuffleMixError):
    """A scalar or config parameter is outside its documented domain."""


class EvaluationError(ShuffleMixError):
    """A numeric computation produced non-finite or otherwise unusable values."""


class DataFormatError(ShuffleMixError):
    """On-disk data does not conform to the expected binary or text layout."""
