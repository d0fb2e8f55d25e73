"""Exception hierarchy used across the toolkit."""


class EegspellError(Exception):
    """Base class for all toolkit errors."""


class ShapeError(EegspellError):
    """Tensor shapes incompatible with the requested operation."""


class ParameterError(EegspellError):
    """An operation or layer received an out-of-range parameter."""


class FilterDesignError(EegspellError):
    """Filter specification cannot be met."""


class DataError(EegspellError):
    """Malformed or insufficient input data."""


class DivergenceError(EegspellError):
    """Training produced non-finite loss."""


class ConfigError(EegspellError):
    """Invalid run configuration or command usage."""
