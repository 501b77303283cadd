"""Exception hierarchy.

Everything raised on purpose derives from :class:`CardiokitError`. The CLI maps
:class:`ConfigError` to exit code 2 and :class:`DataError` to exit code 3.
"""


class CardiokitError(Exception):
    pass


class ConfigError(CardiokitError, ValueError):
    """Invalid parameters or configuration."""


class DataError(CardiokitError, ValueError):
    """Input data cannot be processed."""


class DesignError(ConfigError):
    pass


class ParameterError(ConfigError):
    pass


class LoadError(DataError):
    pass


class ParseError(DataError):
    pass


class ManifestError(DataError):
    pass


class LengthError(DataError):
    pass


class DelineationError(DataError):
    pass


class InsufficientDataError(DataError):
    pass


class FeatureError(DataError):
    pass


class SplitError(DataError):
    pass


class FitError(DataError):
    pass


class ShapeError(DataError):
    pass


class EvaluationError(DataError):
    pass


class StatTestError(DataError):
    pass


class StageError(DataError):
    """A pipeline stage is missing an artifact produced by an earlier stage."""
