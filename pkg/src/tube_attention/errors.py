"""Exception hierarchy shared by every module.

The CLI maps these onto exit codes: ``ConfigError`` -> 1,
``DataError``/``GeometryError`` -> 2, ``NumericError`` -> 3.
"""


class TubeAttentionError(Exception):
    pass


class ShapeError(TubeAttentionError, ValueError):
    pass


class ConfigError(TubeAttentionError, ValueError):
    pass


class GeometryError(TubeAttentionError, ValueError):
    pass


class DataError(TubeAttentionError):
    pass


class FormatError(DataError):
    pass


class ResolutionError(DataError):
    """A referenced file could not be found."""


class CheckpointError(DataError):
    pass


class NumericError(TubeAttentionError, ArithmeticError):
    pass
