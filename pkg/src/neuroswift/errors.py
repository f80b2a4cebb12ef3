"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class NeuroSwiftError(Exception):
    exit_code = 1


class ConfigurationError(NeuroSwiftError, ValueError):
    exit_code = 2


class DimensionError(ConfigurationError):
    pass


class BoundsError(ConfigurationError, IndexError):
    pass


class NumericalError(NeuroSwiftError, ArithmeticError):
    exit_code = 1


class NormalizationError(NumericalError):
    pass


class UndefinedMetricError(NumericalError):
    pass


class FormatError(NeuroSwiftError):
    exit_code = 3


class StorageError(NeuroSwiftError, OSError):
    exit_code = 3


class CompatibilityError(NeuroSwiftError):
    exit_code = 4
