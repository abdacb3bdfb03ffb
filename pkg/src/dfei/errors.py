"""Exception hierarchy shared by every layer of the package."""


class DfeiError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(DfeiError, ValueError):
    pass


class NumericError(DfeiError, ArithmeticError):
    pass


class ConsistencyError(DfeiError, KeyError):
    def __str__(self) -> str:
        return str(self.args[0]) if self.args else ""


class StateError(DfeiError, RuntimeError):
    pass


class DataError(DfeiError, ValueError):
    pass


class ConfigError(DfeiError, ValueError):
    pass


class CheckpointError(DfeiError, IOError):
    pass


class GenerationError(DfeiError, RuntimeError):
    pass


class UndefinedMetricError(DfeiError, ValueError):
    pass
