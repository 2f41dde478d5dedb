"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class DataError(ValueError):
    """Input data violates a precondition (non-finite values, missing arms, ...)."""


class ConfigError(ValueError):
    """A configuration value is out of its allowed range."""


class ParseError(ValueError):
    """A file could not be parsed; the message cites the offending location."""


class NumericalError(ArithmeticError):
    """A numerical routine failed beyond its recovery policy."""


class TrainingError(RuntimeError):
    """Optimization failed; the message reports the offending step."""


class SelectionError(RuntimeError):
    """Hyperparameter selection could not produce a result."""
