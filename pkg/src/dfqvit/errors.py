"""Exception hierarchy shared by all modules."""


class DFQError(Exception):
    """Base class for every error raised by this package."""


class DimensionError(DFQError, ValueError):
    pass


class ContractError(DFQError, ValueError):
    """A documented precondition was violated by the caller."""


class ParameterError(DFQError, ValueError):
    pass


class TrainingError(DFQError, RuntimeError):
    pass


class NumericalError(DFQError, RuntimeError):
    """NaN or Inf appeared where finite values are required."""

    def __init__(self, message, state=None):
        super().__init__(message)
        self.state = state or {}


class ConfigError(DFQError, ValueError):
    pass
