"""Exception hierarchy shared by every module."""


class GaussTRError(Exception):
    """Base class for all package errors."""


class DimensionError(GaussTRError, ValueError):
    pass


class DomainError(GaussTRError, ValueError):
    pass


class ContractError(GaussTRError, RuntimeError):
    pass


class RankError(GaussTRError, ValueError):
    pass


class ConfigError(GaussTRError, ValueError):
    pass


class DataError(GaussTRError, IOError):
    pass


class NumericalAbort(GaussTRError, FloatingPointError):
    """Raised when training produces a non-finite loss."""

    def __init__(self, message, dump_path=None):
        super().__init__(message)
        self.dump_path = dump_path
