"""Exception types raised across the package."""


class AstroError(Exception):
    """Base class for all package errors."""


class ShapeError(AstroError, ValueError):
    pass


class ParameterError(AstroError, ValueError):
    pass


class ConfigError(AstroError, ValueError):
    pass


class NumericError(AstroError, ArithmeticError):
    pass


class ContractError(AstroError, ValueError):
    pass


class TapeStateError(AstroError, RuntimeError):
    pass


class CheckpointError(AstroError, IOError):
    pass


class DataError(AstroError, ValueError):
    pass
