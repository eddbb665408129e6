"""Exception hierarchy shared by every lprnet module."""


class LprnetError(Exception):
    """Base class for all package errors."""


class InvalidArgumentError(LprnetError, ValueError):
    pass


class DomainError(InvalidArgumentError):
    """Input lies outside the domain of a map (e.g. the log branch cut)."""


class ParseError(LprnetError, ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class InvalidInputError(LprnetError, ValueError):
    pass


class UnsupportedFormatError(LprnetError, ValueError):
    pass


class TruncatedFileError(LprnetError, ValueError):
    pass


class ShapeError(LprnetError, ValueError):
    pass


class NumericalFault(LprnetError, ArithmeticError):
    """A forward pass produced NaN or Inf; ``op`` names the producing op."""

    def __init__(self, op: str, message: str | None = None):
        self.op = op
        super().__init__(message or f"non-finite values produced by op '{op}'")


class IntegrityError(LprnetError, ValueError):
    def __init__(self, message: str, record: str | None = None):
        self.record = record
        super().__init__(message)


class UnsupportedVersionError(LprnetError, ValueError):
    pass


class FeatureFaultError(LprnetError, ArithmeticError):
    pass


class DatasetError(LprnetError, ValueError):
    pass


class UndefinedMetricError(LprnetError, ValueError):
    pass


class ConfigError(LprnetError, ValueError):
    pass
