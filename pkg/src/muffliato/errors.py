"""Exception hierarchy shared by every module."""


class MuffliatoError(Exception):
    """Base class for all errors raised by this package."""


class InvalidParameter(MuffliatoError, ValueError):
    pass


class EmptyInput(MuffliatoError, ValueError):
    pass


class DisconnectedGraph(MuffliatoError):
    pass


class DisconnectedAfterRetries(DisconnectedGraph):
    """Random graph stayed disconnected after the maximum number of resamples."""


class MultiplePerronEigenvalues(MuffliatoError):
    """More than one eigenvalue at 1: the support graph is disconnected."""


class NormalizationFailure(MuffliatoError):
    pass


class SigmaTooSmall(InvalidParameter):
    pass


class DivergenceError(MuffliatoError):
    pass


class AccountingError(MuffliatoError):
    """The accountant's built-in column-identity self-check failed."""


class MalformedRow(MuffliatoError, ValueError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


class NonNumericCell(MalformedRow):
    pass


class SchemaVersionError(MuffliatoError):
    pass
