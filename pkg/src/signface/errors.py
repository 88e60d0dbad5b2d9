"""Exception hierarchy. Each family maps onto a CLI exit code."""


class SignFaceError(Exception):
    exit_code = 1


class ConfigError(SignFaceError):
    """Bad user input, missing artifacts, unknown config keys."""


class InvalidParameterError(ConfigError, ValueError):
    pass


class ShapeError(SignFaceError, ValueError):
    pass


class ContractError(SignFaceError, ValueError):
    """A documented precondition on a value (not its shape) was violated."""


class VersionMismatchError(ConfigError):
    pass


class NumericalError(SignFaceError, ArithmeticError):
    exit_code = 2


class DegenerateVectorError(NumericalError):
    pass


class DegenerateFrameError(NumericalError):
    pass


class FrontalizationError(NumericalError):
    def __init__(self, message, frames=()):
        super().__init__(message)
        self.frames = tuple(frames)


class BackendError(SignFaceError):
    """Transport or protocol failure talking to a feature backend."""

    exit_code = 3
