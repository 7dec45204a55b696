"""Exception types raised across the package."""


class SatdError(Exception):
    """Base class for all package errors."""


class DimensionError(SatdError, ValueError):
    pass


class ParameterError(SatdError, ValueError):
    pass


class DegenerateVectorError(SatdError, ValueError):
    pass


class EvaluationError(SatdError, ArithmeticError):
    pass


class ShapeError(SatdError, ValueError):
    pass


class ModalityError(SatdError, ValueError):
    pass


class ConfigurationError(SatdError, ValueError):
    pass


class InputError(SatdError, ValueError):
    pass


class DataError(SatdError, ValueError):
    pass


class SizeError(SatdError, ValueError):
    pass


class ScheduleError(SatdError, ValueError):
    pass


class TrainingError(SatdError, RuntimeError):
    pass


class FormatError(SatdError, ValueError):
    """Malformed tensor file. ``offset`` is the byte position of the fault."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset
