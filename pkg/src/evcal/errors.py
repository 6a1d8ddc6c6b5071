"""Exception types raised across the toolkit."""


class CalibError(Exception):
    """Base class for all toolkit errors."""


class InvalidArgumentError(CalibError, ValueError):
    pass


class OutOfRangeError(CalibError, ValueError):
    """Spline evaluated outside of its valid time domain."""


class BehindCameraError(CalibError, ValueError):
    pass


class NonConvergenceError(CalibError, RuntimeError):
    pass


class InvalidProblemError(CalibError, ValueError):
    """Least-squares problem is not evaluable at its starting point."""


class SolverError(CalibError, RuntimeError):
    pass


class RecognitionFailed(CalibError, RuntimeError):
    """Pattern could not be recognized in one accumulation frame."""


class RefineFailed(CalibError, RuntimeError):
    pass


class InitFailed(CalibError, RuntimeError):
    pass


class CalibrationImpossible(CalibError, RuntimeError):
    pass


class GenerationFailed(CalibError, RuntimeError):
    pass


class ParseError(CalibError, ValueError):
    def __init__(self, message, *, path=None, line=None, offset=None):
        where = []
        if path is not None:
            where.append(str(path))
        if line is not None:
            where.append(f"line {line}")
        if offset is not None:
            where.append(f"byte offset {offset}")
        prefix = ": ".join([", ".join(where)]) + ": " if where else ""
        super().__init__(prefix + message)
        self.path = path
        self.line = line
        self.offset = offset
