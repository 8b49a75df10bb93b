"""Exception hierarchy shared by every module."""


class SvctBenchError(Exception):
    """Base class for all package errors."""


class InvalidArgumentError(SvctBenchError, ValueError):
    pass


class DegenerateCalibrationError(SvctBenchError, ValueError):
    """Every calibration sinogram was constant, so sigma_y would be zero."""


class UnsupportedDimensionError(InvalidArgumentError):
    pass


class NumericalFailureError(SvctBenchError, ArithmeticError):
    """A non-finite value or a solver breakdown inside a computation.

    ``step`` and ``method`` identify where a sampler chain diverged, when known.
    """

    def __init__(self, message, *, step=None, method=None):
        super().__init__(message)
        self.step = step
        self.method = method


class BatchFailureError(SvctBenchError):
    def __init__(self, message, report):
        super().__init__(message)
        self.report = report


class ConfigError(SvctBenchError, ValueError):
    pass
