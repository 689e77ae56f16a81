"""Exception hierarchy."""


class PdcountError(Exception):
    """Base class for all package errors."""


class DomainError(PdcountError, ValueError):
    """Input outside the domain of a function (overflow, infeasible parameters)."""


class NonStationaryError(DomainError):
    """Transition matrix without a unique stationary distribution."""


class DataError(PdcountError, ValueError):
    """Invalid count series or input file."""


class MissingColumnError(DataError):
    pass


class NonIntegerCountError(DataError):
    pass


class NegativeCountError(DataError):
    pass


class MissingValueError(DataError):
    pass


class TooFewRowsError(DataError):
    pass


class RankDeficientError(DataError):
    pass


class ConvergenceError(PdcountError, RuntimeError):
    """Optimiser failed to reach a stationary point."""


class CovarianceError(PdcountError, ArithmeticError):
    """Singular Hessian or indefinite sandwich covariance."""


class InfeasibleTargetError(PdcountError):
    """Calibration target not reachable within tolerance by the latent family.

    ``closest`` holds the best spec found and ``profile`` its factor profile.
    """

    def __init__(self, message, closest=None, profile=None):
        super().__init__(message)
        self.closest = closest
        self.profile = profile


class StudyError(PdcountError, RuntimeError):
    pass
