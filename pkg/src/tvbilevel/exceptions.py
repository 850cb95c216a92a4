"""Exception hierarchy shared across the package."""


class TVBilevelError(Exception):
    """Base class for all package errors."""


class NonConvergence(TVBilevelError):
    """An iterative solver hit its iteration cap before meeting tolerance.

    The last residuals are attached as ``residuals`` and the partial
    result (if any) as ``solution``.
    """

    def __init__(self, message, residuals=None, solution=None):
        super().__init__(message)
        self.residuals = residuals
        self.solution = solution


class InvalidParam(TVBilevelError, ValueError):
    """A regularization parameter or solver option is out of range."""


class ShapeMismatch(TVBilevelError, ValueError):
    pass


class InfeasibleDual(TVBilevelError):
    """Dual variable violates ``|q_j| <= alpha_j`` beyond tolerance."""


class SingularSystem(TVBilevelError):
    pass


class AssumptionViolated(TVBilevelError):
    """A structural assumption (e.g. empty zero-inactive set) fails."""


class MaxIterations(TVBilevelError):
    def __init__(self, message, trace=None, result=None):
        super().__init__(message)
        self.trace = trace
        self.result = result


class UnsupportedFormat(TVBilevelError):
    pass


class CorruptFile(TVBilevelError):
    pass


class IoFailure(TVBilevelError, OSError):
    pass


class ConfigError(TVBilevelError):
    pass


class IdenticalImages(TVBilevelError):
    """PSNR requested for identical images (zero error)."""


class DegenerateModel(TVBilevelError):
    """The quadratic model has nonpositive curvature along the gradient."""


class NoBranchFits(TVBilevelError):
    """No disjunctive branch combination satisfies the stationarity tolerance."""
