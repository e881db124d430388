"""Exception types raised across the toolkit."""


class CertError(Exception):
    """Base class for all toolkit errors."""


class NetworkFormatError(CertError, ValueError):
    """Network file does not parse against the JSON schema."""


class DimensionError(CertError, ValueError):
    pass


class MonotonicityError(CertError, ValueError):
    def __init__(self, lambda_min, m, tol):
        self.lambda_min = lambda_min
        self.m = m
        super().__init__(
            f"monotonicity violated: lambda_min(sym(I - W)) = {lambda_min:.6g} "
            f"< m - tol = {m:.6g} - {tol:.1g}"
        )


class UnsupportedNormError(CertError, ValueError):
    pass


class ConvergenceError(CertError, RuntimeError):
    pass


class SolverError(CertError, RuntimeError):
    """The conic backend did not return a usable solution."""


class BallContainmentError(CertError, ValueError):
    pass


class DegenerateEllipsoidError(CertError, RuntimeError):
    pass
