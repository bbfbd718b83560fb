"""Exception hierarchy.

Every class carries an ``exit_code`` used by the command-line front end, so
each failure class maps to a distinct process status.
"""


class SRHCError(Exception):
    exit_code = 1


# --- model / assumption checks -------------------------------------------

class DimensionMismatch(SRHCError, ValueError):
    exit_code = 10


class NotPositiveDefinite(SRHCError, ValueError):
    exit_code = 11

    def __init__(self, which, detail=""):
        self.which = which
        super().__init__(f"{which} is not positive definite{': ' + detail if detail else ''}")


class NotLyapunovStable(SRHCError, ValueError):
    exit_code = 12


class NotStabilizable(SRHCError, ValueError):
    exit_code = 13


class NotObservable(SRHCError, ValueError):
    exit_code = 14


# --- Jordan split ---------------------------------------------------------

class NotBlockDiagonal(SRHCError, ValueError):
    exit_code = 20


class NotSchur(SRHCError, ValueError):
    exit_code = 21


class NotOrthogonal(SRHCError, ValueError):
    exit_code = 22


class KappaMismatch(SRHCError, ValueError):
    exit_code = 23


class NotReachable(SRHCError, ValueError):
    exit_code = 24


class InvalidHorizon(SRHCError, ValueError):
    exit_code = 25


# --- estimation -----------------------------------------------------------

class SingularInnovationCovariance(SRHCError, ArithmeticError):
    exit_code = 30


class NoConvergence(SRHCError, ArithmeticError):
    exit_code = 31

    def __init__(self, max_iter, residual=float("nan")):
        self.max_iter = max_iter
        self.residual = residual
        super().__init__(
            f"Riccati iteration did not converge in {max_iter} iterations "
            f"(last residual {residual:.3e})")


# --- Lambda cache ---------------------------------------------------------

class CacheCorrupt(SRHCError, IOError):
    exit_code = 40


# --- stability / optimisation --------------------------------------------

class DegenerateReachability(SRHCError, ValueError):
    exit_code = 50


class DegenerateSpec(SRHCError, ValueError):
    exit_code = 51


class Infeasible(SRHCError):
    exit_code = 52


class NumericalFailure(SRHCError, ArithmeticError):
    exit_code = 53


class InitialInfeasible(SRHCError):
    exit_code = 54


# --- closed loop ----------------------------------------------------------

class CausalityViolation(SRHCError, ValueError):
    exit_code = 60


class AuthorityTooLow(SRHCError, ValueError):
    exit_code = 61


class SolveFailed(SRHCError):
    exit_code = 62

    def __init__(self, t, cause, record=None, path=None):
        self.t = t
        self.cause = cause
        self.record = record
        self.path = path
        where = f"path {path}, " if path is not None else ""
        super().__init__(f"solve failed at {where}t={t}: {cause}")
