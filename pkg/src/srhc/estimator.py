"""Conditional-Gaussian filter, Riccati limit, error lift and covariance bounds.

Under any measurable bounded output feedback the conditional law of the
state stays Gaussian and its moments follow the Kalman recursion, so the
same update equations drive the closed loop here.

Gain indexing follows the lifted error model: ``K_t`` is the gain computed
from ``P_{t+1|t}`` and used in the measurement update at ``t+1``;
``Gamma_t = I - K_t C`` and ``Phi_t = Gamma_t A``.
"""
import csv
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from .exceptions import NoConvergence, SingularInnovationCovariance
from .validation import symmetrize

TPRIME_TOL = 1e-6


@dataclass(frozen=True, eq=False)
class FilterState:
    xhat_filt: np.ndarray = None
    P_filt: np.ndarray = None
    xhat_pred: np.ndarray = None
    P_pred: np.ndarray = None
    K: np.ndarray = None
    Gamma: np.ndarray = None
    Phi: np.ndarray = None
    t: int = 0

    @classmethod
    def initial(cls, model):
        """Prior ``x_0 ~ N(xhat0, sigma_x0)`` awaiting the first measurement."""
        return cls(xhat_pred=np.array(model.xhat0, dtype=float),
                   P_pred=np.array(model.sigma_x0, dtype=float), t=0)


@dataclass(frozen=True, eq=False)
class RiccatiSolution:
    P_star: np.ndarray
    P_circ: np.ndarray
    iterations: int
    residual: float
    history: list = field(default_factory=list, repr=False)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iteration", "residual"])
            for k, r in enumerate(self.history, start=1):
                w.writerow([k, repr(float(r))])


@dataclass(frozen=True)
class CovarianceBounds:
    rho: float
    rho_m: float
    T_prime: int


@dataclass(frozen=True, eq=False)
class ErrorLift:
    Fe: np.ndarray
    Fw: np.ndarray
    Fv: np.ndarray

    @property
    def N(self):
        n = self.Fe.shape[1]
        return self.Fe.shape[0] // n - 1


def _innovation_factor(P, model):
    S = symmetrize(model.C @ P @ model.C.T + model.sigma_v)
    try:
        return cho_factor(S, lower=True)
    except LinAlgError as exc:
        raise SingularInnovationCovariance(str(exc)) from exc


def kalman_gain(P_pred, model):
    """``P C^T (C P C^T + Sigma_v)^{-1}`` via a Cholesky solve."""
    factor = _innovation_factor(P_pred, model)
    return cho_solve(factor, model.C @ P_pred).T


def measurement_update(state, y, model):
    """Condition the predicted moments on the new output ``y``."""
    P = state.P_pred
    K = kalman_gain(P, model)
    resid = np.asarray(y, dtype=float) - model.C @ state.xhat_pred
    xhat = state.xhat_pred + K @ resid
    P_filt = symmetrize(P - K @ model.C @ P)
    Gamma = np.eye(model.n) - K @ model.C
    return replace(state, xhat_filt=xhat, P_filt=P_filt, K=K, Gamma=Gamma,
                   Phi=Gamma @ model.A)


def time_update(state, u, model):
    """Propagate the filtered moments through the dynamics with input ``u``."""
    u = np.asarray(u, dtype=float).reshape(-1)
    xhat_pred = model.A @ state.xhat_filt + model.B @ u
    P_pred = symmetrize(model.A @ state.P_filt @ model.A.T + model.sigma_w)
    return replace(state, xhat_pred=xhat_pred, P_pred=P_pred, t=state.t + 1)


def filtered_covariance(P_pred, model):
    K = kalman_gain(P_pred, model)
    return symmetrize(P_pred - K @ model.C @ P_pred)


def riccati_step(P_pred, model):
    """One prediction-covariance Riccati map ``P -> A P_filt A^T + Sigma_w``."""
    return symmetrize(model.A @ filtered_covariance(P_pred, model) @ model.A.T
                      + model.sigma_w)


def riccati_limit(model, tol=1e-12, max_iter=10_000, P0=None):
    """Iterate the prediction Riccati map from ``P_{0|-1}`` to its fixed point.

    Convergence is declared when successive iterates differ by at most ``tol``
    in max-norm, relative to ``max(1, |P|_max)``.  Returns the predicted
    limit ``P_star`` and the filtered limit ``P_circ``.
    """
    P = np.array(model.sigma_x0 if P0 is None else P0, dtype=float)
    history = []
    for k in range(1, max_iter + 1):
        P_next = riccati_step(P, model)
        step = np.abs(P_next - P).max()
        history.append(step)
        P = P_next
        if step <= tol * max(1.0, np.abs(P).max()):
            residual = float(np.abs(riccati_step(P, model) - P).max())
            return RiccatiSolution(P, filtered_covariance(P, model), k, residual, history)
    raise NoConvergence(max_iter, history[-1] if history else float("nan"))


def gain_bound(P_filt, model):
    """Closed-form bound on the gain norm driven by ``P_{t|t}``."""
    num = np.linalg.norm(model.sigma_w, 2) + np.linalg.norm(model.A, 2) ** 2 * np.linalg.norm(P_filt, 2)
    return num * np.linalg.norm(model.C.T, 2) / np.linalg.eigvalsh(model.sigma_v).min()


def filtered_covariance_sequence(model, horizon):
    """``P_{k|k}`` for ``k = 0..horizon`` starting from ``P_{0|-1} = sigma_x0``."""
    P_pred = np.array(model.sigma_x0, dtype=float)
    out = []
    for _ in range(horizon + 1):
        P_filt = filtered_covariance(P_pred, model)
        out.append(P_filt)
        P_pred = symmetrize(model.A @ P_filt @ model.A.T + model.sigma_w)
    return out


def covariance_bounds(model, horizon=500, riccati=None):
    """Settling index ``T'`` and the bounds ``rho >= tr P_{t|t}``, ``rho_m >= |K_t|``.

    ``T'`` is the first index with ``|P_{k|k} - P_circ|_max <= 1e-6``.  Both
    bounds are maxima over the recorded iterates from ``T'`` on and the limit
    ``P_circ`` itself, so they hold for every later ``t``.
    """
    sol = riccati if riccati is not None else riccati_limit(model)
    seq = filtered_covariance_sequence(model, horizon)
    T_prime = next((k for k, P in enumerate(seq)
                    if np.abs(P - sol.P_circ).max() <= TPRIME_TOL), None)
    if T_prime is None:
        raise NoConvergence(horizon, float(np.abs(seq[-1] - sol.P_circ).max()))
    tail = seq[T_prime:] + [sol.P_circ]
    n = model.n
    rho = max(n * np.linalg.eigvalsh(P).max() for P in tail)
    rho_m = max(gain_bound(P, model) for P in tail)
    return CovarianceBounds(float(rho), float(rho_m), int(T_prime))


def steady_state_gains(model, P_star):
    """Gain triple ``(K, Gamma, Phi)`` frozen at the predicted Riccati limit."""
    K = kalman_gain(P_star, model)
    Gamma = np.eye(model.n) - K @ model.C
    return K, Gamma, Gamma @ model.A


def build_error_lift(gains):
    """Stack the filter error recursion ``e_{i+1} = Phi_i e_i + Gamma_i w_i - K_i v_{i+1}``.

    ``gains`` lists ``N`` triples ``(K_i, Gamma_i, Phi_i)`` for the horizon steps.
    """
    gains = list(gains)
    N = len(gains)
    K0 = gains[0][0]
    n, p = K0.shape
    Fe = np.zeros(((N + 1) * n, n))
    Fw = np.zeros(((N + 1) * n, N * n))
    Fv = np.zeros(((N + 1) * n, (N + 1) * p))
    Fe[:n] = np.eye(n)
    for i in range(1, N + 1):
        K, Gamma, Phi = gains[i - 1]
        rows = slice(i * n, (i + 1) * n)
        prev = slice((i - 1) * n, i * n)
        Fe[rows] = Phi @ Fe[prev]
        Fw[rows] = Phi @ Fw[prev]
        Fw[rows, (i - 1) * n:i * n] = Gamma
        Fv[rows] = Phi @ Fv[prev]
        Fv[rows, i * p:(i + 1) * p] = K
    return ErrorLift(Fe, Fw, Fv)


def frozen_error_lift(model, P_star, N):
    return build_error_lift([steady_state_gains(model, P_star)] * N)
