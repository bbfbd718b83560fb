"""Drift-constraint constants, minimum input authority and the candidate controller."""
import math
from dataclasses import dataclass

import numpy as np

from .estimator import CovarianceBounds
from .exceptions import DegenerateReachability
from .sysmodel import reachability_matrix, settling_index

DEFAULT_EPSILON = 10.0


@dataclass(frozen=True)
class StabilityParams:
    zeta: float
    epsilon: float
    r: float
    u_max_star: float
    T: int
    kappa: int
    sigma_min_R: float
    bounds: CovarianceBounds

    @property
    def threshold(self):
        """Estimate norm ``zeta + epsilon`` above which the drift constraint is active."""
        return self.zeta + self.epsilon


@dataclass(frozen=True, eq=False)
class DriftConstraint:
    """``|offset + R eta_{1:km}| + coef * |R Theta_{1:km}|_inf <= rhs``."""
    offset: np.ndarray
    R: np.ndarray
    rhs: float
    coef: float
    kappa: int
    m: int


def compute_zeta(model, split, bounds):
    r"""Uniform bound on the expected norm of the estimator disturbance over
    ``kappa`` steps:

    .. math:: \kappa^{3/2}\rho_m(\|CA\|\sqrt\rho + \|C\|\sqrt{\mathrm{tr}\Sigma_w}
              + \sqrt{\mathrm{tr}\Sigma_v})
    """
    kappa = split.kappa
    if not kappa:
        return 0.0
    CA = np.linalg.norm(model.C @ model.A, 2)
    C = np.linalg.norm(model.C, 2)
    inner = (CA * math.sqrt(bounds.rho) + C * math.sqrt(np.trace(model.sigma_w))
             + math.sqrt(np.trace(model.sigma_v)))
    return float(kappa ** 1.5 * bounds.rho_m * inner)


def compute_umax_star(zeta, epsilon, sigma_min_R):
    if not sigma_min_R > 0:
        raise DegenerateReachability(f"sigma_min(R_kappa) = {sigma_min_R}")
    return (zeta + epsilon / 2.0) / sigma_min_R


def sigma_min_reachability(split):
    if not split.kappa:
        return float("inf")
    R = reachability_matrix(split.A2, split.B2, split.kappa)
    return float(np.linalg.svd(R, compute_uv=False)[split.n2 - 1])


def stability_params(model, split, bounds, epsilon=DEFAULT_EPSILON):
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    zeta = compute_zeta(model, split, bounds)
    if split.kappa:
        s_min = sigma_min_reachability(split)
        u_star = compute_umax_star(zeta, epsilon, s_min)
    else:
        s_min, u_star = float("inf"), 0.0
    return StabilityParams(
        zeta=zeta, epsilon=float(epsilon), r=zeta + epsilon / 2.0,
        u_max_star=float(u_star), T=settling_index(bounds.T_prime, split.kappa),
        kappa=split.kappa, sigma_min_R=s_min, bounds=bounds)


def radial_saturation(z, r):
    """Retraction onto the Euclidean ball of radius ``r``."""
    nz = np.linalg.norm(z)
    return z if nz <= r else z * (r / nz)


def candidate_policy(xhat2, params, split):
    """Open-loop ``kappa``-step input that cancels ``A2^k xhat2`` up to radius ``r``.

    ``u = -pinv(R_kappa) sat_r(A2^kappa xhat2)``; its 2-norm never exceeds
    ``r / sigma_min(R_kappa) = U*_max``.
    """
    if not split.kappa:
        return np.zeros(0)
    xhat2 = np.asarray(xhat2, dtype=float).reshape(-1)
    R = reachability_matrix(split.A2, split.B2, split.kappa)
    z = np.linalg.matrix_power(split.A2, split.kappa) @ xhat2
    return -np.linalg.pinv(R) @ radial_saturation(z, params.r)


def drift_active(xhat2, params):
    return params.kappa > 0 and np.linalg.norm(xhat2) >= params.threshold


def drift_constraint_data(xhat2, params, split, N, m, phi_max=1.0):
    """Second-order-cone data for the drift constraint, or ``None`` when inactive."""
    xhat2 = np.asarray(xhat2, dtype=float).reshape(-1)
    if split.n2 == 0 or not drift_active(xhat2, params):
        return None
    if split.kappa > N:
        raise ValueError("kappa exceeds the prediction horizon")
    R = reachability_matrix(split.A2, split.B2, split.kappa)
    return DriftConstraint(
        offset=np.linalg.matrix_power(split.A2, split.kappa) @ xhat2,
        R=R,
        rhs=float(np.linalg.norm(xhat2) - params.r),
        coef=math.sqrt(split.n2) * phi_max,
        kappa=split.kappa,
        m=m,
    )


def drift_lhs(drift, eta, theta):
    """Evaluate the drift constraint left-hand side at a policy."""
    km = drift.kappa * drift.m
    RT = drift.R @ np.asarray(theta)[:km]
    return (np.linalg.norm(drift.offset + drift.R @ np.asarray(eta)[:km])
            + drift.coef * np.abs(RT).sum(axis=1).max(initial=0.0))


def witness_eta(xhat2, params, split, N, m):
    """Candidate input padded with zeros to the full horizon (``Theta = 0``)."""
    eta = np.zeros(N * m)
    u = candidate_policy(xhat2, params, split)
    eta[:u.size] = u
    return eta


def report(split, params, n_checks=200, seed=0):
    """Text report of the stability constants plus a witness feasibility sweep."""
    rng = np.random.default_rng(seed)
    ok = True
    worst = 0.0
    if split.kappa:
        for _ in range(n_checks):
            d = rng.standard_normal(split.n2)
            d /= np.linalg.norm(d)
            x2 = d * params.threshold * rng.uniform(1.0, 10.0)
            u = candidate_policy(x2, params, split)
            R = reachability_matrix(split.A2, split.B2, split.kappa)
            succ = np.linalg.norm(np.linalg.matrix_power(split.A2, split.kappa) @ x2 + R @ u)
            gap = abs(succ - (np.linalg.norm(x2) - params.r))
            worst = max(worst, gap)
            ok &= bool(np.abs(u).max() <= params.u_max_star * (1 + 1e-12) and gap <= 1e-8)
    lines = [
        f"kappa            {params.kappa}",
        f"sigma_min(R_k)   {params.sigma_min_R:.10g}",
        f"rho              {params.bounds.rho:.10g}",
        f"rho_m            {params.bounds.rho_m:.10g}",
        f"T'               {params.bounds.T_prime}",
        f"T                {params.T}",
        f"zeta             {params.zeta:.10g}",
        f"epsilon          {params.epsilon:.10g}",
        f"r                {params.r:.10g}",
        f"U*_max           {params.u_max_star:.10g}",
        f"witness check    {'PASS' if ok else 'FAIL'} ({n_checks} states, max identity gap {worst:.2e})",
    ]
    return "\n".join(lines), ok
