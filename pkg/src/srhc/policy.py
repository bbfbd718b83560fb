"""Affine-in-saturated-residual input policies over a prediction horizon."""
from dataclasses import dataclass, field

import numpy as np

from .exceptions import CausalityViolation


def causal_mask(N, m, p):
    """Boolean ``Nm x Np`` mask of the free (lower block-triangular) gain entries."""
    rows = np.arange(N * m) // m
    cols = np.arange(N * p) // p
    return cols[None, :] <= rows[:, None]


@dataclass(frozen=True, eq=False)
class Policy:
    """``U = eta + Theta phi(Y - Yhat)`` with ``Theta`` block lower triangular.

    ``info`` carries solver diagnostics when the policy came out of a solve.
    """
    eta: np.ndarray
    theta: np.ndarray
    N: int
    m: int
    p: int
    info: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        eta = np.asarray(self.eta, dtype=float).reshape(-1)
        theta = np.asarray(self.theta, dtype=float)
        if eta.shape != (self.N * self.m,) or theta.shape != (self.N * self.m, self.N * self.p):
            raise ValueError("policy dimensions do not match (N, m, p)")
        object.__setattr__(self, "eta", eta)
        object.__setattr__(self, "theta", theta)

    @classmethod
    def zero(cls, N, m, p):
        return cls(np.zeros(N * m), np.zeros((N * m, N * p)), N, m, p)

    def row_bounds(self, phi_max):
        """Worst-case ``|u_i|`` per row: ``|eta_i| + |Theta_i|_1 phi_max``."""
        return np.abs(self.eta) + np.abs(self.theta).sum(axis=1) * phi_max

    def structure_ok(self):
        return bool(np.all(self.theta[~causal_mask(self.N, self.m, self.p)] == 0.0))

    def certified(self, u_max, phi_max, tol=1e-8):
        return self.structure_ok() and bool(np.all(self.row_bounds(phi_max) <= u_max + tol))

    def mean_inputs(self, lambda_phi):
        """Expected input sequence ``eta + Theta Lambda^phi`` as an ``N x m`` array."""
        return (self.eta + self.theta @ lambda_phi).reshape(self.N, self.m)


def apply_policy(policy, residuals, step, sat):
    """Input at horizon step ``step`` from the residuals observed so far.

    ``residuals`` holds the unsaturated ``y_i - C xhat_{i|i}`` for
    ``i = 0..step`` (one row each); supplying a later one is a causality
    violation.
    """
    residuals = np.atleast_2d(np.asarray(residuals, dtype=float))
    if residuals.size == 0:
        residuals = residuals.reshape(0, policy.p)
    if step < 0 or step >= policy.N:
        raise ValueError(f"step {step} outside the horizon 0..{policy.N - 1}")
    if residuals.shape[0] > step + 1:
        raise CausalityViolation(
            f"{residuals.shape[0]} residuals supplied for step {step}; "
            f"only indices 0..{step} may be used")
    if residuals.shape[0] < step + 1:
        raise ValueError(f"step {step} needs {step + 1} residuals, got {residuals.shape[0]}")
    m, p = policy.m, policy.p
    rows = slice(step * m, (step + 1) * m)
    gains = policy.theta[rows, :(step + 1) * p]
    return policy.eta[rows] + gains @ sat(residuals).reshape(-1)
