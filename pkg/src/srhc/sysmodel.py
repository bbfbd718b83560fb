"""Plant definition, assumption checks, real-Jordan split and lifted dynamics.

The plant is

    x_{t+1} = A x_t + B u_t + w_t,     y_t = C x_t + v_t

with Gaussian ``w``, ``v`` and initial state.  ``A`` is expected to already be
in block-diagonal real Jordan order ``diag(A1, A2)`` with ``A1`` Schur stable
and ``A2`` orthogonal; the split is supplied by the user and validated here.
"""
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import block_diag

from .exceptions import (
    DimensionMismatch, InvalidHorizon, KappaMismatch, NotBlockDiagonal,
    NotLyapunovStable, NotOrthogonal, NotReachable, NotSchur, NotStabilizable,
)
from .validation import (
    RANK_TOL, array_digest, check_matrix, check_spd, check_square,
    check_vector, numerical_rank,
)

#: eigenvalues closer than this are treated as one repeated eigenvalue
EIG_CLUSTER_TOL = 1e-6
ORTHO_TOL = 1e-9


@dataclass(frozen=True, eq=False)
class SystemModel:
    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    sigma_w: np.ndarray
    sigma_v: np.ndarray
    sigma_x0: np.ndarray
    xhat0: np.ndarray = None

    def __post_init__(self):
        A = check_square(self.A, "A")
        n = A.shape[0]
        B = check_matrix(self.B, "B", (n, None))
        C = check_matrix(self.C, "C", (None, n))
        p = C.shape[0]
        sw = check_matrix(self.sigma_w, "sigma_w", (n, n))
        sv = check_matrix(self.sigma_v, "sigma_v", (p, p))
        sx = check_matrix(self.sigma_x0, "sigma_x0", (n, n))
        xhat0 = np.zeros(n) if self.xhat0 is None else check_vector(self.xhat0, "xhat0", n)
        for name, val in (("A", A), ("B", B), ("C", C), ("sigma_w", sw),
                          ("sigma_v", sv), ("sigma_x0", sx), ("xhat0", xhat0)):
            val.setflags(write=False)
            object.__setattr__(self, name, val)

    @property
    def n(self):
        return self.A.shape[0]

    @property
    def m(self):
        return self.B.shape[1]

    @property
    def p(self):
        return self.C.shape[0]

    def fingerprint(self):
        return array_digest(self.A, self.B, self.C, self.sigma_w, self.sigma_v,
                            self.sigma_x0, self.xhat0)


@dataclass(frozen=True, eq=False)
class ValidatedModel(SystemModel):
    """A :class:`SystemModel` that passed :func:`validate_model`."""


@dataclass(frozen=True, eq=False)
class JordanSplit:
    n1: int
    n2: int
    A1: np.ndarray
    A2: np.ndarray
    B1: np.ndarray
    B2: np.ndarray
    kappa: int = None

    @classmethod
    def from_model(cls, model, n1, n2=None, kappa=None):
        """Slice ``model.A`` / ``model.B`` at ``n1``; off-diagonal blocks must vanish."""
        n = model.n
        n2 = n - n1 if n2 is None else n2
        if n1 < 0 or n2 < 0 or n1 + n2 != n:
            raise DimensionMismatch(f"split ({n1}, {n2}) does not partition n={n}")
        A = model.A
        off = np.concatenate([A[:n1, n1:].ravel(), A[n1:, :n1].ravel()])
        if off.size and np.abs(off).max() > RANK_TOL * max(1.0, np.abs(A).max()):
            raise NotBlockDiagonal(
                f"A is not block diagonal at split ({n1}, {n2}); "
                "bring it to real Jordan order first")
        return cls(n1, n2, A[:n1, :n1].copy(), A[n1:, n1:].copy(),
                   model.B[:n1].copy(), model.B[n1:].copy(), kappa)


@dataclass(frozen=True)
class HorizonConfig:
    N: int
    Nc: int
    u_max: float
    phi_max: float = 1.0

    def check(self, kappa=1):
        if not (self.N >= self.Nc >= max(kappa, 1)):
            raise InvalidHorizon(
                f"need N >= Nc >= kappa >= 1, got N={self.N}, Nc={self.Nc}, kappa={kappa}")
        if self.u_max <= 0 or self.phi_max <= 0:
            raise InvalidHorizon("u_max and phi_max must be positive")
        return self


@dataclass(frozen=True, eq=False)
class CostWeights:
    Wx: list
    WxN: np.ndarray
    Wu: list

    def __post_init__(self):
        Wx = [check_spd(w, f"Wx[{k}]") for k, w in enumerate(self.Wx)]
        Wu = [check_spd(w, f"Wu[{k}]") for k, w in enumerate(self.Wu)]
        if len(Wx) != len(Wu):
            raise DimensionMismatch("Wx and Wu must list one weight per horizon step")
        object.__setattr__(self, "Wx", Wx)
        object.__setattr__(self, "Wu", Wu)
        object.__setattr__(self, "WxN", check_spd(self.WxN, "WxN"))

    @classmethod
    def uniform(cls, Wx, Wu, N, WxN=None):
        Wx = check_matrix(Wx, "Wx")
        Wu = check_matrix(Wu, "Wu")
        return cls([Wx] * N, Wx if WxN is None else WxN, [Wu] * N)

    @property
    def N(self):
        return len(self.Wx)


@dataclass(frozen=True, eq=False)
class LiftedSystem:
    """Horizon-stacked dynamics ``X = Aa x + Ba U + Da W``, ``Y = Ca X + V``."""
    N: int
    Aa: np.ndarray
    Ba: np.ndarray
    Da: np.ndarray
    Ca: np.ndarray
    Wxa: np.ndarray
    Wua: np.ndarray
    M1: np.ndarray


def _eigen_clusters(eigs, tol=EIG_CLUSTER_TOL):
    clusters = []
    for lam in eigs:
        for c in clusters:
            if abs(lam - c[0]) <= tol:
                c.append(lam)
                break
        else:
            clusters.append([lam])
    return [(np.mean(c), len(c)) for c in clusters]


def check_lyapunov_stable(A, tol=RANK_TOL):
    """Raise :class:`NotLyapunovStable` unless ``A`` has all eigenvalues in the
    closed unit disc with the unit-modulus ones semisimple."""
    n = A.shape[0]
    if n == 0:
        return
    for lam, alg in _eigen_clusters(np.linalg.eigvals(A)):
        mod = abs(lam)
        if mod > 1.0 + tol:
            raise NotLyapunovStable(f"eigenvalue {lam:.6g} outside the unit disc")
        if mod >= 1.0 - EIG_CLUSTER_TOL:
            geo = n - numerical_rank(A - lam * np.eye(n), tol=EIG_CLUSTER_TOL)
            if geo != alg:
                raise NotLyapunovStable(
                    f"unit-modulus eigenvalue {lam:.6g} is defective "
                    f"(algebraic {alg}, geometric {geo})")


def is_stabilizable(A, B, tol=RANK_TOL):
    """PBH test on eigenvalues with modulus at least ``1 - tol``."""
    n = A.shape[0]
    for lam in np.linalg.eigvals(A):
        if abs(lam) >= 1.0 - tol:
            M = np.hstack([A - lam * np.eye(n), B])
            if numerical_rank(M) < n:
                return False
    return True


def is_observable(A, C):
    n = A.shape[0]
    O = np.vstack([C @ np.linalg.matrix_power(A, k) for k in range(max(n, 1))])
    return numerical_rank(O) == n


def validate_model(model):
    """Check Assumptions on the plant and return a :class:`ValidatedModel`.

    Raises
    ------
    NotPositiveDefinite
        ``sigma_w`` or ``sigma_v`` not SPD, or ``sigma_x0`` not PSD.
    NotLyapunovStable, NotStabilizable
    """
    if isinstance(model, ValidatedModel):
        return model
    check_spd(model.sigma_w, "sigma_w")
    check_spd(model.sigma_v, "sigma_v")
    check_spd(model.sigma_x0, "sigma_x0", semidefinite=True)
    check_lyapunov_stable(model.A)
    if not is_stabilizable(model.A, model.B):
        raise NotStabilizable("(A, B) fails the PBH test on a marginal eigenvalue")
    return ValidatedModel(model.A, model.B, model.C, model.sigma_w, model.sigma_v,
                          model.sigma_x0, model.xhat0)


def reachability_matrix(A, B, steps):
    """``[A^{steps-1} B, ..., A B, B]``."""
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if A.shape[0] != A.shape[1] or B.shape[0] != A.shape[0]:
        raise DimensionMismatch(f"incompatible A {A.shape} and B {B.shape}")
    blocks = [B]
    for _ in range(steps - 1):
        blocks.append(A @ blocks[-1])
    return np.hstack(blocks[::-1])


def compute_kappa(A2, B2):
    """Smallest ``k <= n2`` for which the k-step reachability matrix has full row rank."""
    n2 = np.asarray(A2).shape[0]
    if n2 == 0:
        return 0
    for k in range(1, n2 + 1):
        if numerical_rank(reachability_matrix(A2, B2, k)) == n2:
            return k
    raise NotReachable(f"(A2, B2) is not reachable within {n2} steps")


def spectral_radius(A):
    if np.asarray(A).size == 0:
        return 0.0
    return float(np.abs(np.linalg.eigvals(A)).max())


def validate_split(model, split):
    """Verify the Jordan split invariants; returns the split with ``kappa`` filled in."""
    if split.n1 + split.n2 != model.n:
        raise DimensionMismatch("split does not partition the state")
    expected = JordanSplit.from_model(model, split.n1, split.n2)
    for name in ("A1", "A2", "B1", "B2"):
        if not np.allclose(getattr(split, name), getattr(expected, name), atol=1e-12):
            raise DimensionMismatch(f"split.{name} does not match the model blocks")
    if split.n1 and spectral_radius(split.A1) >= 1.0 - RANK_TOL:
        raise NotSchur(f"spectral radius of A1 is {spectral_radius(split.A1):.6g}")
    if split.n2:
        dev = np.abs(split.A2.T @ split.A2 - np.eye(split.n2)).max()
        if dev > ORTHO_TOL:
            raise NotOrthogonal(f"max |A2^T A2 - I| = {dev:.3e}")
    kappa = compute_kappa(split.A2, split.B2)
    if split.kappa is not None and split.kappa != kappa:
        raise KappaMismatch(f"declared kappa={split.kappa}, computed {kappa}")
    return JordanSplit(split.n1, split.n2, split.A1, split.A2, split.B1, split.B2, kappa)


def build_lifted(model, weights, N):
    """Stack the dynamics and weights over an ``N``-step horizon."""
    if N < 1:
        raise ValueError("N must be >= 1")
    if weights.N != N:
        raise DimensionMismatch(f"weights cover {weights.N} steps, horizon is {N}")
    n, m, p = model.n, model.m, model.p
    A, B = model.A, model.B
    powers = [np.eye(n)]
    for _ in range(N):
        powers.append(A @ powers[-1])
    Aa = np.vstack(powers)
    Ba = np.zeros(((N + 1) * n, N * m))
    Da = np.zeros(((N + 1) * n, N * n))
    for i in range(1, N + 1):
        for j in range(i):
            Ba[i * n:(i + 1) * n, j * m:(j + 1) * m] = powers[i - j - 1] @ B
            Da[i * n:(i + 1) * n, j * n:(j + 1) * n] = powers[i - j - 1]
    Ca = np.kron(np.eye(N + 1), model.C)
    Wxa = block_diag(*weights.Wx, weights.WxN)
    Wua = block_diag(*weights.Wu)
    M1 = Wua + Ba.T @ Wxa @ Ba
    M1 = 0.5 * (M1 + M1.T)
    return LiftedSystem(N, Aa, Ba, Da, Ca, Wxa, Wua, M1)


def settling_index(T_prime, kappa):
    """``kappa * ceil(T'/kappa)`` (``T'`` itself when there is no orthogonal part)."""
    if kappa <= 0:
        return int(T_prime)
    return int(kappa * math.ceil(T_prime / kappa))
