"""Assembly and solution of the per-step convex programs over ``(eta, Theta)``.

The decision vector is ``z = [eta; theta_free; aux]`` where ``theta_free``
lists the causal entries of ``Theta`` row by row and ``aux`` holds the
absolute-value epigraph variables needed to write 1-norm bounds linearly.

Conventions: the objective is ``0.5 z^T H z + f^T z + const``; quadratic
constraints read ``0.5 z^T Q z + q^T z + const <= level``; cone constraints
read ``|G z + h|_2 <= c^T z + d``; linear ones ``A_ub z <= b_ub``.
"""
import json
import time
from dataclasses import dataclass, field

import clarabel
import numpy as np
from scipy import sparse

from .exceptions import DegenerateSpec, InitialInfeasible, Infeasible, NumericalFailure
from .policy import Policy
from .validation import check_spd, symmetrize

DEFAULT_TOL = 1e-8
TIKHONOV = 1e-12


# --- layout ---------------------------------------------------------------

class PolicyLayout:
    """Index bookkeeping for ``eta`` and the free entries of ``Theta``."""

    def __init__(self, N, m, p):
        self.N, self.m, self.p = N, m, p
        self.Nm, self.Np = N * m, N * p
        rows, cols = [], []
        for r in range(self.Nm):
            for c in range((r // m + 1) * p):
                rows.append(r)
                cols.append(c)
        self.theta_rows = np.array(rows, dtype=int)
        self.theta_cols = np.array(cols, dtype=int)
        self.n_theta = len(rows)
        self.n_policy = self.Nm + self.n_theta
        # row-major position of each free entry inside vec(Theta)
        self.theta_flat = self.theta_rows * self.Np + self.theta_cols
        self.free_cols = [(r // m + 1) * p for r in range(self.Nm)]

    def pack(self, eta, theta):
        return np.concatenate([np.asarray(eta, float).reshape(-1),
                               np.asarray(theta, float)[self.theta_rows, self.theta_cols]])

    def unpack(self, z):
        eta = np.array(z[:self.Nm], dtype=float)
        theta = np.zeros((self.Nm, self.Np))
        theta[self.theta_rows, self.theta_cols] = z[self.Nm:self.n_policy]
        return eta, theta

    def to_dict(self):
        return {"N": self.N, "m": self.m, "p": self.p,
                "eta": [0, self.Nm],
                "theta": [[int(r), int(c), self.Nm + k] for k, (r, c)
                          in enumerate(zip(self.theta_rows, self.theta_cols))]}


class _Blocks:
    def __init__(self, start):
        self.size = start
        self.slices = {}

    def add(self, name, count):
        self.slices[name] = (self.size, self.size + count)
        self.size += count
        return slice(self.size - count, self.size)


# --- program container ----------------------------------------------------

@dataclass(eq=False)
class SOCConstraint:
    G: np.ndarray
    h: np.ndarray
    c: np.ndarray
    d: float
    name: str = "soc"

    def violation(self, z):
        return float(np.linalg.norm(self.G @ z + self.h) - (self.c @ z + self.d))


@dataclass(eq=False)
class QuadConstraint:
    Q: np.ndarray
    q: np.ndarray
    const: float
    level: float
    name: str = "quad"

    def lhs(self, z):
        return float(0.5 * z @ self.Q @ z + self.q @ z + self.const)

    def violation(self, z):
        return self.lhs(z) - self.level


@dataclass(eq=False)
class ConvexProgram:
    layout: PolicyLayout
    H: np.ndarray
    f: np.ndarray
    const: float = 0.0
    A_ub: np.ndarray = None
    b_ub: np.ndarray = None
    socs: list = field(default_factory=list)
    quads: list = field(default_factory=list)
    var_map: dict = field(default_factory=dict)
    u_max: float = np.inf
    phi_max: float = 1.0
    drift: object = None

    @property
    def n_vars(self):
        return self.H.shape[0]

    def objective(self, z):
        return float(0.5 * z @ self.H @ z + self.f @ z + self.const)

    def violations(self, z):
        out = {}
        if self.A_ub is not None and len(self.b_ub):
            out["linear"] = float(np.max(self.A_ub @ z - self.b_ub))
        for s in self.socs:
            out[s.name] = s.violation(z)
        for q in self.quads:
            out[q.name] = q.violation(z)
        return out

    def max_violation(self, z):
        v = self.violations(z)
        return max([0.0, *v.values()])

    def lift(self, eta, theta):
        """Full decision vector for a policy, auxiliaries set to their tight values."""
        z = np.zeros(self.n_vars)
        L = self.layout
        z[:L.n_policy] = L.pack(eta, theta)
        tf = z[L.Nm:L.n_policy]
        for name, fn in self._aux_rules().items():
            if name in self.var_map:
                a, b = self.var_map[name]
                z[a:b] = fn(z[:L.Nm], tf, eta, theta)
        return z

    def _aux_rules(self):
        L = self.layout
        rules = {
            "abs_eta": lambda e, tf, eta, th: np.abs(e),
            "abs_theta": lambda e, tf, eta, th: np.abs(tf),
        }
        if self.drift is not None:
            d = self.drift
            km, kp = d.kappa * d.m, d.kappa * L.p
            rules["abs_RTheta"] = lambda e, tf, eta, th: np.abs(d.R @ th[:km, :kp]).ravel()
            rules["drift_norm"] = lambda e, tf, eta, th: [
                np.abs(d.R @ th[:km, :kp]).sum(axis=1).max(initial=0.0)]
        if "abs_deta" in self.var_map:
            m = L.m
            rules["abs_deta"] = lambda e, tf, eta, th: np.abs(eta[:-m] - eta[m:])
            rules["abs_dtheta"] = lambda e, tf, eta, th: np.concatenate(
                [np.abs(th[r, :L.free_cols[r + m]] - th[r + m, :L.free_cols[r + m]])
                 for r in range(L.Nm - m)])
        return rules

    def policy_from(self, z, **info):
        eta, theta = self.layout.unpack(z)
        L = self.layout
        return Policy(eta, theta, L.N, L.m, L.p, info=dict(info))

    def to_dict(self):
        iu = np.triu_indices(self.n_vars)
        return {
            "format": "srhc-convex-program",
            "version": 1,
            "objective": "0.5 z'Hz + f'z + const",
            "n_vars": self.n_vars,
            "H_upper": self.H[iu].tolist(),
            "f": self.f.tolist(),
            "const": self.const,
            "linear": {"A_ub": None if self.A_ub is None else self.A_ub.tolist(),
                       "b_ub": None if self.b_ub is None else self.b_ub.tolist(),
                       "sense": "A_ub z <= b_ub"},
            "soc": [{"name": s.name, "G": s.G.tolist(), "h": s.h.tolist(),
                     "c": s.c.tolist(), "d": s.d, "sense": "|Gz+h| <= c'z+d"}
                    for s in self.socs],
            "quadratic": [{"name": q.name, "Q_upper": q.Q[iu].tolist(), "q": q.q.tolist(),
                           "const": q.const, "level": q.level,
                           "sense": "0.5 z'Qz + q'z + const <= level"} for q in self.quads],
            "variables": {"policy": self.layout.to_dict(),
                          "blocks": {k: list(v) for k, v in self.var_map.items()}},
            "u_max": self.u_max,
            "phi_max": self.phi_max,
        }

    def to_json(self, path=None, **kw):
        text = json.dumps(self.to_dict(), **kw)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text)
        return text


@dataclass(frozen=True, eq=False)
class SoftConstraintSpec:
    """Expected-value state (``S``, ``L``) and input (``S_tilde``) constraints."""
    S: np.ndarray
    L: np.ndarray
    S_tilde: np.ndarray
    delta: float = 1e-3
    nu_bar: int = 30
    alpha_floor: float = 0.0
    beta_floor: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "S", check_spd(self.S, "S", semidefinite=True))
        object.__setattr__(self, "S_tilde", check_spd(self.S_tilde, "S_tilde", semidefinite=True))
        object.__setattr__(self, "L", np.asarray(self.L, dtype=float).reshape(-1))
        if self.L.size != self.S.shape[0]:
            raise ValueError("L and S dimensions differ")
        if self.delta <= 0 or self.nu_bar < 1:
            raise ValueError("delta must be positive and nu_bar >= 1")

    @classmethod
    def from_dict(cls, d, n, m, N):
        """Build from JSON; per-step blocks (``S_step`` etc.) are repeated over the horizon."""
        S = d["S"] if "S" in d else np.kron(np.eye(N + 1), np.asarray(d["S_step"], float))
        if "L" in d:
            L = d["L"]
        elif "L_step" in d:
            L = np.tile(np.asarray(d["L_step"], float), N + 1)
        else:
            L = np.zeros((N + 1) * n)
        St = d["S_tilde"] if "S_tilde" in d else np.kron(np.eye(N), np.asarray(d["S_tilde_step"], float))
        return cls(np.asarray(S, float), L, np.asarray(St, float),
                   float(d.get("delta", 1e-3)), int(d.get("nu_bar", 30)),
                   float(d.get("alpha_floor", 0.0)), float(d.get("beta_floor", 0.0)))


# --- assembly --------------------------------------------------------------

def _vec_rows(M):
    return np.asarray(M).reshape(-1)


def _policy_quadratic(M, layout, lset, lin_eta=None, G=None, Q=None, xhat=None):
    """Hessian/gradient of

        eta'M eta + 2 eta'M Theta Lphi + tr(Theta'M Theta Lphiphi)
        + lin_eta' eta + 2 tr(G Theta Lphix) + 2 tr(Theta' Q Lwphi)

    restricted to ``[eta; theta_free]`` in the ``0.5 z'Hz + f'z`` convention.
    """
    lam = lset.lambda_phi
    sel = layout.theta_flat
    H_ee = 2.0 * M
    H_et = 2.0 * np.kron(M, lam[None, :])[:, sel]
    H_tt = 2.0 * np.kron(M, lset.lambda_phi_phi)[np.ix_(sel, sel)]
    H = np.block([[H_ee, H_et], [H_et.T, H_tt]])
    f_eta = np.zeros(layout.Nm) if lin_eta is None else lin_eta
    grad_theta = np.zeros((layout.Nm, layout.Np))
    if G is not None:
        grad_theta += 2.0 * (lset.lambda_phi_x(xhat) @ G).T
    if Q is not None:
        grad_theta += 2.0 * Q @ lset.lambda_w_phi
    f = np.concatenate([f_eta, _vec_rows(grad_theta)[sel]])
    return symmetrize(H), f


def assemble_objective(xhat, lset, lifted, layout=None):
    """Expected horizon cost as a quadratic in ``[eta; theta_free]`` (constant dropped)."""
    N = lifted.N
    m = lifted.Ba.shape[1] // N
    p = lset.lambda_phi.size // N
    layout = layout or PolicyLayout(N, m, p)
    xhat = np.asarray(xhat, dtype=float).reshape(-1)
    G = lifted.Aa.T @ lifted.Wxa @ lifted.Ba
    Q = lifted.Ba.T @ lifted.Wxa @ lifted.Da
    return _policy_quadratic(lifted.M1, layout, lset, lin_eta=2.0 * G.T @ xhat,
                             G=G, Q=Q, xhat=xhat)


def assemble_input_constraints(layout, u_max, phi_max, blocks, n_vars=None):
    """Rows of ``|eta_i| + phi_max |Theta_i|_1 <= u_max`` via epigraph variables."""
    L = layout
    ae = slice(*blocks.slices["abs_eta"])
    at = slice(*blocks.slices["abs_theta"])
    nv = blocks.size if n_vars is None else n_vars
    n_rows = 2 * L.Nm + 2 * L.n_theta + L.Nm
    A = np.zeros((n_rows, nv))
    b = np.zeros(n_rows)
    i = 0
    for k in range(L.Nm):
        A[i, k], A[i, ae.start + k] = 1.0, -1.0
        A[i + 1, k], A[i + 1, ae.start + k] = -1.0, -1.0
        i += 2
    for k in range(L.n_theta):
        A[i, L.Nm + k], A[i, at.start + k] = 1.0, -1.0
        A[i + 1, L.Nm + k], A[i + 1, at.start + k] = -1.0, -1.0
        i += 2
    for r in range(L.Nm):
        A[i, ae.start + r] = 1.0
        A[i, at.start + np.flatnonzero(L.theta_rows == r)] = phi_max
        b[i] = u_max
        i += 1
    return A, b


def assemble_rate_constraints(layout, delta_u_max, phi_max, blocks, n_vars=None):
    """Conservative rows for ``|u_{l+1} - u_l|_inf <= delta_u_max`` over the horizon.

    Each difference row is bounded like the hard input bound:
    ``|eta_{r+m} - eta_r| + phi_max |Theta_{r+m} - Theta_r|_1 <= delta_u_max``.
    """
    L = layout
    m = L.m
    de = blocks.slices["abs_deta"][0]
    aux = blocks.slices["abs_dtheta"][0]
    nv = blocks.size if n_vars is None else n_vars
    theta_index = {(int(r), int(c)): L.Nm + k
                   for k, (r, c) in enumerate(zip(L.theta_rows, L.theta_cols))}
    rows, rhs = [], []

    def abs_pair(plus, minus, slack):
        for sign in (1.0, -1.0):
            row = np.zeros(nv)
            row[plus] += sign
            if minus is not None:
                row[minus] -= sign
            row[slack] = -1.0
            rows.append(row)
            rhs.append(0.0)

    for r in range(L.Nm - m):
        nxt = r + m
        abs_pair(nxt, r, de + r)
        bound = np.zeros(nv)
        bound[de + r] = 1.0
        for c in range(L.free_cols[nxt]):
            abs_pair(theta_index[(nxt, c)], theta_index.get((r, c)), aux)
            bound[aux] = phi_max
            aux += 1
        rows.append(bound)
        rhs.append(delta_u_max)
    return np.array(rows), np.array(rhs)


def _drift_parts(drift, layout, blocks, nv):
    """Linear rows for the ``|R Theta_{1:km}|_inf`` epigraph and the cone itself."""
    L = layout
    km, kp = drift.kappa * drift.m, drift.kappa * L.p
    n2 = drift.R.shape[0]
    g = slice(*blocks.slices["abs_RTheta"])
    s_idx = blocks.slices["drift_norm"][0]
    theta_index = {(int(r), int(c)): L.Nm + k
                   for k, (r, c) in enumerate(zip(L.theta_rows, L.theta_cols))}
    rows, rhs = [], []
    for k in range(n2):
        total = np.zeros(nv)
        total[s_idx] = -1.0
        for j in range(kp):
            expr = np.zeros(nv)
            for r in range(km):
                if (r, j) in theta_index:
                    expr[theta_index[(r, j)]] = drift.R[k, r]
            gi = g.start + k * kp + j
            pos = expr.copy()
            pos[gi] = -1.0
            neg = -expr
            neg[gi] = -1.0
            rows += [pos, neg]
            rhs += [0.0, 0.0]
            total[gi] = 1.0
        rows.append(total)
        rhs.append(0.0)
    G = np.zeros((n2, nv))
    G[:, :km] = drift.R
    c = np.zeros(nv)
    c[s_idx] = -drift.coef
    soc = SOCConstraint(G, np.array(drift.offset, dtype=float), c, float(drift.rhs), "drift")
    return np.array(rows), np.array(rhs), soc


def _soft_quadratics(xhat, P, lset, lifted, spec, layout, model):
    """Left-hand sides of the expected state and input constraints."""
    xhat = np.asarray(xhat, dtype=float).reshape(-1)
    Aa, Ba, Da = lifted.Aa, lifted.Ba, lifted.Da
    S, Lv = spec.S, spec.L
    G = Aa.T @ S @ Ba
    Qm = Ba.T @ S @ Da
    BtL = Ba.T @ Lv
    H1, f1 = _policy_quadratic(symmetrize(Ba.T @ S @ Ba), layout, lset,
                               lin_eta=2.0 * G.T @ xhat + BtL, G=G, Q=Qm, xhat=xhat)
    f1[layout.Nm:] += _vec_rows(np.outer(BtL, lset.lambda_phi))[layout.theta_flat]
    Exx = np.outer(xhat, xhat) + P
    Sw = np.kron(np.eye(lifted.N), model.sigma_w)
    c1 = (np.trace(Aa.T @ S @ Aa @ Exx) + np.trace(Da.T @ S @ Da @ Sw) + Lv @ Aa @ xhat)
    H2, f2 = _policy_quadratic(spec.S_tilde, layout, lset)
    return (H1, f1, float(c1)), (H2, f2, 0.0)


def assemble_soft_constraints(xhat, P, lset, lifted, spec, alpha, beta, model, layout=None, n_vars=None):
    N = lifted.N
    m = lifted.Ba.shape[1] // N
    p = lset.lambda_phi.size // N
    layout = layout or PolicyLayout(N, m, p)
    nv = layout.n_policy if n_vars is None else n_vars
    out = []
    for (H, f, c), level, name in zip(_soft_quadratics(xhat, P, lset, lifted, spec, layout, model),
                                      (alpha, beta), ("state_soft", "input_soft")):
        Q = np.zeros((nv, nv))
        Q[:layout.n_policy, :layout.n_policy] = H
        q = np.zeros(nv)
        q[:layout.n_policy] = f
        out.append(QuadConstraint(Q, q, c, float(level), name))
    return out


def compute_alpha_beta_star(xhat, P, lifted, spec, u_max, model):
    """Constraint levels at which the soft constraints hold for every admissible policy."""
    xhat = np.asarray(xhat, dtype=float).reshape(-1)
    Aa, Ba, Da = lifted.Aa, lifted.Ba, lifted.Da
    Nm = Ba.shape[1]
    S, Lv = spec.S, spec.L
    Exx = np.outer(xhat, xhat) + P
    Sw = np.kron(np.eye(lifted.N), model.sigma_w)
    alpha = (3.0 * (np.trace(Aa.T @ S @ Aa @ Exx) + np.trace(Da.T @ S @ Da @ Sw))
             + 3.0 * Nm * np.linalg.norm(Ba.T @ S @ Ba, 2) * u_max ** 2
             + Lv @ Aa @ xhat + np.abs(Lv @ Ba).sum() * u_max)
    beta = Nm * np.linalg.norm(spec.S_tilde, 2) * u_max ** 2
    if not (alpha > 0 and beta > 0):
        raise DegenerateSpec(f"alpha*={alpha:.3e}, beta*={beta:.3e}; both must be positive")
    return float(alpha), float(beta)


class ProgramBuilder:
    """Caches the estimate-independent parts of the program for repeated solves."""

    def __init__(self, model, lifted, lset, horizon, split=None, stability=None,
                 soft=None, delta_u_max=None, sat=None, tikhonov=TIKHONOV):
        from .lambdas import SaturationFunction
        self.model = model
        self.lifted = lifted
        self.lset = lset
        self.horizon = horizon
        self.split = split
        self.stability = stability
        self.soft = soft
        self.delta_u_max = delta_u_max
        self.tikhonov = tikhonov
        self.sat = sat or SaturationFunction("clip", horizon.phi_max)
        N = lifted.N
        self.layout = PolicyLayout(N, model.m, model.p)
        self._G = lifted.Aa.T @ lifted.Wxa @ lifted.Ba
        self._Q = lifted.Ba.T @ lifted.Wxa @ lifted.Da
        H, _ = _policy_quadratic(lifted.M1, self.layout, lset)
        self._H_policy = H + tikhonov * np.eye(H.shape[0])
        lam = np.linalg.eigvalsh(H).min()
        if lam < -1e-9 * max(1.0, np.abs(H).max()):
            raise NumericalFailure(f"objective Hessian is not PSD (min eigenvalue {lam:.3e})")

    def drift_for(self, xhat):
        from .stability import drift_constraint_data
        if self.split is None or self.stability is None or self.split.n2 == 0:
            return None
        xhat2 = np.asarray(xhat, dtype=float)[self.split.n1:]
        return drift_constraint_data(xhat2, self.stability, self.split, self.lifted.N,
                                     self.model.m, self.horizon.phi_max)

    def build(self, xhat, P=None, alpha=None, beta=None, drift="auto"):
        xhat = np.asarray(xhat, dtype=float).reshape(-1)
        L = self.layout
        drift = self.drift_for(xhat) if drift == "auto" else drift
        blocks = _Blocks(L.n_policy)
        blocks.add("abs_eta", L.Nm)
        blocks.add("abs_theta", L.n_theta)
        if self.delta_u_max is not None and L.N > 1:
            blocks.add("abs_deta", L.Nm - L.m)
            blocks.add("abs_dtheta", sum(L.free_cols[r + L.m] for r in range(L.Nm - L.m)))
        if drift is not None:
            blocks.add("abs_RTheta", drift.R.shape[0] * drift.kappa * L.p)
            blocks.add("drift_norm", 1)
        nv = blocks.size

        H = np.zeros((nv, nv))
        H[:L.n_policy, :L.n_policy] = self._H_policy
        f = np.zeros(nv)
        grad_theta = 2.0 * (self.lset.lambda_phi_x(xhat) @ self._G).T + 2.0 * self._Q @ self.lset.lambda_w_phi
        f[:L.Nm] = 2.0 * self._G.T @ xhat
        f[L.Nm:L.n_policy] = _vec_rows(grad_theta)[L.theta_flat]

        A_parts, b_parts = [], []
        A, b = assemble_input_constraints(L, self.horizon.u_max, self.horizon.phi_max, blocks, nv)
        A_parts.append(A)
        b_parts.append(b)
        if "abs_deta" in blocks.slices:
            A, b = assemble_rate_constraints(L, self.delta_u_max, self.horizon.phi_max, blocks, nv)
            A_parts.append(A)
            b_parts.append(b)
        socs = []
        if drift is not None:
            A, b, soc = _drift_parts(drift, L, blocks, nv)
            A_parts.append(A)
            b_parts.append(b)
            socs.append(soc)
        quads = []
        if self.soft is not None and alpha is not None:
            P = self.lset.P_used if P is None else P
            quads = assemble_soft_constraints(xhat, P, self.lset, self.lifted, self.soft,
                                              alpha, beta, self.model, L, nv)
        return ConvexProgram(
            layout=L, H=H, f=f, A_ub=np.vstack(A_parts), b_ub=np.concatenate(b_parts),
            socs=socs, quads=quads, var_map=dict(blocks.slices),
            u_max=self.horizon.u_max, phi_max=self.horizon.phi_max, drift=drift)


# --- solver ----------------------------------------------------------------

_INFEASIBLE = {"PrimalInfeasible", "AlmostPrimalInfeasible"}
_SOLVED = {"Solved", "AlmostSolved"}


def _quad_to_soc(qc, nv):
    """``0.5|F z|^2 <= tau`` with ``tau = level - const - q'z`` as a second-order cone."""
    w, V = np.linalg.eigh(symmetrize(qc.Q))
    keep = w > 1e-14 * max(1.0, w.max(initial=0.0))
    F = (V[:, keep] * np.sqrt(w[keep])).T
    # |x|^2 <= 2 tau  <=>  |[x; tau - 1/2]| <= tau + 1/2
    tau_a = -qc.q
    tau_b = qc.level - qc.const
    top_a, top_b = tau_a, tau_b + 0.5
    rows_a = np.vstack([F, tau_a[None, :]]) if F.size else tau_a[None, :]
    rows_b = np.concatenate([np.zeros(F.shape[0]), [tau_b - 0.5]])
    # clarabel form: s = b - A z in SOC, s = [top; rows]
    A = -np.vstack([top_a[None, :], rows_a])
    b = np.concatenate([[top_b], rows_b])
    return A, b


def _clean_hard_bounds(program, eta, theta):
    """Scale any row whose worst-case magnitude exceeds ``u_max`` by round-off back onto the bound."""
    rb = np.abs(eta) + np.abs(theta).sum(axis=1) * program.phi_max
    over = rb > program.u_max
    if np.any(over):
        scale = program.u_max / rb[over]
        eta = eta.copy()
        theta = theta.copy()
        eta[over] *= scale
        theta[over] *= scale[:, None]
    return eta, theta


def solve(program, tol=DEFAULT_TOL, max_iter=200):
    """Solve ``program`` with an interior-point conic method.

    Returns a :class:`Policy` whose ``info`` holds status, objective, maximum
    constraint violation and timing.  Raises :class:`Infeasible` when the
    solver certifies infeasibility and :class:`NumericalFailure` when it
    stops without a point meeting the tolerance.
    """
    nv = program.n_vars
    A_rows, b_rows, cones = [], [], []
    if program.A_ub is not None and len(program.b_ub):
        A_rows.append(program.A_ub)
        b_rows.append(program.b_ub)
        cones.append(clarabel.NonnegativeConeT(len(program.b_ub)))
    for s in program.socs:
        A_rows.append(-np.vstack([s.c[None, :], s.G]))
        b_rows.append(np.concatenate([[s.d], s.h]))
        cones.append(clarabel.SecondOrderConeT(1 + s.G.shape[0]))
    for q in program.quads:
        A, b = _quad_to_soc(q, nv)
        A_rows.append(A)
        b_rows.append(b)
        cones.append(clarabel.SecondOrderConeT(A.shape[0]))

    settings = clarabel.DefaultSettings()
    settings.verbose = False
    settings.tol_gap_abs = tol
    settings.tol_gap_rel = tol
    settings.tol_feas = tol
    settings.max_iter = max_iter
    P = sparse.triu(sparse.csc_matrix(program.H), format="csc")
    A = sparse.csc_matrix(np.vstack(A_rows)) if A_rows else sparse.csc_matrix((0, nv))
    b = np.concatenate(b_rows) if b_rows else np.zeros(0)
    t0 = time.perf_counter()
    sol = clarabel.DefaultSolver(P, np.asarray(program.f, float), A, b, cones, settings).solve()
    elapsed = time.perf_counter() - t0
    status = str(sol.status)
    if status in _INFEASIBLE:
        raise Infeasible(f"solver status {status}")

    z = np.asarray(sol.x, dtype=float)
    eta, theta = program.layout.unpack(z)
    eta, theta = _clean_hard_bounds(program, eta, theta)
    z = program.lift(eta, theta)
    scale = max(1.0, float(np.abs(program.b_ub).max(initial=0.0)) if program.b_ub is not None else 1.0,
                *(abs(s.d) for s in program.socs), *(abs(q.level) for q in program.quads))
    viol = program.max_violation(z)
    feasible = viol <= 10.0 * tol * scale
    if not feasible:
        if status in _SOLVED or status in {"MaxIterations", "InsufficientProgress", "NumericalError"}:
            raise NumericalFailure(
                f"solver status {status}; max constraint violation {viol:.3e}")
        raise NumericalFailure(f"solver status {status}")
    return program.policy_from(z, status=status, objective=program.objective(z),
                               max_violation=viol, iterations=int(sol.iterations),
                               solve_time=elapsed)


def is_feasible(program, tol=DEFAULT_TOL):
    try:
        solve(program, tol)
    except Infeasible:
        return False
    return True


# --- soft-level bisection ----------------------------------------------------

@dataclass(frozen=True, eq=False)
class BisectionResult:
    policy: Policy
    alpha: float
    beta: float
    alpha_lower: float
    beta_lower: float
    iterations: int
    history: list


def bisect_soft_levels(build, alpha_star, beta_star, delta=1e-3, nu_bar=30,
                alpha_floor=0.0, beta_floor=0.0, tol=DEFAULT_TOL):
    """Bisect the soft-constraint levels ``(alpha, beta)`` jointly.

    ``build(alpha, beta)`` returns the program at those levels.  The upper
    levels start at ``(alpha_star, beta_star)`` and must be feasible; each
    iteration solves at the midpoint and moves the upper bracket down on
    success or the lower bracket up on failure.  The last feasible policy is
    returned.
    """
    hi_a, lo_a, hi_b, lo_b = alpha_star, alpha_floor, beta_star, beta_floor
    try:
        best = solve(build(hi_a, hi_b), tol)
    except Infeasible as exc:
        raise InitialInfeasible(
            f"program infeasible at the initial levels alpha={hi_a:.6g}, beta={hi_b:.6g}") from exc
    history = [(hi_a, hi_b, True)]
    nu = 1
    while True:
        a, b = 0.5 * (hi_a + lo_a), 0.5 * (hi_b + lo_b)
        try:
            cand = solve(build(a, b), tol)
            ok = True
        except (Infeasible, NumericalFailure):
            ok = False
        history.append((a, b, ok))
        if ok:
            hi_a, hi_b, best = a, b, cand
        else:
            lo_a, lo_b = a, b
        nu += 1
        if (abs(hi_a - lo_a) <= delta and abs(hi_b - lo_b) <= delta) or nu > nu_bar:
            break
    return BisectionResult(best, hi_a, hi_b, lo_a, lo_b, nu - 1, history)
