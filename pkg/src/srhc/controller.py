"""Receding-horizon closed loop, batch simulation and mean-square statistics."""
import csv
import hashlib
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .estimator import FilterState, measurement_update, time_update
from .exceptions import AuthorityTooLow, Infeasible, NumericalFailure, SolveFailed
from .optimizer import DEFAULT_TOL, compute_alpha_beta_star, solve, bisect_soft_levels
from .policy import apply_policy
from .validation import psd_sqrt

SIGNALS = ("x0", "w", "v")


@dataclass(frozen=True)
class SimulationConfig:
    t_end: int = 200
    paths: int = 200
    master_seed: int = 0
    use_soft: bool = False
    delta: float = 1e-3
    nu_bar: int = 30
    x0: tuple = None
    allow_unstable: bool = False
    tol: float = DEFAULT_TOL
    workers: int = 1
    lambda_key: str = None

    def __post_init__(self):
        if self.paths < 1:
            raise ValueError("paths must be >= 1")
        if self.x0 is not None:
            object.__setattr__(self, "x0", tuple(float(v) for v in self.x0))

    def check(self, horizon):
        if self.t_end < horizon.Nc:
            raise ValueError(f"t_end={self.t_end} is shorter than Nc={horizon.Nc}")
        return self

    def digest(self):
        d = asdict(self)
        d.pop("workers")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


def noise_generator(master_seed, path, signal):
    """Counter-based stream dedicated to one ``(path, signal)`` pair."""
    ss = np.random.SeedSequence(master_seed, spawn_key=(int(path), SIGNALS.index(signal)))
    return np.random.Generator(np.random.Philox(ss))


@dataclass(frozen=True, eq=False)
class NoiseRealization:
    x0: np.ndarray
    w: np.ndarray     # t_end x n
    v: np.ndarray     # (t_end + 1) x p

    @classmethod
    def draw(cls, model, t_end, master_seed, path, x0=None):
        if x0 is None:
            z = noise_generator(master_seed, path, "x0").standard_normal(model.n)
            x0 = model.xhat0 + psd_sqrt(model.sigma_x0) @ z
        w = noise_generator(master_seed, path, "w").standard_normal((t_end, model.n)) @ psd_sqrt(model.sigma_w)
        v = noise_generator(master_seed, path, "v").standard_normal((t_end + 1, model.p)) @ psd_sqrt(model.sigma_v)
        return cls(np.asarray(x0, dtype=float), w, v)


@dataclass(eq=False)
class TrajectoryRecord:
    """Per-step closed-loop quantities for ``t = 0..t_end``.

    ``u`` and the stage cost's input part are undefined at ``t_end`` (no
    input is applied after the last measurement); ``u[t_end]`` is NaN.
    """
    x: np.ndarray
    y: np.ndarray
    u: np.ndarray
    xhat: np.ndarray
    trace_P: np.ndarray
    innovation: np.ndarray
    resid: np.ndarray
    stage_cost: np.ndarray
    seed: int
    path: int
    config_hash: str
    n1: int = 0
    drift_active: np.ndarray = None
    solve_status: list = field(default_factory=list)

    @property
    def t(self):
        return np.arange(self.x.shape[0])

    @property
    def norm_x(self):
        return np.linalg.norm(self.x, axis=1)

    @property
    def norm_xhat2(self):
        return np.linalg.norm(self.xhat[:, self.n1:], axis=1)

    @property
    def innov_norm(self):
        return np.linalg.norm(self.innovation, axis=1)

    def applied_inputs(self):
        return self.u[~np.isnan(self.u).any(axis=1)]

    def max_input(self):
        u = self.applied_inputs()
        return float(np.abs(u).max(initial=0.0))

    def to_csv(self, path):
        m = self.u.shape[1]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "norm_x", "norm_xhat2", *[f"u_{j + 1}" for j in range(m)],
                        "stage_cost", "innov_norm"])
            for t, nx, nx2, u, c, ni in zip(self.t, self.norm_x, self.norm_xhat2, self.u,
                                             self.stage_cost, self.innov_norm):
                us = ["" if np.isnan(v) else repr(float(v)) for v in u]
                w.writerow([int(t), repr(float(nx)), repr(float(nx2)), *us,
                            repr(float(c)), repr(float(ni))])


class _Recorder:
    def __init__(self, model, t_end):
        T = t_end + 1
        self.x = np.zeros((T, model.n))
        self.y = np.zeros((T, model.p))
        self.u = np.full((T, model.m), np.nan)
        self.xhat = np.zeros((T, model.n))
        self.trace_P = np.zeros(T)
        self.innovation = np.zeros((T, model.p))
        self.resid = np.zeros((T, model.p))
        self.cost = np.zeros(T)
        self.drift = np.zeros(T, dtype=bool)
        self.status = []
        self.last = -1

    def finish(self, seed, path, config_hash, n1):
        k = self.last + 1
        return TrajectoryRecord(
            self.x[:k], self.y[:k], self.u[:k], self.xhat[:k], self.trace_P[:k],
            self.innovation[:k], self.resid[:k], self.cost[:k], seed, path, config_hash,
            n1, self.drift[:k], self.status)


def _solve_block(builder, xhat, P_filt, sim, soft):
    if not (sim.use_soft and soft is not None):
        return solve(builder.build(xhat), sim.tol)
    a_star, b_star = compute_alpha_beta_star(xhat, P_filt, builder.lifted, soft,
                                             builder.horizon.u_max, builder.model)
    res = bisect_soft_levels(lambda a, b: builder.build(xhat, P_filt, a, b), a_star, b_star,
                      sim.delta, sim.nu_bar, soft.alpha_floor, soft.beta_floor, sim.tol)
    return res.policy


def run_receding_horizon(builder, sim, path=0, sat=None, noise=None, policy_fn=None):
    """Simulate one closed-loop path.

    At the start of every ``Nc`` block the program is solved at the filtered
    estimate; within the block the policy row for the current step is
    evaluated on the filtered residuals ``y_i - C xhat_{i|i}`` observed since
    the solve.  ``policy_fn(t, xhat, P)`` replaces the solve when given (used
    to replay a fixed policy).
    """
    model, horizon = builder.model, builder.horizon
    stab = builder.stability
    sim.check(horizon)
    if (policy_fn is None and stab is not None and stab.kappa
            and horizon.u_max < stab.u_max_star * (1 - 1e-12) and not sim.allow_unstable):
        raise AuthorityTooLow(
            f"u_max={horizon.u_max:.6g} is below U*_max={stab.u_max_star:.6g}; "
            "set allow_unstable to run without the stability guarantee")
    sat = sat or builder.sat
    if noise is None:
        noise = NoiseRealization.draw(model, sim.t_end, sim.master_seed, path, sim.x0)
    n1 = builder.split.n1 if builder.split is not None else 0
    Wx, Wu = builder.lifted.Wxa[:model.n, :model.n], builder.lifted.Wua[:model.m, :model.m]
    rec = _Recorder(model, sim.t_end)
    cfg_hash = sim.digest()

    x = noise.x0.copy()
    state = FilterState.initial(model)
    policy, block = None, []
    for t in range(sim.t_end + 1):
        y = model.C @ x + noise.v[t]
        innov = y - model.C @ state.xhat_pred
        state = measurement_update(state, y, model)
        resid = y - model.C @ state.xhat_filt
        rec.x[t], rec.y[t], rec.xhat[t] = x, y, state.xhat_filt
        rec.trace_P[t] = np.trace(state.P_filt)
        rec.innovation[t], rec.resid[t] = innov, resid
        rec.cost[t] = x @ Wx @ x
        rec.last = t
        if t == sim.t_end:
            break
        i = t % horizon.Nc
        if i == 0:
            rec.drift[t] = policy_fn is None and builder.drift_for(state.xhat_filt) is not None
            try:
                if policy_fn is not None:
                    policy = policy_fn(t, state.xhat_filt, state.P_filt)
                else:
                    policy = _solve_block(builder, state.xhat_filt, state.P_filt, sim, builder.soft)
            except (Infeasible, NumericalFailure) as exc:
                raise SolveFailed(t, exc, rec.finish(sim.master_seed, path, cfg_hash, n1),
                                  path) from exc
            rec.status.append((t, policy.info.get("status", "given")))
            block = []
        block.append(resid)
        u = apply_policy(policy, np.array(block), i, sat)
        rec.u[t] = u
        rec.cost[t] += u @ Wu @ u
        x = model.A @ x + model.B @ u + noise.w[t]
        state = time_update(state, u, model)
    return rec.finish(sim.master_seed, path, cfg_hash, n1)


@dataclass(eq=False)
class BatchStats:
    t: np.ndarray
    mean_norm: np.ndarray
    std_norm: np.ndarray
    mean_sq_norm: np.ndarray
    avg_cost: np.ndarray
    paths: int
    input_violations: int
    max_input: float
    records: list = field(default_factory=list, repr=False)
    summary: dict = field(default_factory=dict)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "mean_norm", "std_norm", "mean_sq_norm", "avg_cost"])
            for row in zip(self.t, self.mean_norm, self.std_norm, self.mean_sq_norm, self.avg_cost):
                w.writerow([int(row[0]), *(repr(float(v)) for v in row[1:])])

    def write_summary(self, path):
        with open(path, "w") as fh:
            json.dump(self.summary, fh, indent=2, sort_keys=True)


def _run_path(args):
    builder, sim, path = args
    return run_receding_horizon(builder, sim, path)


def batch_statistics(records, u_max=np.inf):
    norms = np.array([r.norm_x for r in records])
    costs = np.array([r.stage_cost for r in records])
    T = norms.shape[1]
    running = np.cumsum(costs, axis=1) / np.arange(1, T + 1)
    u_abs = [np.abs(r.applied_inputs()) for r in records]
    violations = int(sum(np.sum(u > u_max + 1e-8) for u in u_abs))
    return BatchStats(
        t=np.arange(T),
        mean_norm=norms.mean(0),
        std_norm=norms.std(0, ddof=1) if len(records) > 1 else np.zeros(T),
        mean_sq_norm=(norms ** 2).mean(0),
        avg_cost=running.mean(0),
        paths=len(records),
        input_violations=violations,
        max_input=float(max((u.max(initial=0.0) for u in u_abs), default=0.0)),
        records=list(records),
    )


def run_batch(builder, sim, keep_records=True):
    """Simulate ``sim.paths`` independent paths and aggregate per-step statistics.

    Path ``k`` draws its noise from streams keyed by ``(master_seed, k)``, so
    results do not depend on ``workers``.  A failed path raises
    :class:`SolveFailed` carrying its index.
    """
    jobs = [(builder, sim, k) for k in range(sim.paths)]
    if sim.workers > 1:
        with ProcessPoolExecutor(sim.workers) as pool:
            records = list(pool.map(_run_path, jobs))
    else:
        records = [_run_path(j) for j in jobs]
    stats = batch_statistics(records, builder.horizon.u_max)
    stab = builder.stability
    solves = sum(len(r.solve_status) for r in records)
    stats.summary = {
        "paths": sim.paths,
        "t_end": sim.t_end,
        "master_seed": sim.master_seed,
        "config_hash": sim.digest(),
        "lambda_key": sim.lambda_key,
        "u_max": builder.horizon.u_max,
        "zeta": None if stab is None else stab.zeta,
        "u_max_star": None if stab is None else stab.u_max_star,
        "solves": solves,
        "infeasible_solves": 0,
        "drift_active_solves": int(sum(r.drift_active.sum() for r in records)),
        "input_violations": stats.input_violations,
        "max_abs_input": stats.max_input,
    }
    if not keep_records:
        stats.records = []
    return stats


# --- statistics ------------------------------------------------------------

def mean_square_slope(records, t_from, t_to):
    """Least-squares slope of ``|x_t|^2`` over ``[t_from, t_to]``.

    Returns ``(slope, standard_error)``: the slope of the batch mean equals
    the mean of the per-path slopes, whose spread gives the error.
    """
    t = np.arange(t_from, t_to + 1)
    sq = np.array([r.norm_x[t_from:t_to + 1] ** 2 for r in records])
    tc = t - t.mean()
    slopes = sq @ tc / (tc @ tc)
    se = slopes.std(ddof=1) / math.sqrt(len(slopes)) if len(slopes) > 1 else float("inf")
    return float(slopes.mean()), float(se)


def conditional_drift(records, kappa, threshold, stride=None, t_from=0):
    """Mean change of ``|xhat2|`` over ``kappa`` steps from times where it exceeds ``threshold``.

    Start times are multiples of ``stride`` (default ``kappa``).  Changes are
    averaged within each path first and the standard error is taken across
    paths, which keeps within-path dependence out of the error estimate.
    Returns ``(mean, standard_error, n_pairs)``.
    """
    stride = stride or kappa
    per_path, n_pairs = [], 0
    for r in records:
        nx2 = r.norm_xhat2
        starts = np.arange(-(-t_from // stride) * stride, len(nx2) - kappa, stride)
        starts = starts[nx2[starts] > threshold]
        if starts.size:
            per_path.append(float(np.mean(nx2[starts + kappa] - nx2[starts])))
            n_pairs += starts.size
    if not per_path:
        return float("nan"), float("nan"), 0
    d = np.array(per_path)
    se = d.std(ddof=1) / math.sqrt(d.size) if d.size > 1 else float("inf")
    return float(d.mean()), float(se), n_pairs
