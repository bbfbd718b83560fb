"""Problem files, experiment configs and an estimator-style front end."""
import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator

from .controller import SimulationConfig, run_batch, run_receding_horizon
from .estimator import covariance_bounds, riccati_limit
from .exceptions import NotObservable, NotStabilizable, SRHCError
from .lambdas import (DEFAULT_SAMPLES, SaturationFunction, estimate_lambdas,
                      lambda_cache_get_or_compute)
from .optimizer import (DEFAULT_TOL, ProgramBuilder, SoftConstraintSpec,
                        compute_alpha_beta_star, solve, bisect_soft_levels)
from .stability import DEFAULT_EPSILON, sigma_min_reachability, stability_params
from .sysmodel import (CostWeights, HorizonConfig, JordanSplit, SystemModel, build_lifted,
                       check_lyapunov_stable, is_observable, is_stabilizable,
                       validate_model, validate_split)
from .validation import check_spd

CONFIG_VERSION = 1


@dataclass(frozen=True, eq=False)
class ControlProblem:
    model: SystemModel
    split: JordanSplit
    horizon: HorizonConfig
    weights: CostWeights
    sat: SaturationFunction = None


def _per_step(blocks, N, name):
    blocks = [np.asarray(b, dtype=float) for b in blocks]
    if len(blocks) == 1:
        return blocks * N
    if len(blocks) != N:
        raise ValueError(f"weights.{name} lists {len(blocks)} blocks for N={N}")
    return blocks


def problem_from_dict(d):
    """Build a :class:`ControlProblem` from the model-file dictionary."""
    n = np.atleast_2d(np.asarray(d["A"], dtype=float)).shape[0]
    model = SystemModel(
        d["A"], d["B"], d["C"], d["sigma_w"], d["sigma_v"],
        d.get("sigma_x0", np.zeros((n, n))), d.get("xhat0"))
    split = d.get("split", {"n1": n, "n2": 0})
    split = JordanSplit.from_model(model, int(split["n1"]), int(split.get("n2", n - split["n1"])),
                                   split.get("kappa"))
    h = d["horizon"]
    horizon = HorizonConfig(int(h["N"]), int(h.get("Nc", h["N"])), float(h["u_max"]),
                            float(h.get("phi_max", 1.0)))
    w = d.get("weights", {})
    N = horizon.N
    Wx = _per_step(w.get("Wx", [np.eye(n)]), N, "Wx")
    Wu = _per_step(w.get("Wu", [np.eye(model.m)]), N, "Wu")
    weights = CostWeights(Wx, np.asarray(w.get("WxN", Wx[-1]), dtype=float), Wu)
    sat = d.get("saturation")
    sat = SaturationFunction.from_dict(sat) if sat else SaturationFunction("clip", horizon.phi_max)
    if sat.phi_max != horizon.phi_max:
        raise ValueError("saturation.phi_max differs from horizon.phi_max")
    return ControlProblem(model, split, horizon, weights, sat)


def load_problem(path):
    with open(path) as fh:
        return problem_from_dict(json.load(fh))


def load_soft_spec(source, problem):
    """Soft-constraint spec from a path or an already parsed dictionary."""
    if source is None:
        return None
    if not isinstance(source, dict):
        with open(source) as fh:
            source = json.load(fh)
    m = problem.model
    return SoftConstraintSpec.from_dict(source, m.n, m.m, problem.horizon.N)


def load_experiment(path):
    """Read an experiment config; relative file references resolve against its folder."""
    path = Path(path)
    with open(path) as fh:
        cfg = json.load(fh)
    if cfg.get("version") != CONFIG_VERSION:
        raise ValueError(f"unsupported config version {cfg.get('version')!r}")
    base = path.parent
    for key in ("model", "soft"):
        if isinstance(cfg.get(key), str):
            cfg[key] = str((base / cfg[key]).resolve())
    return cfg


def assumption_checks(problem):
    """Individual plant and horizon checks as ``(name, ok, detail, error)`` tuples."""
    m = problem.model
    out = []

    def run(name, fn):
        try:
            detail = fn()
            out.append((name, True, detail or "", None))
        except SRHCError as exc:
            out.append((name, False, f"{type(exc).__name__}: {exc}", exc))

    def covariances():
        check_spd(m.sigma_w, "sigma_w")
        check_spd(m.sigma_v, "sigma_v")
        check_spd(m.sigma_x0, "sigma_x0", semidefinite=True)
    run("noise covariances positive definite", covariances)
    run("A Lyapunov stable", lambda: check_lyapunov_stable(m.A))

    def stabilizable():
        if not is_stabilizable(m.A, m.B):
            raise NotStabilizable("(A, B) fails the PBH test")
    run("(A, B) stabilizable", stabilizable)

    def observable():
        if not is_observable(m.A, m.C):
            raise NotObservable("(A, C) is not observable")
    run("(A, C) observable", observable)

    split = {}

    def do_split():
        split["s"] = validate_split(m, problem.split)
        s = split["s"]
        return f"n1={s.n1}, n2={s.n2}, kappa={s.kappa}"
    run("Jordan split (A1 Schur, A2 orthogonal, kappa)", do_split)
    if "s" in split:
        s = split["s"]
        run("N >= Nc >= kappa, u_max > 0", lambda: problem.horizon.check(s.kappa) and
            f"N={problem.horizon.N}, Nc={problem.horizon.Nc}")
        if s.kappa:
            out.append(("sigma_min(R_kappa)", True, f"{sigma_min_reachability(s):.10g}", None))
    return out


class StochasticRecedingHorizonController(BaseEstimator):
    """Estimator-style wrapper around the offline pipeline and the online solve.

    ``fit(problem)`` validates the plant, solves the Riccati equation, derives
    the stability constants and obtains the expectation matrices (from the
    cache when possible).  ``solve`` returns the optimal policy at an
    estimate, ``predict`` the nominal first input for each row of ``X`` and
    ``simulate`` a closed-loop batch.
    """

    def __init__(self, epsilon=DEFAULT_EPSILON, lambda_samples=DEFAULT_SAMPLES, lambda_seed=0,
                 lambda_cache_dir=None, use_cache=True, tol=DEFAULT_TOL, soft=None,
                 delta_u_max=None, allow_unstable=False):
        self.epsilon = epsilon
        self.lambda_samples = lambda_samples
        self.lambda_seed = lambda_seed
        self.lambda_cache_dir = lambda_cache_dir
        self.use_cache = use_cache
        self.tol = tol
        self.soft = soft
        self.delta_u_max = delta_u_max
        self.allow_unstable = allow_unstable

    def fit(self, problem, y=None, force_lambda=False):
        if isinstance(problem, (str, Path)):
            problem = load_problem(problem)
        model = validate_model(problem.model)
        if not is_observable(model.A, model.C):
            raise NotObservable("(A, C) is not observable")
        split = validate_split(model, problem.split)
        horizon = problem.horizon.check(split.kappa)
        self.problem_ = replace(problem, model=model, split=split)
        self.model_, self.split_, self.horizon_ = model, split, horizon
        self.sat_ = problem.sat or SaturationFunction("clip", horizon.phi_max)
        self.riccati_ = riccati_limit(model)
        self.bounds_ = covariance_bounds(model, riccati=self.riccati_)
        self.stability_ = stability_params(model, split, self.bounds_, self.epsilon)
        self.lifted_ = build_lifted(model, problem.weights, horizon.N)
        P = self.riccati_.P_circ
        if self.use_cache:
            self.lambdas_, self.lambda_key_, self.lambda_cache_hit_ = lambda_cache_get_or_compute(
                model, horizon.N, self.sat_, P, self.lambda_samples, self.lambda_seed,
                self.lambda_cache_dir, force=force_lambda)
        else:
            self.lambdas_ = estimate_lambdas(P, model, horizon.N, self.sat_,
                                             self.lambda_samples, self.lambda_seed)
            self.lambda_key_, self.lambda_cache_hit_ = None, False
        self.soft_spec_ = load_soft_spec(self.soft, problem)
        self.builder_ = ProgramBuilder(model, self.lifted_, self.lambdas_, horizon, split,
                                       self.stability_, self.soft_spec_, self.delta_u_max,
                                       self.sat_)
        return self

    def build_program(self, xhat, P=None, alpha=None, beta=None):
        return self.builder_.build(xhat, P, alpha, beta)

    def solve(self, xhat, P=None, use_soft=None):
        """Optimal policy at the filtered estimate ``xhat``.

        With a soft-constraint spec the levels are bisected starting from the
        always-feasible ones computed at ``(xhat, P)``.
        """
        xhat = np.asarray(xhat, dtype=float).reshape(-1)
        use_soft = self.soft_spec_ is not None if use_soft is None else use_soft
        if not use_soft:
            return solve(self.builder_.build(xhat), self.tol)
        P = self.riccati_.P_circ if P is None else P
        spec = self.soft_spec_
        a, b = compute_alpha_beta_star(xhat, P, self.lifted_, spec, self.horizon_.u_max,
                                       self.model_)
        res = bisect_soft_levels(lambda al, be: self.builder_.build(xhat, P, al, be), a, b,
                          spec.delta, spec.nu_bar, spec.alpha_floor, spec.beta_floor, self.tol)
        res.policy.info.update(alpha=res.alpha, beta=res.beta, bisection_steps=res.iterations)
        return res.policy

    def predict(self, X):
        """Nominal first input ``eta_0`` of the optimal policy for each estimate row."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        m = self.model_.m
        return np.array([self.solve(x).eta[:m] for x in X])

    def simulation_config(self, **kw):
        kw.setdefault("allow_unstable", self.allow_unstable)
        kw.setdefault("tol", self.tol)
        kw.setdefault("lambda_key", self.lambda_key_)
        return SimulationConfig(**kw)

    def simulate(self, sim=None, keep_records=True, **kw):
        sim = sim or self.simulation_config(**kw)
        return run_batch(self.builder_, sim, keep_records)

    def simulate_path(self, sim=None, path=0, **kw):
        sim = sim or self.simulation_config(**kw)
        return run_receding_horizon(self.builder_, sim, path)
