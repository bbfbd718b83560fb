"""Saturation functions and Monte Carlo estimation of the policy expectation matrices.

For a solve-time error covariance ``P`` the saturated residual stack is

    Y - Yhat = Ca Fe e + Ca Fw W + (I - Ca Fv) V,
    e ~ N(0, P),  W ~ N(0, I_N (x) Sigma_w),  V ~ N(0, I_{N+1} (x) Sigma_v),

and the first ``N`` output blocks pass through the elementwise saturator.
The expectation matrices are sample moments of ``phi``, ``phi e^T``,
``W phi^T`` and ``phi phi^T`` over that law.  They do not depend on the
state estimate; the ``phi x^T`` moment is assembled from them on demand.
"""
import datetime
import hashlib
import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .exceptions import CacheCorrupt
from .validation import array_digest, psd_sqrt, symmetrize

log = logging.getLogger(__name__)

DEFAULT_SAMPLES = 100_000
SHARD_SIZE = 25_000
CACHE_ENV = "SRHC_CACHE_DIR"


@dataclass(frozen=True, eq=False)
class SaturationFunction:
    """Elementwise bounded map ``|phi(s)| <= phi_max``.

    kind:
        ``"clip"``              clip to ``[-phi_max, phi_max]``
        ``"sigmoid"``           ``phi_max * tanh(s / scale)``
        ``"piecewise_linear"``  linear interpolation through ``knots`` (pairs
                                ``(s, value)``), constant beyond the end knots
    """
    kind: str = "clip"
    phi_max: float = 1.0
    scale: float = 1.0
    knots: tuple = None

    def __post_init__(self):
        if self.phi_max <= 0:
            raise ValueError("phi_max must be positive")
        if self.kind == "piecewise_linear":
            if not self.knots or len(self.knots) < 2:
                raise ValueError("piecewise_linear needs at least two knots")
            xs = np.array([k[0] for k in self.knots], dtype=float)
            ys = np.array([k[1] for k in self.knots], dtype=float)
            if np.any(np.diff(xs) <= 0):
                raise ValueError("knot abscissae must be strictly increasing")
            if np.abs(ys).max() > self.phi_max:
                raise ValueError("knot values exceed phi_max")
            object.__setattr__(self, "knots", tuple(zip(xs.tolist(), ys.tolist())))
        elif self.kind == "sigmoid":
            if self.scale <= 0:
                raise ValueError("sigmoid scale must be positive")
        elif self.kind != "clip":
            raise ValueError(f"unknown saturation kind {self.kind!r}")

    def __call__(self, s):
        s = np.asarray(s, dtype=float)
        if self.kind == "clip":
            return np.clip(s, -self.phi_max, self.phi_max)
        if self.kind == "sigmoid":
            return self.phi_max * np.tanh(s / self.scale)
        xs, ys = np.array(self.knots).T
        return np.interp(s, xs, ys)

    def limits(self):
        """Values at ``-inf`` and ``+inf``."""
        if self.kind == "clip":
            return -self.phi_max, self.phi_max
        if self.kind == "sigmoid":
            return -self.phi_max, self.phi_max
        return self.knots[0][1], self.knots[-1][1]

    def certify_bound(self, n_grid=2_000_001, span=1e6):
        """Check ``|phi| <= phi_max`` on a dense grid over ``[-span, span]``
        (plus the knots and the limits)."""
        grid = np.concatenate([np.linspace(-span, span, n_grid),
                               np.linspace(-10, 10, 200_001)])
        if self.kind == "piecewise_linear":
            grid = np.concatenate([grid, [k[0] for k in self.knots]])
        vals = np.concatenate([self(grid), self.limits()])
        return bool(np.all(np.abs(vals) <= self.phi_max))

    def to_dict(self):
        d = {"kind": self.kind, "phi_max": float(self.phi_max)}
        if self.kind == "sigmoid":
            d["scale"] = float(self.scale)
        if self.kind == "piecewise_linear":
            d["knots"] = [list(k) for k in self.knots]
        return d

    @classmethod
    def from_dict(cls, d):
        knots = d.get("knots")
        return cls(d.get("kind", "clip"), float(d.get("phi_max", 1.0)),
                   float(d.get("scale", 1.0)),
                   None if knots is None else tuple(map(tuple, knots)))


@dataclass(frozen=True, eq=False)
class InnovationBatch:
    e: np.ndarray        # count x n
    W: np.ndarray        # count x Nn
    V: np.ndarray        # count x (N+1)p
    resid: np.ndarray    # count x (N+1)p, unsaturated Y - Yhat
    phi: np.ndarray      # count x Np, saturated first N blocks


@dataclass(frozen=True, eq=False)
class LambdaSet:
    lambda_phi: np.ndarray
    lambda_phi_e: np.ndarray
    lambda_w_phi: np.ndarray
    lambda_phi_phi: np.ndarray
    P_used: np.ndarray
    sample_count: int
    seed: int
    se_phi: np.ndarray = None
    se_phi_e: np.ndarray = None
    se_w_phi: np.ndarray = None
    se_phi_phi: np.ndarray = None

    def lambda_phi_x(self, xhat):
        return assemble_lambda_phi_x(self, xhat)

    _ARRAYS = ("lambda_phi", "lambda_phi_e", "lambda_w_phi", "lambda_phi_phi",
               "P_used", "se_phi", "se_phi_e", "se_w_phi", "se_phi_phi")


def assemble_lambda_phi_x(lset, xhat):
    """``E[phi x^T] = Lambda^{phi e} + Lambda^phi xhat^T``."""
    xhat = np.asarray(xhat, dtype=float).reshape(-1)
    return lset.lambda_phi_e + np.outer(lset.lambda_phi, xhat)


def _draw(rng, count, P_sqrt, Sw_sqrt, Sv_sqrt, N):
    n = P_sqrt.shape[0]
    p = Sv_sqrt.shape[0]
    e = rng.standard_normal((count, n)) @ P_sqrt
    W = (rng.standard_normal((count, N, n)) @ Sw_sqrt).reshape(count, N * n)
    V = (rng.standard_normal((count, N + 1, p)) @ Sv_sqrt).reshape(count, (N + 1) * p)
    return e, W, V


def _shards(count, seed):
    sizes = [SHARD_SIZE] * (count // SHARD_SIZE)
    if count % SHARD_SIZE:
        sizes.append(count % SHARD_SIZE)
    children = np.random.SeedSequence(seed).spawn(len(sizes))
    return list(zip(sizes, children))


def _residual_maps(error_lift, model, N):
    Ca = np.kron(np.eye(N + 1), model.C)
    Ge = Ca @ error_lift.Fe
    Gw = Ca @ error_lift.Fw
    Gv = np.eye((N + 1) * model.p) - Ca @ error_lift.Fv
    return Ge, Gw, Gv


def sample_innovation_batch(P, error_lift, model, N, count, seed, sat=None):
    """Draw ``count`` seeded samples of ``(e, W, V)`` and the residual stack.

    Samples are generated in fixed-size shards whose generators derive from
    ``seed``; the stream is therefore reproducible bit for bit.
    """
    sat = sat or SaturationFunction()
    P_sqrt = psd_sqrt(P)
    Sw_sqrt = psd_sqrt(model.sigma_w)
    Sv_sqrt = psd_sqrt(model.sigma_v)
    Ge, Gw, Gv = _residual_maps(error_lift, model, N)
    parts = []
    for size, child in _shards(count, seed):
        rng = np.random.Generator(np.random.PCG64(child))
        parts.append(_draw(rng, size, P_sqrt, Sw_sqrt, Sv_sqrt, N))
    e, W, V = (np.concatenate(x) for x in zip(*parts))
    resid = e @ Ge.T + W @ Gw.T + V @ Gv.T
    return InnovationBatch(e, W, V, resid, sat(resid[:, :N * model.p]))


def estimate_lambdas(P, model, N, sat=None, count=DEFAULT_SAMPLES, seed=0, error_lift=None):
    """Monte Carlo estimate of the expectation matrices at error covariance ``P``.

    The error lift defaults to the one frozen at the steady-state gain.
    Sums are accumulated shard by shard in a fixed order, so the result
    depends only on ``(P, model, N, sat, count, seed)``.
    """
    from .estimator import frozen_error_lift, riccati_limit

    if count < 1:
        raise ValueError("count must be >= 1")
    sat = sat or SaturationFunction()
    if error_lift is None:
        error_lift = frozen_error_lift(model, riccati_limit(model).P_star, N)
    n, p = model.n, model.p
    Np = N * p
    P_sqrt = psd_sqrt(P)
    Sw_sqrt = psd_sqrt(model.sigma_w)
    Sv_sqrt = psd_sqrt(model.sigma_v)
    Ge, Gw, Gv = _residual_maps(error_lift, model, N)
    Ge, Gw, Gv = Ge[:Np], Gw[:Np], Gv[:Np]

    s1 = np.zeros(Np)
    s_pe = np.zeros((Np, n))
    s_wp = np.zeros((N * n, Np))
    s_pp = np.zeros((Np, Np))
    # second moments of the per-sample products, for standard errors
    q1 = np.zeros(Np)
    q_pe = np.zeros((Np, n))
    q_wp = np.zeros((N * n, Np))
    q_pp = np.zeros((Np, Np))
    for size, child in _shards(count, seed):
        rng = np.random.Generator(np.random.PCG64(child))
        e, W, V = _draw(rng, size, P_sqrt, Sw_sqrt, Sv_sqrt, N)
        phi = sat(e @ Ge.T + W @ Gw.T + V @ Gv.T)
        s1 += phi.sum(0)
        s_pe += phi.T @ e
        s_wp += W.T @ phi
        s_pp += phi.T @ phi
        q1 += (phi ** 2).sum(0)
        q_pe += (phi ** 2).T @ (e ** 2)
        q_wp += (W ** 2).T @ (phi ** 2)
        q_pp += (phi ** 2).T @ (phi ** 2)

    def se(s, q):
        mean = s / count
        var = np.clip(q / count - mean ** 2, 0.0, None)
        return np.sqrt(var / max(count - 1, 1))

    return LambdaSet(
        lambda_phi=s1 / count,
        lambda_phi_e=s_pe / count,
        lambda_w_phi=s_wp / count,
        lambda_phi_phi=symmetrize(s_pp / count),
        P_used=np.array(P, dtype=float),
        sample_count=int(count),
        seed=int(seed),
        se_phi=se(s1, q1),
        se_phi_e=se(s_pe, q_pe),
        se_w_phi=se(s_wp, q_wp),
        se_phi_phi=se(s_pp, q_pp),
    )


# --- persistent cache -----------------------------------------------------

def cache_key(model, N, sat, P, count, seed):
    fields = {
        "model": model.fingerprint(),
        "N": int(N),
        "sat": sat.to_dict(),
        "P": array_digest(P),
        "count": int(count),
        "seed": int(seed),
    }
    blob = json.dumps(fields, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest(), fields


def default_cache_dir():
    return Path(os.environ.get(CACHE_ENV, Path.home() / ".cache" / "srhc"))


def _paths(store, key):
    d = Path(store) / "lambda"
    return d / f"{key}.bin", d / f"{key}.json"


def save_lambda_set(lset, store, key, key_fields):
    bin_path, meta_path = _paths(store, key)
    bin_path.parent.mkdir(parents=True, exist_ok=True)
    arrays = {name: np.ascontiguousarray(getattr(lset, name), dtype="<f8")
              for name in LambdaSet._ARRAYS if getattr(lset, name) is not None}
    payload = b"".join(a.tobytes() for a in arrays.values())
    meta = {
        "key": key,
        "key_fields": key_fields,
        "sample_count": lset.sample_count,
        "seed": lset.seed,
        "created": datetime.datetime.now(datetime.timezone.utc).isoformat(),
        "layout": [[name, list(a.shape)] for name, a in arrays.items()],
        "dtype": "<f8",
        "sha256": hashlib.sha256(payload).hexdigest(),
    }
    tmp = bin_path.with_suffix(".bin.tmp")
    tmp.write_bytes(payload)
    os.replace(tmp, bin_path)
    meta_path.write_text(json.dumps(meta, indent=2))
    return bin_path


def load_lambda_set(store, key):
    """Load a cached entry; ``None`` when absent, :class:`CacheCorrupt` on mismatch."""
    bin_path, meta_path = _paths(store, key)
    if not (bin_path.exists() and meta_path.exists()):
        return None
    try:
        meta = json.loads(meta_path.read_text())
        payload = bin_path.read_bytes()
    except (OSError, ValueError) as exc:
        raise CacheCorrupt(f"unreadable cache entry {key}: {exc}") from exc
    if meta.get("key") != key or hashlib.sha256(payload).hexdigest() != meta.get("sha256"):
        raise CacheCorrupt(f"hash mismatch for cache entry {key}")
    arrays = {}
    offset = 0
    for name, shape in meta["layout"]:
        size = int(np.prod(shape)) * 8
        arrays[name] = np.frombuffer(payload, dtype="<f8", count=int(np.prod(shape)),
                                     offset=offset).reshape(shape).copy()
        offset += size
    if offset != len(payload):
        raise CacheCorrupt(f"payload size mismatch for cache entry {key}")
    return LambdaSet(sample_count=int(meta["sample_count"]), seed=int(meta["seed"]), **arrays)


def lambda_cache_get_or_compute(model, N, sat, P, count, seed, store=None,
                                error_lift=None, force=False):
    """Return ``(LambdaSet, key, hit)``; computes and persists on a miss.

    A corrupt entry is logged, recomputed and overwritten.
    """
    store = default_cache_dir() if store is None else Path(store)
    key, fields = cache_key(model, N, sat, P, count, seed)
    if not force:
        try:
            lset = load_lambda_set(store, key)
        except CacheCorrupt as exc:
            log.warning("%s; recomputing", exc)
            lset = None
        if lset is not None:
            return lset, key, True
    lset = estimate_lambdas(P, model, N, sat, count, seed, error_lift=error_lift)
    save_lambda_set(lset, store, key, fields)
    return lset, key, False
