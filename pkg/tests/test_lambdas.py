import json
import logging
import math

import numpy as np
import pytest
from scipy.stats import norm

from srhc.estimator import frozen_error_lift, riccati_limit
from srhc.lambdas import (SaturationFunction, cache_key, estimate_lambdas,
                          lambda_cache_get_or_compute, load_lambda_set, sample_innovation_batch,
                          save_lambda_set)
from srhc.exceptions import CacheCorrupt
from srhc.sysmodel import SystemModel


def scalar_model(sw=1.0, sv=1.0):
    return SystemModel([[0.5]], [[1.0]], [[1.0]], [[sw]], [[sv]], [[1.0]])


# --- saturation functions -----------------------------------------------------

def test_clip_values():
    sat = SaturationFunction("clip", 2.0)
    np.testing.assert_array_equal(sat([-5, -1, 0, 1.5, 3]), [-2, -1, 0, 1.5, 2])


def test_sigmoid_and_piecewise_linear():
    sig = SaturationFunction("sigmoid", 1.5, scale=2.0)
    assert math.isclose(float(sig(2.0)), 1.5 * math.tanh(1.0))
    pl = SaturationFunction("piecewise_linear", 1.0, knots=((-1, -1), (0, 0.2), (1, 1)))
    np.testing.assert_allclose(pl([-3, -0.5, 0.5, 4]), [-1, -0.4, 0.6, 1])
    assert pl.limits() == (-1.0, 1.0)


@pytest.mark.parametrize("kw", [
    dict(kind="clip", phi_max=0.0),
    dict(kind="sigmoid", scale=-1.0),
    dict(kind="piecewise_linear", knots=((0, 0),)),
    dict(kind="piecewise_linear", knots=((1, 0), (0, 0))),
    dict(kind="piecewise_linear", knots=((0, 0), (1, 2))),
    dict(kind="bogus"),
])
def test_invalid_saturation(kw):
    with pytest.raises(ValueError):
        SaturationFunction(**kw)


@pytest.mark.parametrize("sat", [SaturationFunction("clip", 1.0),
                                 SaturationFunction("sigmoid", 2.0, 0.3),
                                 SaturationFunction("piecewise_linear", 1.0,
                                                    knots=((-2, -1), (2, 1)))])
def test_bound_certificate_and_round_trip(sat):
    assert sat.certify_bound(n_grid=20_001)
    again = SaturationFunction.from_dict(json.loads(json.dumps(sat.to_dict())))
    s = np.linspace(-5, 5, 101)
    np.testing.assert_array_equal(again(s), sat(s))


# --- estimates against closed forms -----------------------------------------------

def test_scalar_moments_match_closed_form():
    """With N = 1 the first residual block is e + v_0, so clip moments are Gaussian integrals."""
    m = scalar_model(sw=2.0, sv=0.7)
    P = np.array([[1.3]])
    ls = estimate_lambdas(P, m, 1, count=1_000_000, seed=3)
    s2 = 1.3 + 0.7
    a = 1.0 / math.sqrt(s2)
    inside = 2 * norm.cdf(a) - 1
    e_phi_s = s2 * inside
    e_phi_e = 1.3 / s2 * e_phi_s
    e_phi2 = s2 * (inside - 2 * a * norm.pdf(a)) + (1 - inside)
    assert abs(ls.lambda_phi[0]) <= 4 * ls.se_phi[0]
    assert abs(ls.lambda_phi_e[0, 0] - e_phi_e) <= 4 * ls.se_phi_e[0, 0]
    assert abs(ls.lambda_phi_phi[0, 0] - e_phi2) <= 4 * ls.se_phi_phi[0, 0]
    assert abs(ls.lambda_phi_e[0, 0] - e_phi_e) <= 0.01 * e_phi_e
    assert abs(ls.lambda_phi_phi[0, 0] - e_phi2) <= 0.01 * e_phi2
    # process noise enters only after the first residual
    assert abs(ls.lambda_w_phi[0, 0]) <= 4 * ls.se_w_phi[0, 0]


def test_zero_error_covariance():
    ls = estimate_lambdas(np.zeros((1, 1)), scalar_model(), 2, count=5_000, seed=0)
    assert not ls.lambda_phi_e.any()


def test_shapes_and_symmetry(demo):
    ls = demo.lambdas_
    N, n, p = 5, 3, 3
    assert ls.lambda_phi.shape == (N * p,)
    assert ls.lambda_phi_e.shape == (N * p, n)
    assert ls.lambda_w_phi.shape == (N * n, N * p)
    assert ls.lambda_phi_phi.shape == (N * p, N * p)
    np.testing.assert_array_equal(ls.lambda_phi_phi, ls.lambda_phi_phi.T)
    assert np.linalg.eigvalsh(ls.lambda_phi_phi).min() >= -1e-12
    np.testing.assert_allclose(ls.lambda_phi_x([1.0, 2.0, 3.0]),
                               ls.lambda_phi_e + np.outer(ls.lambda_phi, [1, 2, 3]))


def test_determinism_and_seed_dependence():
    m = scalar_model()
    a = estimate_lambdas(np.eye(1), m, 3, count=30_000, seed=7)
    b = estimate_lambdas(np.eye(1), m, 3, count=30_000, seed=7)
    c = estimate_lambdas(np.eye(1), m, 3, count=30_000, seed=8)
    for name in ("lambda_phi", "lambda_phi_e", "lambda_w_phi", "lambda_phi_phi"):
        np.testing.assert_array_equal(getattr(a, name), getattr(b, name))
    assert not np.array_equal(a.lambda_phi_phi, c.lambda_phi_phi)


def test_standard_error_scales_with_sample_count():
    m = scalar_model()
    small = estimate_lambdas(np.eye(1), m, 2, count=20_000, seed=1)
    big = estimate_lambdas(np.eye(1), m, 2, count=80_000, seed=1)
    ratio = big.se_phi_phi / small.se_phi_phi
    np.testing.assert_allclose(ratio, 0.5, rtol=0.1)


def test_estimates_agree_with_joint_samples():
    """Independent joint simulation of (e, W, V) through the residual stack."""
    m = SystemModel([[0.8, 0.1], [0.0, 0.6]], np.eye(2), [[1.0, 0.5]], np.diag([0.5, 1.0]),
                    [[0.4]], np.eye(2))
    N = 3
    P_star = riccati_limit(m).P_star
    P = riccati_limit(m).P_circ
    ls = estimate_lambdas(P, m, N, count=200_000, seed=11)
    rng = np.random.default_rng(99)
    K = P_star @ m.C.T @ np.linalg.inv(m.C @ P_star @ m.C.T + m.sigma_v)
    G = np.eye(2) - K @ m.C
    count = 200_000
    e = rng.multivariate_normal(np.zeros(2), P, count)
    W = rng.multivariate_normal(np.zeros(2), m.sigma_w, (count, N))
    V = rng.normal(0, math.sqrt(0.4), (count, N + 1, 1))
    err = e
    phis = []
    for i in range(N):
        phis.append(np.clip(err @ m.C.T + V[:, i], -1, 1))
        err = err @ (G @ m.A).T + W[:, i] @ G.T - V[:, i + 1] @ K.T
    phi = np.concatenate(phis, axis=1)
    ref_pp = phi.T @ phi / count
    ref_pe = phi.T @ e / count
    tol_pp = 5 * np.hypot(ls.se_phi_phi, ls.se_phi_phi)
    tol_pe = 5 * np.hypot(ls.se_phi_e, ls.se_phi_e)
    assert np.all(np.abs(ls.lambda_phi_phi - ref_pp) <= tol_pp + 1e-12)
    assert np.all(np.abs(ls.lambda_phi_e - ref_pe) <= tol_pe + 1e-12)


def test_batch_reproduces_estimate():
    m = scalar_model()
    lift = frozen_error_lift(m, riccati_limit(m).P_star, 2)
    batch = sample_innovation_batch(np.eye(1), lift, m, 2, 30_000, 5)
    ls = estimate_lambdas(np.eye(1), m, 2, count=30_000, seed=5, error_lift=lift)
    np.testing.assert_allclose(batch.phi.T @ batch.phi / 30_000, ls.lambda_phi_phi, atol=1e-14)
    np.testing.assert_allclose(batch.W.T @ batch.phi / 30_000, ls.lambda_w_phi, atol=1e-14)


# --- cache ---------------------------------------------------------------------------

def test_cache_round_trip(tmp_path):
    m = scalar_model()
    sat = SaturationFunction()
    ls, key, hit = lambda_cache_get_or_compute(m, 2, sat, np.eye(1), 5_000, 0, tmp_path)
    assert not hit
    again, key2, hit2 = lambda_cache_get_or_compute(m, 2, sat, np.eye(1), 5_000, 0, tmp_path)
    assert hit2 and key2 == key
    for name in ls._ARRAYS:
        np.testing.assert_array_equal(getattr(ls, name), getattr(again, name))
    meta = json.loads((tmp_path / "lambda" / f"{key}.json").read_text())
    assert meta["sample_count"] == 5_000 and meta["key_fields"]["seed"] == 0


def test_cache_key_tracks_inputs():
    m = scalar_model()
    sat = SaturationFunction()
    base = cache_key(m, 2, sat, np.eye(1), 100, 0)[0]
    assert cache_key(m, 2, sat, np.eye(1), 100, 1)[0] != base
    assert cache_key(m, 2, sat, 1.0001 * np.eye(1), 100, 0)[0] != base
    assert cache_key(m, 3, sat, np.eye(1), 100, 0)[0] != base
    assert cache_key(m, 2, SaturationFunction("sigmoid"), np.eye(1), 100, 0)[0] != base
    assert cache_key(scalar_model(sw=2.0), 2, sat, np.eye(1), 100, 0)[0] != base


def test_force_recomputes(tmp_path):
    m = scalar_model()
    lambda_cache_get_or_compute(m, 1, SaturationFunction(), np.eye(1), 1_000, 0, tmp_path)
    _, _, hit = lambda_cache_get_or_compute(m, 1, SaturationFunction(), np.eye(1), 1_000, 0,
                                            tmp_path, force=True)
    assert not hit


def test_corrupt_entry_detected_and_recomputed(tmp_path, caplog):
    m = scalar_model()
    sat = SaturationFunction()
    ls, key, _ = lambda_cache_get_or_compute(m, 1, sat, np.eye(1), 1_000, 0, tmp_path)
    path = tmp_path / "lambda" / f"{key}.bin"
    raw = bytearray(path.read_bytes())
    raw[3] ^= 0xFF
    path.write_bytes(bytes(raw))
    with pytest.raises(CacheCorrupt):
        load_lambda_set(tmp_path, key)
    with caplog.at_level(logging.WARNING):
        again, _, hit = lambda_cache_get_or_compute(m, 1, sat, np.eye(1), 1_000, 0, tmp_path)
    assert not hit and "recomputing" in caplog.text
    np.testing.assert_array_equal(again.lambda_phi_phi, ls.lambda_phi_phi)
    assert load_lambda_set(tmp_path, key) is not None


def test_missing_entry_is_none(tmp_path):
    assert load_lambda_set(tmp_path, "0" * 64) is None


def test_save_then_load(tmp_path):
    ls = estimate_lambdas(np.eye(1), scalar_model(), 1, count=500, seed=0)
    save_lambda_set(ls, tmp_path, "k", {})
    back = load_lambda_set(tmp_path, "k")
    np.testing.assert_array_equal(back.P_used, ls.P_used)
    assert back.seed == 0 and back.sample_count == 500
