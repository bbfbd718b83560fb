import numpy as np
import pytest
from conftest import demo_model
from hypothesis import given, settings
from hypothesis import strategies as st

from srhc.exceptions import (DimensionMismatch, InvalidHorizon, KappaMismatch, NotBlockDiagonal,
                             NotLyapunovStable, NotOrthogonal, NotPositiveDefinite, NotReachable,
                             NotSchur, NotStabilizable)
from srhc.sysmodel import (CostWeights, HorizonConfig, JordanSplit, SystemModel, ValidatedModel,
                           build_lifted, compute_kappa, reachability_matrix, settling_index,
                           validate_model, validate_split)

ROT = np.array([[0.0, -1.0], [1.0, 0.0]])


def scalar(A, B, **kw):
    return SystemModel(A, B, [[1.0]], [[1.0]], [[1.0]], [[1.0]], **kw)


# --- validate_model ----------------------------------------------------------

def test_demo_model_is_valid():
    vm = validate_model(demo_model())
    assert isinstance(vm, ValidatedModel)
    assert (vm.n, vm.m, vm.p) == (3, 1, 3)
    assert validate_model(vm) is vm


def test_unreachable_unit_eigenvalue_is_not_stabilizable():
    with pytest.raises(NotStabilizable):
        validate_model(scalar([[1.0]], [[0.0]]))


def test_defective_unit_eigenvalue_is_not_lyapunov_stable():
    m = SystemModel([[1, 1], [0, 1]], np.eye(2), np.eye(2), np.eye(2), np.eye(2), np.eye(2))
    with pytest.raises(NotLyapunovStable):
        validate_model(m)


def test_unstable_eigenvalue_rejected():
    with pytest.raises(NotLyapunovStable):
        validate_model(scalar([[1.01]], [[1.0]]))


def test_repeated_semisimple_unit_eigenvalue_accepted():
    m = SystemModel(np.eye(2), np.eye(2), np.eye(2), np.eye(2), np.eye(2), np.eye(2))
    validate_model(m)


@pytest.mark.parametrize("field,value,which", [
    ("sigma_w", -np.eye(3), "sigma_w"),
    ("sigma_v", np.zeros((3, 3)), "sigma_v"),
    ("sigma_x0", -np.eye(3), "sigma_x0"),
    ("sigma_w", [[1, 2, 0], [0, 1, 0], [0, 0, 1]], "sigma_w"),
])
def test_covariance_checks(field, value, which):
    with pytest.raises(NotPositiveDefinite) as exc:
        validate_model(demo_model(**{field: value}))
    assert exc.value.which == which


def test_semidefinite_initial_covariance_allowed():
    validate_model(demo_model(sigma_x0=np.zeros((3, 3))))


@pytest.mark.parametrize("over", [
    {"B": np.ones((2, 1))}, {"C": np.ones((3, 2))}, {"sigma_v": np.eye(2)},
    {"xhat0": [0.0, 1.0]}, {"A": np.ones((3, 2))},
])
def test_dimension_mismatch(over):
    with pytest.raises(DimensionMismatch):
        demo_model(**over)


def test_model_arrays_are_read_only():
    m = demo_model()
    with pytest.raises(ValueError):
        m.A[0, 0] = 2.0


def test_fingerprint_tracks_content():
    assert demo_model().fingerprint() == demo_model().fingerprint()
    assert demo_model().fingerprint() != demo_model(sigma_w=11 * np.eye(3)).fingerprint()


# --- split ---------------------------------------------------------------------

def test_demo_split():
    m = validate_model(demo_model())
    s = validate_split(m, JordanSplit.from_model(m, 1))
    assert s.kappa == 2
    np.testing.assert_array_equal(s.A1, [[0.5]])
    np.testing.assert_array_equal(s.A2, ROT)
    np.testing.assert_array_equal(s.B2, [[0.0], [1.0]])


def test_schur_only_split_has_kappa_zero():
    m = validate_model(SystemModel(np.diag([0.5, -0.3]), np.eye(2), np.eye(2), np.eye(2),
                                   np.eye(2), np.eye(2)))
    s = validate_split(m, JordanSplit.from_model(m, 2))
    assert (s.n2, s.kappa) == (0, 0)


def test_non_orthogonal_block():
    m = SystemModel(np.diag([0.9, 1.0]), np.eye(2), np.eye(2), np.eye(2), np.eye(2), np.eye(2))
    with pytest.raises(NotOrthogonal):
        validate_split(m, JordanSplit.from_model(m, 0))


def test_non_schur_block():
    m = SystemModel(np.diag([1.0, 1.0]), np.eye(2), np.eye(2), np.eye(2), np.eye(2), np.eye(2))
    with pytest.raises(NotSchur):
        validate_split(m, JordanSplit.from_model(m, 1))


def test_declared_kappa_must_match():
    m = validate_model(demo_model())
    with pytest.raises(KappaMismatch):
        validate_split(m, JordanSplit.from_model(m, 1, kappa=1))


def test_split_must_be_block_diagonal():
    A = np.array([[0.5, 0.1, 0], [0, 0, -1], [0, 1, 0]])
    with pytest.raises(NotBlockDiagonal):
        JordanSplit.from_model(demo_model(A=A), 1)


def test_split_must_partition_state():
    with pytest.raises(DimensionMismatch):
        JordanSplit.from_model(demo_model(), 1, 1)


# --- reachability and kappa ----------------------------------------------------

def test_reachability_demo_pair():
    np.testing.assert_array_equal(reachability_matrix(ROT, [[0], [1]], 2), [[-1, 0], [0, 1]])


def test_reachability_one_step_is_B():
    B = np.array([[1.0], [2.0]])
    np.testing.assert_array_equal(reachability_matrix(ROT, B, 1), B)


def test_reachability_nilpotent_collapse():
    B = np.array([[1.0], [2.0]])
    R = reachability_matrix(np.zeros((2, 2)), B, 3)
    np.testing.assert_array_equal(R, np.hstack([np.zeros((2, 2)), B]))


def test_reachability_rejects_zero_steps():
    with pytest.raises(ValueError):
        reachability_matrix(ROT, [[0], [1]], 0)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 4), st.integers(1, 3), st.integers(1, 5), st.integers(0, 2 ** 31 - 1))
def test_reachability_column_blocks(n, m, k, seed):
    rng = np.random.default_rng(seed)
    A, B = rng.standard_normal((n, n)), rng.standard_normal((n, m))
    R = reachability_matrix(A, B, k)
    for j in range(1, k + 1):
        np.testing.assert_allclose(R[:, (j - 1) * m:j * m],
                                   np.linalg.matrix_power(A, k - j) @ B, atol=1e-12)


@pytest.mark.parametrize("A2,B2,kappa", [
    (ROT, [[0], [1]], 2),
    ([[1.0]], [[1.0]], 1),
    (ROT, np.eye(2), 1),
])
def test_compute_kappa(A2, B2, kappa):
    assert compute_kappa(np.array(A2, float), np.array(B2, float)) == kappa


def test_kappa_is_minimal():
    B2 = np.array([[0.0], [1.0]])
    k = compute_kappa(ROT, B2)
    assert np.linalg.matrix_rank(reachability_matrix(ROT, B2, k - 1)) < 2


def test_unreachable_pair():
    with pytest.raises(NotReachable):
        compute_kappa(np.eye(2), np.array([[1.0], [1.0]]))


# --- horizon and weights ---------------------------------------------------------

@pytest.mark.parametrize("N,Nc,u,phi", [(5, 1, 1.0, 1.0), (2, 3, 1.0, 1.0), (5, 2, 0.0, 1.0),
                                        (5, 2, 1.0, -1.0)])
def test_invalid_horizon(N, Nc, u, phi):
    with pytest.raises(InvalidHorizon):
        HorizonConfig(N, Nc, u, phi).check(2)


def test_weights_must_be_positive_definite():
    with pytest.raises(NotPositiveDefinite):
        CostWeights.uniform(np.eye(2), np.zeros((1, 1)), 3)


def test_settling_index():
    assert settling_index(9, 2) == 10
    assert settling_index(8, 2) == 8
    assert settling_index(7, 0) == 7


# --- lifted system -----------------------------------------------------------------

def test_single_step_lift():
    m = validate_model(demo_model())
    L = build_lifted(m, CostWeights.uniform(np.eye(3), np.eye(1), 1), 1)
    np.testing.assert_array_equal(L.Aa, np.vstack([np.eye(3), m.A]))
    np.testing.assert_array_equal(L.Ba, np.vstack([np.zeros((3, 1)), m.B]))
    np.testing.assert_array_equal(L.Da, np.vstack([np.zeros((3, 3)), np.eye(3)]))


def test_demo_lift_shapes_and_pattern():
    m = validate_model(demo_model())
    L = build_lifted(m, CostWeights.uniform(np.eye(3), np.eye(1), 5), 5)
    assert L.Ba.shape == (18, 5)
    for i in range(6):
        for j in range(5):
            block = L.Ba[3 * i:3 * i + 3, j]
            if i <= j:
                assert not block.any()
            else:
                np.testing.assert_allclose(block, (np.linalg.matrix_power(m.A, i - j - 1) @ m.B)[:, 0])
    assert np.linalg.eigvalsh(L.M1).min() > 0


def test_lift_rejects_mismatched_weights():
    with pytest.raises(DimensionMismatch):
        build_lifted(validate_model(demo_model()), CostWeights.uniform(np.eye(3), np.eye(1), 4), 5)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 4), st.integers(1, 3), st.integers(1, 5), st.integers(0, 2 ** 31 - 1))
def test_lift_matches_simulation(n, m, N, seed):
    rng = np.random.default_rng(seed)
    A = rng.standard_normal((n, n))
    B = rng.standard_normal((n, m))
    model = SystemModel(A, B, np.eye(n), np.eye(n), np.eye(n), np.eye(n))
    L = build_lifted(model, CostWeights.uniform(np.eye(n), np.eye(m), N), N)
    x0 = rng.standard_normal(n)
    U = rng.standard_normal((N, m))
    W = rng.standard_normal((N, n))
    xs = [x0]
    for i in range(N):
        xs.append(A @ xs[-1] + B @ U[i] + W[i])
    X = np.concatenate(xs)
    lifted = L.Aa @ x0 + L.Ba @ U.ravel() + L.Da @ W.ravel()
    np.testing.assert_allclose(lifted, X, rtol=1e-10, atol=1e-10 * max(1.0, np.abs(X).max()))


def test_pulse_response():
    rng = np.random.default_rng(1)
    A, B = rng.standard_normal((3, 3)) * 0.5, rng.standard_normal((3, 2))
    model = SystemModel(A, B, np.eye(3), np.eye(3), np.eye(3), np.eye(3))
    L = build_lifted(model, CostWeights.uniform(np.eye(3), np.eye(2), 3), 3)
    u = np.array([1.0, -2.0])
    for j in range(3):
        U = np.zeros(6)
        U[2 * j:2 * j + 2] = u
        x, xs = np.zeros(3), [np.zeros(3)]
        for i in range(3):
            x = A @ x + B @ (u if i == j else 0 * u)
            xs.append(x)
        np.testing.assert_allclose(L.Ba @ U, np.concatenate(xs), atol=1e-12)
