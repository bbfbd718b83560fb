"""Input validation helpers shared by the model, estimator and optimiser."""
import numpy as np

from .exceptions import DimensionMismatch, NotPositiveDefinite

#: relative singular-value threshold for numerical rank
RANK_TOL = 1e-9


def check_matrix(a, name, shape=None, allow_empty=True):
    """Return ``a`` as a 2-D float array, optionally enforcing ``shape``.

    ``None`` entries in ``shape`` are wildcards.
    """
    arr = np.array(a, dtype=float)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(-1, 1)
    if arr.ndim != 2:
        raise DimensionMismatch(f"{name} must be a matrix, got ndim={arr.ndim}")
    if shape is not None:
        for want, got in zip(shape, arr.shape):
            if want is not None and want != got:
                raise DimensionMismatch(f"{name} has shape {arr.shape}, expected {shape}")
    if not allow_empty and arr.size == 0:
        raise DimensionMismatch(f"{name} is empty")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    return arr


def check_vector(v, name, size=None):
    arr = np.array(v, dtype=float).reshape(-1)
    if size is not None and arr.size != size:
        raise DimensionMismatch(f"{name} has length {arr.size}, expected {size}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    return arr


def check_square(a, name):
    arr = check_matrix(a, name)
    if arr.shape[0] != arr.shape[1]:
        raise DimensionMismatch(f"{name} must be square, got {arr.shape}")
    return arr


def is_symmetric(a, tol=1e-9):
    scale = max(1.0, np.abs(a).max(initial=0.0))
    return np.abs(a - a.T).max(initial=0.0) <= tol * scale


def check_spd(a, name, semidefinite=False, tol=1e-9):
    """Check that ``a`` is symmetric positive (semi)definite and return it."""
    arr = check_square(a, name)
    if not is_symmetric(arr, tol):
        raise NotPositiveDefinite(name, "matrix is not symmetric")
    if arr.size == 0:
        return arr
    lam_min = np.linalg.eigvalsh(0.5 * (arr + arr.T)).min()
    scale = max(1.0, np.abs(arr).max())
    if semidefinite:
        if lam_min < -tol * scale:
            raise NotPositiveDefinite(name, f"min eigenvalue {lam_min:.3e} < 0")
    elif lam_min <= 0.0:
        raise NotPositiveDefinite(name, f"min eigenvalue {lam_min:.3e} <= 0")
    return arr


def numerical_rank(a, tol=RANK_TOL):
    """Rank with singular values below ``tol * sigma_max`` treated as zero."""
    a = np.asarray(a)
    if a.size == 0:
        return 0
    s = np.linalg.svd(a, compute_uv=False)
    if s[0] == 0.0:
        return 0
    return int(np.sum(s > tol * s[0]))


def symmetrize(a):
    return 0.5 * (a + a.T)


def psd_sqrt(a):
    """Symmetric square root of a PSD matrix with negative eigenvalues clipped at 0."""
    a = symmetrize(np.asarray(a, dtype=float))
    if a.size == 0:
        return a.copy()
    w, v = np.linalg.eigh(a)
    w = np.clip(w, 0.0, None)
    return (v * np.sqrt(w)) @ v.T


def array_digest(*arrays):
    """Stable sha256 over the raw float64 bytes (and shapes) of ``arrays``."""
    import hashlib
    h = hashlib.sha256()
    for a in arrays:
        a = np.ascontiguousarray(np.asarray(a, dtype="<f8"))
        h.update(repr(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()
