"""Dense linear algebra used by the rate functions.

Matrices are plain float64 ``numpy`` arrays of shape (rows, cols); columns are
samples. Random streams come from numpy's PCG64 bit generator, which produces
identical sequences on every platform for a given seed.
"""
from __future__ import annotations

import hashlib

import numpy as np
import scipy.linalg as la

from .errors import NotPositiveDefinite, NotSymmetric, ShapeMismatch

RNG_ALGORITHM = "PCG64"
SYMMETRY_TOL = 1e-8


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(int(seed)))


def derive_seed(seed: int, *tags: object) -> int:
    """Stable 63-bit child seed for a (seed, tag...) path."""
    h = hashlib.sha256(repr((int(seed),) + tuple(str(t) for t in tags)).encode())
    return int.from_bytes(h.digest()[:8], "little") >> 1


def derive_rng(seed: int, *tags: object) -> np.random.Generator:
    return make_rng(derive_seed(seed, *tags))


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    m = np.asarray(a, dtype=np.float64)
    if m.ndim == 1:
        m = m.reshape(-1, 1)
    if m.ndim != 2:
        raise ShapeMismatch(f"{name} must be 2-D, got shape {m.shape}")
    return m


def _check_square(a: np.ndarray) -> None:
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ShapeMismatch(f"expected a square matrix, got shape {a.shape}")


def _check_symmetric(a: np.ndarray, tol: float) -> None:
    if a.size and np.max(np.abs(a - a.T)) > tol * max(1.0, float(np.max(np.abs(a)))):
        raise NotSymmetric(f"matrix asymmetry exceeds {tol:g}")


def cholesky(a, tol: float = SYMMETRY_TOL) -> np.ndarray:
    """Lower Cholesky factor, raising NotPositiveDefinite on a non-positive pivot."""
    a = as_matrix(a)
    _check_square(a)
    _check_symmetric(a, tol)
    try:
        return la.cholesky(a, lower=True, check_finite=True)
    except la.LinAlgError as exc:
        raise NotPositiveDefinite(str(exc)) from None


def logdet_psd(a, tol: float = SYMMETRY_TOL) -> float:
    """log2 det(A) for symmetric positive-definite A, from the Cholesky pivots."""
    chol = cholesky(a, tol)
    return 2.0 * float(np.sum(np.log2(np.diag(chol))))


def solve_psd(a, b, tol: float = SYMMETRY_TOL) -> np.ndarray:
    a = as_matrix(a)
    b = np.asarray(b, dtype=np.float64)
    if b.shape[0] != a.shape[0]:
        raise ShapeMismatch(f"A is {a.shape}, B has {b.shape[0]} rows")
    chol = cholesky(a, tol)
    return la.cho_solve((chol, True), b, check_finite=False)


def orthogonal_random(d: int, rng: np.random.Generator) -> np.ndarray:
    """Haar-distributed orthogonal d x d matrix (QR with sign-fixed diagonal)."""
    if d < 1:
        raise ShapeMismatch("d must be >= 1")
    q, r = np.linalg.qr(rng.standard_normal((d, d)))
    signs = np.where(np.diag(r) < 0, -1.0, 1.0)
    return q * signs
