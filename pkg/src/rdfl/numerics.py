"""Dense linear-algebra helpers: pivoted solves, spectral radius, finite differences."""

import warnings
from typing import Callable, NamedTuple

import numpy as np
import scipy.linalg

from . import _lu
from .errors import SingularMatrix

PIVOT_RTOL = 1e-12
SMALL_DIM = 96  # compiled elimination below this size, LAPACK above


def lu_solve(A, B, pivot_rtol=PIVOT_RTOL):
    """Solve ``A X = B`` by LU factorisation with partial pivoting.

    Raises :class:`SingularMatrix` when any pivot of ``U`` is smaller than
    ``pivot_rtol`` times the largest magnitude in the matching column of ``A``.
    ``B`` may be a vector or a matrix; the result has the same shape.
    """
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError(f"A must be square, got shape {A.shape}")
    if B.shape[0] != A.shape[0]:
        raise ValueError(f"row mismatch: A has {A.shape[0]} rows, B has {B.shape[0]}")
    if A.shape[0] == 0:
        return B.copy()
    if A.shape[0] <= SMALL_DIM:
        B2 = np.ascontiguousarray(B.reshape(B.shape[0], -1))
        X, bad = _lu.lu_solve_small(np.ascontiguousarray(A), B2, pivot_rtol)
        if bad >= 0:
            raise SingularMatrix(f"pivot {bad} fell below {pivot_rtol:g} x column scale")
        return X.reshape(B.shape)

    col_scale = np.abs(A).max(axis=0)
    with warnings.catch_warnings():
        # singular pivots are reported below with our own threshold
        warnings.simplefilter("ignore", scipy.linalg.LinAlgWarning)
        lu, piv = scipy.linalg.lu_factor(A, check_finite=False)
    pivots = np.abs(np.diag(lu))
    bad = pivots < pivot_rtol * np.maximum(col_scale, np.finfo(float).tiny)
    if bad.any():
        k = int(np.flatnonzero(bad)[0])
        raise SingularMatrix(
            f"pivot {k} has magnitude {pivots[k]:.3e} "
            f"(column scale {col_scale[k]:.3e})"
        )
    return scipy.linalg.lu_solve((lu, piv), B, check_finite=False)


class SpectralEstimate(NamedTuple):
    rho: float
    converged: bool
    iterations: int


def spectral_radius_estimate(J, max_iters=200, tol=1e-8, seed=0):
    """Estimate the spectral radius of ``J`` by power iteration.

    The estimate is the norm growth ``||J v|| / ||v||`` of the normalised
    iterate. If successive estimates never agree to ``tol`` (for example a
    complex dominant pair) the geometric mean growth over the second half of
    the run is returned with ``converged=False``. Use only as a guard.
    """
    J = np.asarray(J, dtype=float)
    if J.ndim != 2 or J.shape[0] != J.shape[1]:
        raise ValueError(f"J must be square, got shape {J.shape}")
    n = J.shape[0]
    if n == 0:
        return SpectralEstimate(0.0, True, 0)

    rng = np.random.default_rng(seed)
    v = rng.standard_normal(n)
    v /= np.linalg.norm(v)
    log_growth = []
    prev = np.inf
    for k in range(1, max_iters + 1):
        w = J @ v
        norm = np.linalg.norm(w)
        if norm == 0.0:
            return SpectralEstimate(0.0, True, k)
        est = norm
        log_growth.append(np.log(norm))
        if abs(est - prev) <= tol * max(1.0, est):
            return SpectralEstimate(float(est), True, k)
        prev = est
        v = w / norm

    tail = log_growth[len(log_growth) // 2:]
    return SpectralEstimate(float(np.exp(np.mean(tail))), False, max_iters)


def finite_difference_jacobian(f: Callable, x, h=1e-5):
    """Central-difference Jacobian of a vector-to-vector map ``f`` at ``x``."""
    if h <= 0:
        raise ValueError("step h must be positive")
    x = np.asarray(x, dtype=float)
    cols = []
    for j in range(x.size):
        e = np.zeros_like(x)
        e[j] = h
        fp = np.atleast_1d(np.asarray(f(x + e), dtype=float))
        fm = np.atleast_1d(np.asarray(f(x - e), dtype=float))
        cols.append((fp - fm) / (2.0 * h))
    if not cols:
        return np.zeros((np.atleast_1d(f(x)).size, 0))
    return np.column_stack(cols)


def finite_difference_gradient(f: Callable, x, h=1e-5):
    """Central-difference gradient of a scalar function."""
    return finite_difference_jacobian(lambda y: np.array([f(y)]), x, h)[0]
