"""Compiled LU with partial pivoting for small dense systems."""

import numpy as np
from numba import njit


@njit(cache=True)
def lu_solve_small(A, B, rtol):
    """Return ``(X, bad)``; ``bad`` is the first rejected pivot index or -1."""
    N = A.shape[0]
    k_rhs = B.shape[1]
    LU = A.copy()
    X = B.copy()
    col_scale = np.zeros(N)
    for j in range(N):
        for i in range(N):
            a = abs(A[i, j])
            if a > col_scale[j]:
                col_scale[j] = a
    for k in range(N):
        p = k
        best = abs(LU[k, k])
        for i in range(k + 1, N):
            a = abs(LU[i, k])
            if a > best:
                best = a
                p = i
        if best < rtol * col_scale[k] or best == 0.0:
            return X, k
        if p != k:
            for j in range(N):
                t = LU[k, j]
                LU[k, j] = LU[p, j]
                LU[p, j] = t
            for j in range(k_rhs):
                t = X[k, j]
                X[k, j] = X[p, j]
                X[p, j] = t
        piv = LU[k, k]
        for i in range(k + 1, N):
            f = LU[i, k] / piv
            if f != 0.0:
                LU[i, k] = f
                for j in range(k + 1, N):
                    LU[i, j] -= f * LU[k, j]
                for j in range(k_rhs):
                    X[i, j] -= f * X[k, j]
    for j in range(k_rhs):
        for i in range(N - 1, -1, -1):
            acc = X[i, j]
            for q in range(i + 1, N):
                acc -= LU[i, q] * X[q, j]
            X[i, j] = acc / LU[i, i]
    return X, -1
