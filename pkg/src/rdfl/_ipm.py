"""Compiled primal-dual interior-point kernel for small dense QPs.

Solves ``min 0.5 q2 |x|^2 + c.x  s.t.  G x <= h`` with Mehrotra
predictor-corrector steps on the slack form ``G x + s = h, s >= 0``.
Each Newton system is reduced to the ``n x n`` normal matrix
``q2 I + G^T diag(z / s) G`` and solved by Cholesky.
"""

import numpy as np
from numba import njit

STATUS_OPTIMAL = 0
STATUS_MAX_ITER = 1
STATUS_NUMERICAL = 2


@njit(cache=True)
def _chol_solve(L, b):
    n = b.size
    y = np.empty(n)
    for i in range(n):
        acc = b[i]
        for k in range(i):
            acc -= L[i, k] * y[k]
        y[i] = acc / L[i, i]
    x = np.empty(n)
    for i in range(n - 1, -1, -1):
        acc = y[i]
        for k in range(i + 1, n):
            acc -= L[k, i] * x[k]
        x[i] = acc / L[i, i]
    return x


@njit(cache=True)
def _cholesky(H):
    """Lower Cholesky factor and a flag that is False if a pivot was not positive."""
    n = H.shape[0]
    L = np.zeros((n, n))
    for j in range(n):
        acc = H[j, j]
        for k in range(j):
            acc -= L[j, k] * L[j, k]
        if not acc > 0.0:
            return L, False
        d = np.sqrt(acc)
        L[j, j] = d
        for i in range(j + 1, n):
            acc = H[i, j]
            for k in range(j):
                acc -= L[i, k] * L[j, k]
            L[i, j] = acc / d
    return L, True


@njit(cache=True)
def _max_step(v, dv):
    a = np.inf
    for i in range(v.size):
        if dv[i] < 0.0:
            t = -v[i] / dv[i]
            if t < a:
                a = t
    return a


@njit(cache=True)
def _inf_norm(v):
    r = 0.0
    for i in range(v.size):
        a = abs(v[i])
        if a > r:
            r = a
    return r


SMALL = 40_000  # n * n * m below which explicit loops beat BLAS calls


@njit(cache=True)
def _matvec(A, x):
    r, k = A.shape
    out = np.zeros(r)
    for i in range(r):
        acc = 0.0
        for j in range(k):
            acc += A[i, j] * x[j]
        out[i] = acc
    return out


@njit(cache=True)
def _normal_matrix(G, GT, d, q2):
    m, n = G.shape
    if n * n * m > SMALL:
        H = np.dot(GT * d, G)
    else:
        H = np.zeros((n, n))
        for k in range(m):
            dk = d[k]
            for i in range(n):
                gi = G[k, i] * dk
                if gi != 0.0:
                    for j in range(i + 1):
                        H[i, j] += gi * G[k, j]
        for i in range(n):
            for j in range(i):
                H[j, i] = H[i, j]
    for i in range(n):
        H[i, i] += q2
    return H


@njit(cache=True)
def _newton(G, GT, L, s, z, r_p, r_d, r_c):
    # S dz + Z ds = r_c ; G dx + ds = -r_p ; q2 dx + G^T dz = -r_d
    w = (r_c + z * r_p) / s
    rhs = -r_d - _matvec(GT, w)
    dx = _chol_solve(L, rhs)
    Gdx = _matvec(G, dx)
    dz = w + z * Gdx / s
    ds = -r_p - Gdx
    return dx, dz, ds


@njit(cache=True)
def ipm_kernel(G, h, c, q2, tol, max_iter):
    m, n = G.shape
    GT = np.ascontiguousarray(G.T)
    scale_h = 1.0 + _inf_norm(h)
    scale_c = 1.0 + _inf_norm(c)

    # Least-squares start, then shift slacks and duals into the positive orthant.
    H0 = _normal_matrix(G, GT, np.ones(m), q2)
    L, ok = _cholesky(H0)
    if not ok:
        return c * 0.0, h * 0.0, h * 0.0, 0, STATUS_NUMERICAL, np.inf
    x = _chol_solve(L, -c + np.dot(GT, h))
    s = h - np.dot(G, x)
    z = -s.copy()
    a_p = -np.min(s)
    if a_p >= 0.0:
        s += 1.0 + a_p
    a_d = -np.min(z)
    if a_d >= 0.0:
        z += 1.0 + a_d

    status = STATUS_MAX_ITER
    it = 0
    mu = np.dot(s, z) / m
    best = np.inf
    bx, bz, bs, bmu = x.copy(), z.copy(), s.copy(), mu
    for it in range(max_iter + 1):
        r_p = _matvec(G, x) + s - h
        r_d = q2 * x + c + _matvec(GT, z)
        mu = np.dot(s, z) / m
        e_p = _inf_norm(r_p)
        e_d = _inf_norm(r_d)
        merit = max(e_p / scale_h, e_d / scale_c, mu / scale_c)
        if not (np.isfinite(e_p) and np.isfinite(e_d) and np.isfinite(mu)):
            status = STATUS_NUMERICAL
            break
        if merit < best:
            best = merit
            bx, bz, bs, bmu = x, z, s, mu
        if e_p <= tol * scale_h and e_d <= tol * scale_c and mu <= tol * scale_c:
            status = STATUS_OPTIMAL
            break
        if it == max_iter:
            break

        H = _normal_matrix(G, GT, z / s, q2)
        if not np.isfinite(H).all():
            status = STATUS_NUMERICAL
            break
        L, ok = _cholesky(H)
        if not ok:
            # near a degenerate vertex z/s spans many decades; shift the diagonal once
            shift = 1e-12 * (1.0 + np.max(np.diag(H)))
            for i in range(n):
                H[i, i] += shift
            L, ok = _cholesky(H)
        if not ok:
            status = STATUS_NUMERICAL
            break

        dx, dz, ds = _newton(G, GT, L, s, z, r_p, r_d, -s * z)
        alpha = min(1.0, _max_step(s, ds), _max_step(z, dz))
        mu_aff = np.dot(s + alpha * ds, z + alpha * dz) / m
        sigma = (mu_aff / mu) ** 3

        r_c = -s * z - ds * dz + sigma * mu
        dx, dz, ds = _newton(G, GT, L, s, z, r_p, r_d, r_c)
        alpha = min(1.0, 0.99 * _max_step(s, ds), 0.99 * _max_step(z, dz))

        if not alpha > 0.0:
            status = STATUS_NUMERICAL
            break
        x = x + alpha * dx
        s = s + alpha * ds
        z = z + alpha * dz
    if status != STATUS_OPTIMAL:
        # stalled near a degenerate vertex: hand back the best iterate seen
        return bx, bz, bs, it, status, bmu
    return x, z, s, it, status, mu
