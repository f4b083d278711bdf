import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rdfl.errors import SingularMatrix
from rdfl.numerics import (finite_difference_gradient, finite_difference_jacobian, lu_solve,
                           spectral_radius_estimate)


def rel_residual(A, X, B):
    num = np.abs(A @ X - B).max()
    den = np.abs(A).sum(1).max() * np.abs(X).max() + np.abs(B).max()
    return num / den


def test_lu_identity_returns_rhs():
    B = np.arange(12.0).reshape(3, 4)
    np.testing.assert_array_equal(lu_solve(np.eye(3), B), B)


def test_lu_diagonal():
    X = lu_solve(np.diag([2.0, 4.0]), np.array([[2.0], [8.0]]))
    np.testing.assert_allclose(X, [[1.0], [2.0]])


def test_lu_vector_rhs_keeps_shape():
    rng = np.random.default_rng(0)
    A = rng.standard_normal((8, 8)) + 8 * np.eye(8)
    b = rng.standard_normal(8)
    x = lu_solve(A, b)
    assert x.shape == (8,)
    assert np.linalg.norm(A @ x - b) / np.linalg.norm(b) <= 1e-10


def test_lu_needs_pivoting():
    A = np.array([[0.0, 1.0], [1.0, 0.0]])
    np.testing.assert_allclose(lu_solve(A, np.array([3.0, 5.0])), [5.0, 3.0])


@pytest.mark.parametrize("n", [5, 40, 150])
def test_lu_random_residual(n):
    # 150 exercises the LAPACK path
    rng = np.random.default_rng(n)
    A = rng.standard_normal((n, n))
    B = rng.standard_normal((n, 3))
    assert rel_residual(A, lu_solve(A, B), B) <= 1e-10


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 12), st.integers(0, 10_000))
def test_lu_residual_property(n, seed):
    rng = np.random.default_rng(seed)
    A = rng.standard_normal((n, n)) + n * np.eye(n)
    B = rng.standard_normal((n, 2))
    assert rel_residual(A, lu_solve(A, B), B) <= 1e-10


@pytest.mark.parametrize("n", [3, 120])
def test_lu_singular_raises(n):
    A = np.ones((n, n))
    with pytest.raises(SingularMatrix):
        lu_solve(A, np.ones(n))


def test_lu_shape_errors():
    with pytest.raises(ValueError):
        lu_solve(np.ones((2, 3)), np.ones(2))
    with pytest.raises(ValueError):
        lu_solve(np.eye(3), np.ones(2))


def test_spectral_diag():
    est = spectral_radius_estimate(np.diag([0.5, 0.2]))
    assert abs(est.rho - 0.5) <= 1e-6
    assert est.converged


def test_spectral_identity():
    assert abs(spectral_radius_estimate(np.eye(4)).rho - 1.0) <= 1e-6


@pytest.mark.parametrize("seed", range(5))
def test_spectral_symmetric_matches_eig(seed):
    rng = np.random.default_rng(seed)
    S = rng.standard_normal((6, 6))
    S = S + S.T
    est = spectral_radius_estimate(S, max_iters=5000, tol=1e-12)
    assert abs(est.rho - np.abs(np.linalg.eigvalsh(S)).max()) <= 1e-4


@pytest.mark.parametrize("alpha", [0.5, 2.0, -2.0])
def test_spectral_scale_equivariant(alpha):
    J = np.diag([0.7, -0.3, 0.1]) + 0.05 * np.triu(np.ones((3, 3)), 1)
    base = spectral_radius_estimate(J).rho
    assert abs(spectral_radius_estimate(alpha * J).rho - abs(alpha) * base) <= 1e-6


def test_spectral_zero_matrix():
    assert spectral_radius_estimate(np.zeros((3, 3))).rho == 0.0


def test_fd_linear_map_exact():
    A = np.array([[1.0, -2.0, 0.5], [3.0, 0.0, 4.0]])
    J = finite_difference_jacobian(lambda x: A @ x, np.array([0.3, -1.0, 2.0]), h=1e-5)
    np.testing.assert_allclose(J, A, atol=1e-9)


def test_fd_elementwise_square():
    J = finite_difference_jacobian(lambda x: x * x, np.array([1.0, 2.0]))
    np.testing.assert_allclose(J, np.diag([2.0, 4.0]), atol=1e-8)


def test_fd_gradient():
    g = finite_difference_gradient(lambda x: float(np.sum(np.sin(x))), np.array([0.1, 1.0]))
    np.testing.assert_allclose(g, np.cos([0.1, 1.0]), atol=1e-9)


def test_fd_rejects_bad_step():
    with pytest.raises(ValueError):
        finite_difference_jacobian(lambda x: x, np.ones(2), h=0.0)
