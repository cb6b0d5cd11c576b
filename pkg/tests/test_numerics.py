import numpy as np
import pytest

from deepsafempc.numerics import (
    NonFiniteOutput,
    NotPositiveDefinite,
    SingularMatrix,
    cholesky_solve,
    finite_diff_jacobian,
    lu_solve,
)


def test_lu_identity():
    x = lu_solve(np.eye(3), np.array([1.0, 2.0, 3.0]))
    np.testing.assert_allclose(x, [1.0, 2.0, 3.0])


def test_lu_diagonal():
    x = lu_solve(np.array([[2.0, 0.0], [0.0, 4.0]]), np.array([2.0, 8.0]))
    np.testing.assert_allclose(x, [1.0, 2.0])


def test_lu_residual_random_5x5():
    rng = np.random.default_rng(0)
    a = rng.normal(size=(5, 5)) + 5.0 * np.eye(5)
    b = rng.normal(size=5)
    x = lu_solve(a, b)
    residual = np.max(np.abs(a @ x - b))
    assert residual <= 1e-9 * (1.0 + np.max(np.abs(b)))


def test_lu_residual_property_many_sizes():
    rng = np.random.default_rng(1)
    for _ in range(50):
        n = int(rng.integers(1, 12))
        a = rng.normal(size=(n, n)) + n * np.eye(n)
        b = rng.normal(size=n)
        x = lu_solve(a, b)
        assert np.max(np.abs(a @ x - b)) <= 1e-9 * (1.0 + np.max(np.abs(b)))


def test_lu_singular_raises():
    a = np.array([[1.0, 2.0], [2.0, 4.0]])
    with pytest.raises(SingularMatrix):
        lu_solve(a, np.array([1.0, 1.0]))


def test_lu_needs_pivoting():
    a = np.array([[0.0, 1.0], [1.0, 0.0]])
    x = lu_solve(a, np.array([3.0, 7.0]))
    np.testing.assert_allclose(x, [7.0, 3.0])


def test_cholesky_identity():
    x = cholesky_solve(np.eye(2), np.array([5.0, -3.0]))
    np.testing.assert_allclose(x, [5.0, -3.0])


def test_cholesky_diagonal():
    x = cholesky_solve(np.array([[4.0, 0.0], [0.0, 9.0]]), np.array([8.0, 27.0]))
    np.testing.assert_allclose(x, [2.0, 3.0])


def test_cholesky_agrees_with_lu_random_spd():
    rng = np.random.default_rng(2)
    m = rng.normal(size=(6, 6))
    a = m.T @ m + np.eye(6)
    b = rng.normal(size=6)
    np.testing.assert_allclose(cholesky_solve(a, b), lu_solve(a, b), atol=1e-9)


def test_cholesky_agrees_with_lu_up_to_20():
    rng = np.random.default_rng(3)
    for n in (2, 5, 10, 20):
        m = rng.normal(size=(n, n))
        a = m.T @ m + np.eye(n)
        b = rng.normal(size=n)
        np.testing.assert_allclose(cholesky_solve(a, b), lu_solve(a, b), atol=1e-9)


def test_cholesky_not_positive_definite():
    a = np.array([[1.0, 0.0], [0.0, -1.0]])
    with pytest.raises(NotPositiveDefinite):
        cholesky_solve(a, np.array([1.0, 1.0]))


def test_cholesky_rejects_asymmetric():
    a = np.array([[1.0, 0.5], [0.0, 1.0]])
    with pytest.raises(ValueError):
        cholesky_solve(a, np.array([1.0, 1.0]))


def test_fd_jacobian_identity_map():
    jac = finite_diff_jacobian(lambda x: x, np.array([0.3, -0.7, 2.0]))
    np.testing.assert_allclose(jac, np.eye(3), atol=1e-9)


def test_fd_jacobian_square():
    jac = finite_diff_jacobian(lambda x: np.array([x[0] ** 2]), np.array([3.0]))
    np.testing.assert_allclose(jac, [[6.0]], atol=1e-6)


def test_fd_jacobian_linear_map_exact():
    rng = np.random.default_rng(4)
    a = rng.normal(size=(4, 6))
    for _ in range(5):
        x = rng.normal(size=6)
        jac = finite_diff_jacobian(lambda v: a @ v, x)
        assert np.max(np.abs(jac - a)) < 1e-8


def test_fd_jacobian_nonfinite_raises():
    def bad(x):
        return np.array([np.inf])

    with pytest.raises(NonFiniteOutput):
        finite_diff_jacobian(bad, np.array([1.0]))
