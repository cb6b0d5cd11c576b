"""Dense linear algebra and differentiation utilities shared by the solvers.

All routines operate on float64 numpy arrays: a "matrix" is a 2-d array,
a "vector" is a 1-d array. Problem sizes here are at most a few hundred
variables, so everything is dense and direct.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

PIVOT_TOL = 1e-12
SYMMETRY_TOL = 1e-10


class SingularMatrix(Exception):
    """LU elimination hit a pivot with magnitude at or below the threshold."""


class NotPositiveDefinite(Exception):
    """Cholesky factorization hit a non-positive diagonal pivot."""


class NonFiniteOutput(Exception):
    """A probed function returned nan or inf."""


def as_matrix(a) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError(f"expected a 2-d array, got shape {a.shape}")
    return a


def as_vector(b) -> np.ndarray:
    b = np.asarray(b, dtype=np.float64)
    if b.ndim != 1:
        raise ValueError(f"expected a 1-d array, got shape {b.shape}")
    return b


def lu_solve(a, b) -> np.ndarray:
    """Solve a @ x = b by LU factorization with partial pivoting.

    Parameters
    ----------
    a : (n, n) array_like
        Square nonsingular system matrix.
    b : (n,) array_like
        Right-hand side.

    Returns
    -------
    x : (n,) ndarray
        Solution with residual ``||a @ x - b||_inf <= 1e-9 * (1 + ||b||_inf)``
        for reasonably conditioned systems.

    Raises
    ------
    SingularMatrix
        If any pivot magnitude is <= 1e-12.
    """
    a = as_matrix(a).copy()
    b = as_vector(b).copy()
    n = a.shape[0]
    if a.shape[1] != n:
        raise ValueError(f"matrix must be square, got {a.shape}")
    if b.shape[0] != n:
        raise ValueError(f"rhs length {b.shape[0]} does not match n={n}")

    perm = np.arange(n)
    for k in range(n):
        p = k + int(np.argmax(np.abs(a[k:, k])))
        if abs(a[p, k]) <= PIVOT_TOL:
            raise SingularMatrix(f"pivot {a[p, k]:.3e} at column {k}")
        if p != k:
            a[[k, p]] = a[[p, k]]
            perm[[k, p]] = perm[[p, k]]
        a[k + 1 :, k] /= a[k, k]
        a[k + 1 :, k + 1 :] -= np.outer(a[k + 1 :, k], a[k, k + 1 :])

    # forward substitution on the permuted rhs, then back substitution
    y = b[perm]
    for k in range(1, n):
        y[k] -= a[k, :k] @ y[:k]
    x = y
    for k in range(n - 1, -1, -1):
        x[k] = (x[k] - a[k, k + 1 :] @ x[k + 1 :]) / a[k, k]
    return x


def cholesky_solve(a, b) -> np.ndarray:
    """Solve a @ x = b for symmetric positive-definite a.

    Same residual contract as :func:`lu_solve`; faster for SPD systems.

    Raises
    ------
    NotPositiveDefinite
        If a diagonal pivot of the factorization is <= 0.
    ValueError
        If a is not symmetric within 1e-10.
    """
    a = as_matrix(a)
    b = as_vector(b)
    n = a.shape[0]
    if a.shape[1] != n or b.shape[0] != n:
        raise ValueError(f"shape mismatch: a {a.shape}, b {b.shape}")
    if n and np.max(np.abs(a - a.T)) > SYMMETRY_TOL:
        raise ValueError("matrix is not symmetric within 1e-10")

    low = np.zeros_like(a)
    for k in range(n):
        d = a[k, k] - low[k, :k] @ low[k, :k]
        if d <= 0.0:
            raise NotPositiveDefinite(f"pivot {d:.3e} at column {k}")
        low[k, k] = np.sqrt(d)
        if k + 1 < n:
            low[k + 1 :, k] = (a[k + 1 :, k] - low[k + 1 :, :k] @ low[k, :k]) / low[k, k]

    y = b.copy()
    for k in range(n):
        y[k] = (y[k] - low[k, :k] @ y[:k]) / low[k, k]
    x = y
    for k in range(n - 1, -1, -1):
        x[k] = (x[k] - low[k + 1 :, k] @ x[k + 1 :]) / low[k, k]
    return x


def finite_diff_jacobian(
    f: Callable[[np.ndarray], np.ndarray], x, h: float = 1e-5
) -> np.ndarray:
    """Central-difference Jacobian of a vector-to-vector map.

    Entry (i, j) approximates d f_i / d x_j with O(h^2) error.

    Raises
    ------
    NonFiniteOutput
        If f returns non-finite values at any probe point.
    """
    x = as_vector(x)
    if h <= 0:
        raise ValueError("step size must be positive")
    cols = []
    for j in range(x.shape[0]):
        xp = x.copy()
        xm = x.copy()
        xp[j] += h
        xm[j] -= h
        fp = np.asarray(f(xp), dtype=np.float64)
        fm = np.asarray(f(xm), dtype=np.float64)
        if not (np.all(np.isfinite(fp)) and np.all(np.isfinite(fm))):
            raise NonFiniteOutput(f"non-finite output probing coordinate {j}")
        cols.append((fp - fm) / (2.0 * h))
    return np.stack(cols, axis=1)
