"""Equality-constrained, box-bounded convex QP solver.

Solves  min 0.5 x'Hx + g'x  s.t.  A x = b,  lower <= x <= upper
with a primal active-set method over the bound constraints: from a
feasible point, the equality-constrained QP with the working-set
variables pinned at their bounds is solved through its KKT system, the
iterate steps toward that candidate until a bound blocks it (and is then
fixed at that bound), and once no step remains the bound with the most
negative multiplier is released, until the KKT conditions hold.

Multiplier conventions (stationarity): H x + g + A' lam - mu + nu = 0,
with mu >= 0 on active lower bounds and nu >= 0 on active upper bounds.
Callers that distinguish state-block from action-block bound multipliers
do so by index range; the solver treats all bounds uniformly.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.optimize import lsq_linear

from .numerics import SingularMatrix, lu_solve

DUAL_TOL = 1e-10
BOUND_TOL = 1e-10
EQ_TOL = 1e-9


class RankDeficientConstraints(Exception):
    """Equality constraint matrix does not have full row rank."""


class SingularKKT(Exception):
    """The KKT system could not be factorized."""


class Infeasible(Exception):
    """No point satisfies the equality constraints within the bounds."""


class MaxIterations(Exception):
    """Active-set loop exhausted its budget; carries the best iterate."""

    def __init__(self, solution: "QPSolution"):
        super().__init__(f"no convergence in {solution.iterations} iterations")
        self.solution = solution


@dataclass
class QPProblem:
    hessian: np.ndarray
    gradient: np.ndarray
    eq_matrix: np.ndarray
    eq_rhs: np.ndarray
    lower: np.ndarray
    upper: np.ndarray

    def validate(self) -> None:
        n = self.gradient.shape[0]
        m = self.eq_rhs.shape[0]
        if self.hessian.shape != (n, n):
            raise ValueError(f"hessian shape {self.hessian.shape}, expected ({n}, {n})")
        if self.eq_matrix.shape != (m, n):
            raise ValueError(f"eq_matrix shape {self.eq_matrix.shape}, expected ({m}, {n})")
        if m > n:
            raise ValueError(f"more equality rows ({m}) than variables ({n})")
        if self.lower.shape != (n,) or self.upper.shape != (n,):
            raise ValueError("bound shapes do not match the variable count")
        if np.any(self.lower > self.upper):
            raise ValueError("lower bound exceeds upper bound")
        if n and np.max(np.abs(self.hessian - self.hessian.T)) > 1e-10:
            raise ValueError("hessian is not symmetric within 1e-10")


@dataclass
class QPSolution:
    x: np.ndarray
    eq_multipliers: np.ndarray
    lower_multipliers: np.ndarray
    upper_multipliers: np.ndarray
    iterations: int
    status: str  # solved | max_iter | infeasible


def _check_row_rank(a: np.ndarray) -> None:
    m = a.shape[0]
    if m == 0:
        return
    r = np.linalg.qr(a.T, mode="r")
    scale = max(1.0, float(np.max(np.abs(a))))
    if np.min(np.abs(np.diag(r))) <= 1e-10 * scale:
        raise RankDeficientConstraints("equality rows are linearly dependent")


def solve_eq_qp(
    hessian: np.ndarray, gradient: np.ndarray, eq_matrix: np.ndarray, eq_rhs: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Solve the equality-constrained QP through its KKT linear system.

    Returns (x, lam) satisfying  [[H, A'], [A, 0]] (x, lam) = (-g, b)
    with a scaled residual at or below 1e-9.
    """
    h = np.asarray(hessian, dtype=np.float64)
    g = np.asarray(gradient, dtype=np.float64)
    a = np.asarray(eq_matrix, dtype=np.float64)
    b = np.asarray(eq_rhs, dtype=np.float64)
    n = g.shape[0]
    m = b.shape[0]
    _check_row_rank(a)
    if m == 0:
        try:
            return lu_solve(h, -g), np.zeros(0)
        except SingularMatrix as exc:
            raise SingularKKT(str(exc)) from exc
    kkt = np.zeros((n + m, n + m))
    kkt[:n, :n] = h
    kkt[:n, n:] = a.T
    kkt[n:, :n] = a
    rhs = np.concatenate([-g, b])
    try:
        sol = lu_solve(kkt, rhs)
    except SingularMatrix as exc:
        raise SingularKKT(str(exc)) from exc
    return sol[:n], sol[n:]


def _solve_working_set(
    h: np.ndarray,
    g: np.ndarray,
    a: np.ndarray,
    b: np.ndarray,
    fixed_values: np.ndarray,
    free: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    """Solve the QP with non-free variables pinned at ``fixed_values``."""
    n = g.shape[0]
    m = b.shape[0]
    x = fixed_values.copy()
    nf = int(np.sum(free))
    if nf == 0:
        if m == 0:
            return x, np.zeros(0)
        lam, *_ = np.linalg.lstsq(a.T, -(h @ x + g), rcond=None)
        return x, lam
    hf = h[np.ix_(free, free)]
    gf = g[free] + h[np.ix_(free, ~free)] @ fixed_values[~free]
    af = a[:, free]
    bf = b - a[:, ~free] @ fixed_values[~free] if m else b
    kkt = np.zeros((nf + m, nf + m))
    kkt[:nf, :nf] = hf
    if m:
        kkt[:nf, nf:] = af.T
        kkt[nf:, :nf] = af
    rhs = np.concatenate([-gf, bf])
    # LAPACK backend (same partial-pivoting LU) for the hot inner loop
    try:
        sol = np.linalg.solve(kkt, rhs)
        if not np.all(np.isfinite(sol)):
            raise np.linalg.LinAlgError("non-finite solve")
    except np.linalg.LinAlgError:
        sol, *_ = np.linalg.lstsq(kkt, rhs, rcond=None)
    x[free] = sol[:nf]
    return x, sol[nf:]


def _phase1_point(problem: QPProblem) -> np.ndarray:
    """Minimum equality-violation point inside the box; raises Infeasible."""
    m = problem.eq_rhs.shape[0]
    if m == 0:
        return np.clip(np.zeros(problem.gradient.shape[0]), problem.lower, problem.upper)
    res = lsq_linear(problem.eq_matrix, problem.eq_rhs, bounds=(problem.lower, problem.upper))
    gap = float(np.max(np.abs(problem.eq_matrix @ res.x - problem.eq_rhs)))
    if gap > EQ_TOL * (1.0 + float(np.max(np.abs(problem.eq_rhs)))):
        raise Infeasible("no point satisfies the equality constraints within the bounds")
    return np.clip(res.x, problem.lower, problem.upper)


def solve_box_qp(
    problem: QPProblem,
    max_iter: int = 100,
    warm_start: Optional[tuple[np.ndarray, np.ndarray]] = None,
    x0: Optional[np.ndarray] = None,
) -> QPSolution:
    """Solve a box-bounded equality-constrained QP with a primal active set.

    Starting from a feasible point, each iteration solves the equality
    QP with the working-set variables fixed at their bounds, steps toward
    that candidate up to the first blocking bound (which is then fixed),
    and once no step remains releases the bound with the most negative
    multiplier (ties broken by lowest variable index).

    Parameters
    ----------
    problem : QPProblem
        Problem data; ``lower``/``upper`` entries may be +-inf.
    max_iter : int
        Budget of active-set iterations.
    warm_start : optional (lower_mask, upper_mask)
        Working-set hint from a previous solve of a similar problem; only
        the bounds actually active at the starting point are kept.
    x0 : optional ndarray
        Feasible starting point (equalities within 1e-9, bounds within
        1e-10). Without one, a phase-1 bounded least-squares problem
        supplies it or proves infeasibility.

    Raises
    ------
    Infeasible
        If no point satisfies the constraints (phase-1 check on the
        minimum bound-violation problem).
    MaxIterations
        If the iteration budget runs out; the best iterate rides on the
        exception.
    """
    problem.validate()
    h = np.asarray(problem.hessian, dtype=np.float64)
    g = np.asarray(problem.gradient, dtype=np.float64)
    a = np.asarray(problem.eq_matrix, dtype=np.float64)
    b = np.asarray(problem.eq_rhs, dtype=np.float64)
    lo, up = problem.lower, problem.upper
    n = g.shape[0]
    m = b.shape[0]
    _check_row_rank(a)

    eq_scale = EQ_TOL * (1.0 + (float(np.max(np.abs(b))) if m else 0.0))
    if x0 is not None:
        x = np.clip(np.asarray(x0, dtype=np.float64), lo, up)
        if m and np.max(np.abs(a @ x - b)) > eq_scale:
            x = _phase1_point(problem)
    elif m == 0:
        x = np.clip(np.zeros(n), lo, up)
    else:
        x = _phase1_point(problem)

    at_lower = np.isfinite(lo) & (x <= lo + BOUND_TOL)
    at_upper = np.isfinite(up) & (x >= up - BOUND_TOL)
    if warm_start is not None:
        # keep only hinted bounds that are actually active at the start
        lower_active = at_lower & warm_start[0]
        upper_active = at_upper & warm_start[1] & ~lower_active
    else:
        lower_active = at_lower
        upper_active = at_upper & ~lower_active

    lam = np.zeros(m)
    seen: set[bytes] = set()
    last: Optional[QPSolution] = None

    for it in range(1, max_iter + 1):
        # a genuine cycle revisits a working set without moving the iterate
        sig = np.concatenate([lower_active, upper_active]).tobytes() + x.tobytes()
        if sig in seen:
            break
        seen.add(sig)

        fixed = x.copy()
        fixed[lower_active] = lo[lower_active]
        fixed[upper_active] = up[upper_active]
        free = ~(lower_active | upper_active)
        cand, lam = _solve_working_set(h, g, a, b, fixed, free)
        if m and np.max(np.abs(a @ cand - b)) > max(eq_scale, 1e-7):
            break  # degenerate working set; fall through to the best iterate

        p = cand - x
        if np.max(np.abs(p), initial=0.0) <= 1e-12:
            r = h @ x + g + (a.T @ lam if m else 0.0)
            mu = np.where(lower_active, r, 0.0)
            nu = np.where(upper_active, -r, 0.0)
            last = QPSolution(x.copy(), lam.copy(), mu, nu, it, "max_iter")
            worst = -DUAL_TOL
            worst_idx = -1
            for i in np.flatnonzero(lower_active | upper_active):
                val = mu[i] if lower_active[i] else nu[i]
                if val < worst:
                    worst = val
                    worst_idx = int(i)
            if worst_idx < 0:
                return QPSolution(x.copy(), lam.copy(), mu, nu, it, "solved")
            lower_active[worst_idx] = False
            upper_active[worst_idx] = False
            continue

        # step toward the candidate, stopping at the first blocking bound
        steps = np.full(n, np.inf)
        toward_lo = free & (p < 0.0) & np.isfinite(lo)
        toward_up = free & (p > 0.0) & np.isfinite(up)
        steps[toward_lo] = np.maximum((lo[toward_lo] - x[toward_lo]) / p[toward_lo], 0.0)
        steps[toward_up] = np.maximum((up[toward_up] - x[toward_up]) / p[toward_up], 0.0)
        block = int(np.argmin(steps))  # first index on ties
        alpha = min(1.0, float(steps[block]))
        x = x + alpha * p
        if alpha < 1.0:
            if toward_lo[block]:
                x[block] = lo[block]
                lower_active[block] = True
            else:
                x[block] = up[block]
                upper_active[block] = True

    if last is None:
        r = h @ x + g + (a.T @ lam if m else 0.0)
        mu = np.where(lower_active, r, 0.0)
        nu = np.where(upper_active, -r, 0.0)
        last = QPSolution(x.copy(), lam.copy(), mu, nu, max_iter, "max_iter")
    raise MaxIterations(last)
