"""Dense two-phase simplex for small equality-form linear programs.

Solves ``min c @ x  s.t.  A @ x = b, x >= 0`` with Bland's anti-cycling rule.
Sized for hull queries: a handful of rows and at most a few hundred columns.
"""

from dataclasses import dataclass

import numpy as np

from .errors import InfeasibleComposition

PIVOT_TOL = 1e-11


@dataclass
class LPResult:
    x: np.ndarray
    objective: float
    basis: list


def _pivot(tab, basis, row, col):
    tab[row] /= tab[row, col]
    for r in range(tab.shape[0]):
        if r != row and tab[r, col] != 0.0:
            tab[r] -= tab[r, col] * tab[row]
    basis[row] = col


def _run(tab, basis, allowed, tol):
    """Iterate on a tableau whose last row holds reduced costs and last column the rhs."""
    m = tab.shape[0] - 1
    while True:
        cost = tab[-1, :-1]
        entering = next((j for j in allowed if cost[j] < -tol), None)
        if entering is None:
            return
        col = tab[:m, entering]
        best, leave = None, None
        for r in range(m):
            if col[r] > tol:
                ratio = tab[r, -1] / col[r]
                if best is None or ratio < best - 1e-14 or (abs(ratio - best) <= 1e-14 and basis[r] < basis[leave]):
                    best, leave = ratio, r
        if leave is None:
            raise ValueError("linear program is unbounded")
        _pivot(tab, basis, leave, entering)


def solve_equality_lp(c, A, b, feas_tol=1e-9, tol=PIVOT_TOL) -> LPResult:
    c = np.asarray(c, dtype=float)
    A = np.array(A, dtype=float)
    b = np.array(b, dtype=float)
    m, n = A.shape
    neg = b < 0
    A[neg] *= -1
    b[neg] *= -1

    # phase 1: artificial variables n..n+m-1
    tab = np.zeros((m + 1, n + m + 1))
    tab[:m, :n] = A
    tab[:m, n : n + m] = np.eye(m)
    tab[:m, -1] = b
    tab[-1, :n] = -A.sum(axis=0)
    tab[-1, -1] = -b.sum()
    basis = list(range(n, n + m))
    _run(tab, basis, range(n + m), tol)
    if -tab[-1, -1] > feas_tol:
        raise InfeasibleComposition(f"no convex combination matches (phase-1 residual {-tab[-1, -1]:.3g})")

    # drive remaining artificials out; rows where that is impossible are redundant
    r = 0
    while r < len(basis):
        if basis[r] >= n:
            cols = [j for j in range(n) if abs(tab[r, j]) > tol]
            if cols:
                _pivot(tab, basis, r, cols[0])
            else:
                tab = np.delete(tab, r, axis=0)
                del basis[r]
                continue
        r += 1

    # phase 2
    m2 = len(basis)
    tab2 = np.zeros((m2 + 1, n + 1))
    tab2[:m2, :n] = tab[:m2, :n]
    tab2[:m2, -1] = tab[:m2, -1]
    tab2[-1, :n] = c
    for r, j in enumerate(basis):
        tab2[-1] -= c[j] * tab2[r]
    _run(tab2, basis, range(n), tol)
    x = np.zeros(n)
    for r, j in enumerate(basis):
        x[j] = tab2[r, -1]
    x[x < 0] = 0.0
    return LPResult(x=x, objective=float(c @ x), basis=list(basis))
