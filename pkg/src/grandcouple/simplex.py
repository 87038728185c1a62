"""Self-contained dense two-phase simplex with Bland's rule.

Solves ``min c.x  s.t.  A x = b, x >= 0``.  Deliberately dependency-free and
deterministic: it backs the exact coupling oracle, which is a test fixture,
so reproducibility matters more than speed.
"""

from __future__ import annotations

import numpy as np

__all__ = ["SimplexError", "InfeasibleError", "simplex_min"]


class SimplexError(RuntimeError):
    """Iteration cap reached or unbounded objective."""


class InfeasibleError(SimplexError):
    """Phase 1 could not reach a feasible basis."""


def _pivot(T: np.ndarray, basis: list[int], row: int, col: int) -> None:
    T[row] /= T[row, col]
    for r in range(T.shape[0]):
        if r != row and T[r, col] != 0.0:
            T[r] -= T[r, col] * T[row]
    basis[row] = col


def _run(T: np.ndarray, basis: list[int], n_cols: int, tol: float, max_iter: int) -> None:
    for _ in range(max_iter):
        # Bland: entering = lowest-index column with negative reduced cost.
        enter = -1
        for j in range(n_cols):
            if T[-1, j] < -tol:
                enter = j
                break
        if enter < 0:
            return
        ratios = np.full(T.shape[0] - 1, np.inf)
        col = T[:-1, enter]
        pos = col > tol
        ratios[pos] = T[:-1, -1][pos] / col[pos]
        best = ratios.min()
        if not np.isfinite(best):
            raise SimplexError("objective unbounded below")
        # Bland: among ratio ties, leave the row whose basic variable has the
        # lowest index.
        leave = min(
            (basis[r], r) for r in range(ratios.size) if ratios[r] <= best + tol
        )[1]
        _pivot(T, basis, leave, enter)
    raise SimplexError("simplex iteration cap exceeded")


def simplex_min(c, A, b, tol: float = 1e-9, max_iter: int = 100_000) -> tuple[float, np.ndarray]:
    """Return ``(optimal value, optimal x)`` for ``min c.x, A x = b, x >= 0``."""
    A = np.asarray(A, dtype=float)
    b = np.asarray(b, dtype=float).copy()
    c = np.asarray(c, dtype=float)
    m, n = A.shape
    A = A.copy()
    neg = b < 0
    A[neg] *= -1.0
    b[neg] *= -1.0

    # Phase 1: artificial basis.
    T = np.zeros((m + 1, n + m + 1))
    T[:m, :n] = A
    T[:m, n : n + m] = np.eye(m)
    T[:m, -1] = b
    T[m, :n] = -A.sum(axis=0)
    T[m, -1] = -b.sum()
    basis = list(range(n, n + m))
    _run(T, basis, n, tol, max_iter)
    if T[-1, -1] < -1e-7:
        raise InfeasibleError(f"phase-1 residual {-T[-1, -1]:.3e}")
    # Drive leftover artificials out of the basis where possible.
    for r in range(m):
        if basis[r] >= n:
            for j in range(n):
                if abs(T[r, j]) > tol:
                    _pivot(T, basis, r, j)
                    break

    # Phase 2 on the original columns only.
    T2 = np.zeros((m + 1, n + 1))
    T2[:m, :n] = T[:m, :n]
    T2[:m, -1] = T[:m, -1]
    T2[m, :n] = c
    for r, j in enumerate(basis):
        if j < n and T2[m, j] != 0.0:
            T2[m] -= T2[m, j] * T2[r]
    _run(T2, basis, n, tol, max_iter)

    x = np.zeros(n)
    for r, j in enumerate(basis):
        if j < n:
            x[j] = T2[r, -1]
    return float(c @ x), x
