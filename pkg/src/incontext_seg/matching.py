"""Minimum-cost bipartite assignment (Kuhn-Munkres) and an exhaustive oracle.

Both solvers share the tie rule: among optimal assignments, pick the
lexicographically smallest ``sigma`` (compared row by row).
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np


class InfeasibleAssignmentError(ValueError):
    pass


class OracleSizeError(ValueError):
    pass


BRUTE_FORCE_LIMIT = 7


@dataclass(frozen=True)
class Assignment:
    """``sigma[j]`` is the column (prediction) assigned to row (ground truth) ``j``."""

    sigma: tuple[int, ...]
    total_cost: float

    def as_dict(self) -> dict[int, int]:
        return dict(enumerate(self.sigma))


def _total(cost: np.ndarray, sigma) -> float:
    t = 0.0
    for j, i in enumerate(sigma):
        t += float(cost[j, i])
    return t


def _check(cost) -> np.ndarray:
    c = np.asarray(cost, dtype=np.float64)
    if c.ndim == 1:
        c = c[None, :]
    if c.ndim != 2:
        raise ValueError(f"cost must be a matrix, got shape {c.shape}")
    if c.shape[0] > c.shape[1]:
        raise InfeasibleAssignmentError(f"{c.shape[0]} targets cannot be matched injectively into {c.shape[1]} predictions")
    if not np.isfinite(c).all():
        raise ValueError("cost matrix has non-finite entries")
    return c


def _solve(cost: np.ndarray) -> list[int]:
    return _solve_dual(cost)[0]


def _solve_dual(cost: np.ndarray):
    """Shortest augmenting path with potentials; rows <= cols.

    Returns (column per row, row potentials, column potentials).
    """
    n, m = cost.shape
    if n == 0:
        return [], [], []
    u = [0.0] * (n + 1)
    v = [0.0] * (m + 1)
    owner = [0] * (m + 1)  # owner[j] = row (1-based) holding column j
    way = [0] * (m + 1)
    rows = cost.tolist()
    for i in range(1, n + 1):
        owner[0] = i
        j0 = 0
        minv = [math.inf] * (m + 1)
        used = [False] * (m + 1)
        while True:
            used[j0] = True
            i0 = owner[j0]
            row = rows[i0 - 1]
            delta = math.inf
            j1 = 0
            for j in range(1, m + 1):
                if used[j]:
                    continue
                cur = row[j - 1] - u[i0] - v[j]
                if cur < minv[j]:
                    minv[j] = cur
                    way[j] = j0
                if minv[j] < delta:
                    delta = minv[j]
                    j1 = j
            for j in range(m + 1):
                if used[j]:
                    u[owner[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if owner[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            owner[j0] = owner[j1]
            j0 = j1
    out = [-1] * n
    for j in range(1, m + 1):
        if owner[j]:
            out[owner[j] - 1] = j - 1
    return out, u[1:], v[1:]


def _tol(value: float) -> float:
    return 1e-12 * max(1.0, abs(value))


def hungarian_match(cost) -> Assignment:
    """Optimal injective assignment of rows to columns (rows <= columns)."""
    c = _check(cost)
    g, s = c.shape
    if g == 0:
        return Assignment((), 0.0)
    current, u, v = _solve_dual(c)
    best = _total(c, current)
    slack_tol = 1e-9 * max(1.0, float(np.abs(c).max()))
    # Walk rows in order and move each to the smallest column that still admits
    # an optimal completion. Only tight edges (zero reduced cost under the
    # optimal duals) can appear in any optimal assignment.
    sigma: list[int] = []
    fixed = 0.0
    free_cols = list(range(s))
    for r in range(g):
        choice = current[r]
        for j in free_cols:
            if j >= current[r]:
                break
            if c[r, j] - u[r] - v[j] > slack_tol:
                continue
            rest_cols = [k for k in free_cols if k != j]
            sub = c[r + 1 :][:, rest_cols]
            rest_sigma = _solve(sub) if r + 1 < g else []
            if fixed + c[r, j] + _total(sub, rest_sigma) <= best + _tol(best):
                choice = j
                current = list(current[: r + 1]) + [rest_cols[k] for k in rest_sigma]
                current[r] = j
                break
        sigma.append(choice)
        fixed += c[r, choice]
        free_cols = [k for k in free_cols if k != choice]
    return Assignment(tuple(sigma), _total(c, sigma))


def brute_force_match(cost) -> Assignment:
    """Exhaustive search over all injections; a test oracle for small problems."""
    c = _check(cost)
    g, s = c.shape
    if g > BRUTE_FORCE_LIMIT:
        raise OracleSizeError(f"brute force is limited to {BRUTE_FORCE_LIMIT} rows, got {g}")
    best_sigma: tuple[int, ...] = ()
    best = math.inf
    for perm in itertools.permutations(range(s), g):
        t = _total(c, perm)
        if t < best - _tol(best if math.isfinite(best) else 0.0):
            best, best_sigma = t, perm
    if g == 0:
        best = 0.0
    return Assignment(tuple(best_sigma), best)
