"""Coupling solvers for the inner transport problem.

All solvers take a cost matrix ``C`` of shape (N, M) (N predictions, M labels)
and label marginals ``v`` of length M. Ties are always broken toward the
lowest index so every solver is deterministic.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np

MASS_TOL = 1e-9


class InfeasibleError(ValueError):
    pass


@dataclass
class CouplingMatrix:
    plan: np.ndarray
    gamma: float | None = None
    method: str = ""

    def objective(self, cost) -> float:
        return float(np.sum(self.plan * np.asarray(cost, dtype=np.float64)))

    @property
    def row_marginal(self) -> np.ndarray:
        return self.plan.sum(axis=1)

    @property
    def col_marginal(self) -> np.ndarray:
        return self.plan.sum(axis=0)

    def check(self, v, u=None, tol: float = MASS_TOL) -> bool:
        """True when the plan satisfies its declared marginal constraints."""
        p = self.plan
        ok = bool(np.all(p >= -tol)) and np.allclose(p.sum(axis=0), v, atol=tol, rtol=0)
        ok = ok and abs(p.sum() - 1.0) <= tol
        if u is not None:
            ok = ok and np.allclose(p.sum(axis=1), u, atol=tol, rtol=0)
        elif self.gamma is not None and self.gamma < 1:
            ok = ok and bool(np.all(p.sum(axis=1) <= self.gamma + tol))
        return ok


def _as_cost(C) -> np.ndarray:
    C = np.asarray(C, dtype=np.float64)
    if C.ndim != 2 or C.size == 0:
        raise ValueError(f"cost matrix must be a non-empty 2-D array, got shape {C.shape}")
    if not np.all(np.isfinite(C)):
        raise ValueError("cost matrix has non-finite entries")
    return C


def check_gamma(gamma: float, n: int) -> None:
    if gamma > 1 + 1e-12:
        raise InfeasibleError(f"gamma={gamma} exceeds 1")
    if n * gamma < 1 - 1e-12:
        raise InfeasibleError(f"infeasible: N*gamma = {n}*{gamma} < 1, need gamma >= 1/N = {1 / n:.6g}")


def solve_gamma_one(C, v) -> CouplingMatrix:
    """Each label's mass goes to its nearest prediction (lowest index on ties)."""
    C = _as_cost(C)
    v = np.asarray(v, dtype=np.float64)
    plan = np.zeros_like(C)
    rows = np.argmin(C, axis=0)  # argmin returns the first minimum
    plan[rows, np.arange(C.shape[1])] = v
    return CouplingMatrix(plan, 1.0, "gamma_one")


def solve_relaxed_greedy(C, v, gamma: float) -> CouplingMatrix:
    """Greedy coupling under row bound P 1 <= gamma and column marginals v.

    Labels are visited in ascending order of their cheapest prediction; each
    label fills predictions in ascending cost order until its mass is placed.
    """
    C = _as_cost(C)
    n, m = C.shape
    v = np.asarray(v, dtype=np.float64)
    check_gamma(gamma, n)
    if gamma >= 1 - 1e-12:
        return solve_gamma_one(C, v)
    plan = np.zeros_like(C)
    room = np.full(n, float(gamma))
    order = np.argsort(C.min(axis=0), kind="stable")
    ranked = np.argsort(C, axis=0, kind="stable")
    for j in order:
        rest = v[j]
        for i in ranked[:, j]:
            if rest <= 0:
                break
            give = min(rest, room[i])
            if give <= 0:
                continue
            plan[i, j] += give
            room[i] -= give
            rest -= give
        if rest > 1e-12:
            # rounding residue only; capacity n*gamma >= 1 guarantees placement
            i = int(np.argmax(room))
            plan[i, j] += rest
            room[i] -= rest
    return CouplingMatrix(plan, float(gamma), "greedy")


# ----------------------------------------------------------------------------
# transportation simplex (network simplex on the bipartite transportation graph)


def _northwest(a: np.ndarray, b: np.ndarray):
    n, m = len(a), len(b)
    x = np.zeros((n, m))
    basis = []
    ra, rb = a.copy(), b.copy()
    i = j = 0
    while True:
        q = min(ra[i], rb[j])
        x[i, j] = q
        basis.append((i, j))
        ra[i] -= q
        rb[j] -= q
        if i == n - 1 and j == m - 1:
            break
        if i == n - 1:
            j += 1
        elif j == m - 1:
            i += 1
        elif ra[i] <= rb[j]:
            # row exhausted (or tie: the next cell then carries a degenerate
            # zero so the basis keeps n + m - 1 cells)
            i += 1
        else:
            j += 1
    return x, basis


def _potentials(C, basis, n, m):
    adj = [[] for _ in range(n + m)]
    for i, j in basis:
        adj[i].append(n + j)
        adj[n + j].append(i)
    pot = np.full(n + m, np.nan)
    pot[0] = 0.0
    queue = deque([0])
    while queue:
        k = queue.popleft()
        for t in adj[k]:
            if np.isnan(pot[t]):
                if k < n:
                    pot[t] = C[k, t - n] - pot[k]
                else:
                    pot[t] = C[t, k - n] - pot[k]
                queue.append(t)
    return pot[:n], pot[n:], adj


def _tree_path(adj, start, goal, n):
    prev = {start: None}
    queue = deque([start])
    while queue:
        k = queue.popleft()
        if k == goal:
            break
        for t in adj[k]:
            if t not in prev:
                prev[t] = k
                queue.append(t)
    path = [goal]
    while prev[path[-1]] is not None:
        path.append(prev[path[-1]])
    return path[::-1]


def transport_simplex(C, a, b, max_iter: int = 10000):
    """Exact min-cost plan with row sums ``a`` and column sums ``b`` (balanced).

    Dantzig pricing with a switch to Bland's smallest-index rule after a run
    of degenerate pivots, which rules out cycling.
    """
    C = _as_cost(C)
    n, m = C.shape
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if np.any(a < -MASS_TOL) or np.any(b < -MASS_TOL):
        raise InfeasibleError("negative marginal")
    if abs(a.sum() - b.sum()) > 1e-9:
        raise InfeasibleError(f"unbalanced marginals: {a.sum()} vs {b.sum()}")
    a = np.clip(a, 0, None)
    b = np.clip(b, 0, None)
    x, basis = _northwest(a, b)
    in_basis = np.zeros((n, m), dtype=bool)
    for cell in basis:
        in_basis[cell] = True
    tol = 1e-12 * max(1.0, float(np.abs(C).max()))
    degenerate_run = 0
    for _ in range(max_iter):
        ru, rv, adj = _potentials(C, basis, n, m)
        red = C - ru[:, None] - rv[None, :]
        red[in_basis] = 0.0
        if red.min() >= -tol:
            return x
        if degenerate_run > n * m:
            flat = np.flatnonzero(red.ravel() < -tol)[0]
        else:
            flat = int(np.argmin(red))
        ei, ej = divmod(int(flat), m)
        # cycle: entering cell, then tree path from column ej back to row ei
        path = _tree_path(adj, n + ej, ei, n)
        cells = [(ei, ej)]
        for s, t in zip(path[:-1], path[1:]):
            cells.append((t, s - n) if s >= n else (s, t - n))
        minus = cells[1::2]
        theta = min(x[c] for c in minus)
        leave = min((c for c in minus if x[c] == theta), key=lambda c: c[0] * m + c[1])
        for k, c in enumerate(cells):
            x[c] += theta if k % 2 == 0 else -theta
        x[leave] = 0.0
        degenerate_run = degenerate_run + 1 if theta == 0 else 0
        basis.remove(leave)
        basis.append((ei, ej))
        in_basis[leave] = False
        in_basis[ei, ej] = True
    raise RuntimeError("transportation simplex did not converge")


def solve_exact_lp(C, v, u=None, gamma: float | None = None) -> CouplingMatrix:
    """Optimal coupling by network simplex.

    With ``u`` the row marginals are equalities (transportation polytope).
    Otherwise rows obey ``P 1 <= gamma`` (default 1), encoded with a zero-cost
    slack column absorbing the unused row capacity.
    """
    C = _as_cost(C)
    n, m = C.shape
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (m,):
        raise ValueError(f"v has shape {v.shape}, expected ({m},)")
    if u is not None:
        u = np.asarray(u, dtype=np.float64)
        if u.shape != (n,):
            raise ValueError(f"u has shape {u.shape}, expected ({n},)")
        return CouplingMatrix(transport_simplex(C, u, v), None, "exact_lp")
    gamma = 1.0 if gamma is None else float(gamma)
    check_gamma(gamma, n)
    slack = n * gamma - v.sum()
    aug = np.hstack([C, np.zeros((n, 1))])
    x = transport_simplex(aug, np.full(n, gamma), np.append(v, max(slack, 0.0)))
    return CouplingMatrix(x[:, :m].copy(), gamma, "exact_lp")


# ----------------------------------------------------------------------------


def hungarian(C):
    """Minimum-cost perfect matching; rectangular input is zero-padded to square.

    Returns ``(assignment, cost)`` where ``assignment[i]`` is the column for
    row i of the padded matrix and ``cost`` sums the original entries that are
    matched (padding costs nothing).
    """
    C = _as_cost(C)
    n0, m0 = C.shape
    n = max(n0, m0)
    a = np.zeros((n, n))
    a[:n0, :m0] = C
    inf = float("inf")
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    p = np.zeros(n + 1, dtype=int)  # p[j]: row matched to column j (1-based)
    way = np.zeros(n + 1, dtype=int)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(n + 1, inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            free = ~used[1:]
            cur = a[i0 - 1] - u[i0] - v[1:]
            better = free & (cur < minv[1:])
            minv[1:][better] = cur[better]
            way[1:][better] = j0
            cand = np.where(free, minv[1:], inf)
            j1 = int(np.argmin(cand)) + 1
            delta = cand[j1 - 1]
            u[p[used]] += delta
            v[used] -= delta
            minv[~used] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    assignment = np.zeros(n, dtype=int)
    for j in range(1, n + 1):
        assignment[p[j] - 1] = j - 1
    cost = 0.0
    for i in range(n0):
        if assignment[i] < m0:
            cost += C[i, assignment[i]]
    return assignment, cost


def kl_marginal(p, u, floor: float = 1e-12) -> float:
    """KL(p || u) with 0 log 0 = 0 and u clamped below at ``floor``."""
    p = np.asarray(p, dtype=np.float64)
    u = np.maximum(np.asarray(u, dtype=np.float64), floor)
    nz = p > 0
    return float(np.sum(p[nz] * np.log(p[nz] / u[nz])))


def kl_marginal_grad(p, u, floor: float = 1e-12) -> np.ndarray:
    """Gradient of ``kl_marginal`` with respect to u."""
    p = np.asarray(p, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)
    return np.where(u >= floor, -p / np.maximum(u, floor), 0.0)
