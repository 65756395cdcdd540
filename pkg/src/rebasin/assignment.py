"""Linear assignment and Sinkhorn projection.

The LAP solver is a shortest-augmenting-path (Jonker-Volgenant style)
implementation on dense matrices. After solving, optimal assignments are
exactly the perfect matchings on the zero-reduced-cost edges, which lets us
return the lexicographically smallest optimum deterministically.
"""
from __future__ import annotations

from typing import Sequence

import numpy as np

from . import autodiff as ad
from .weights import PermutationSequence

SINKHORN_TAU = 1.0
SINKHORN_ITERS = 20
SINKHORN_TOL = 1e-5
SINKHORN_MAX_ITERS = 1000


def _lap_min(cost: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Minimum-cost assignment; returns (col4row, row duals, col duals)."""
    n = cost.shape[0]
    u = np.zeros(n)
    v = np.zeros(n)
    col4row = np.full(n, -1, dtype=np.int64)
    row4col = np.full(n, -1, dtype=np.int64)
    cols = np.arange(n)
    for cur in range(n):
        shortest = np.full(n, np.inf)
        path = np.full(n, -1, dtype=np.int64)
        seen_rows = np.zeros(n, dtype=bool)
        seen_cols = np.zeros(n, dtype=bool)
        i, min_val, sink = cur, 0.0, -1
        while sink < 0:
            seen_rows[i] = True
            reduced = min_val + cost[i] - u[i] - v
            better = ~seen_cols & (reduced < shortest)
            path[better] = i
            shortest[better] = reduced[better]
            open_cols = cols[~seen_cols]
            vals = shortest[open_cols]
            best = vals.min()
            if not np.isfinite(best):
                raise ValueError("cost matrix is infeasible")
            ties = open_cols[vals == best]
            free = ties[row4col[ties] < 0]
            j = int(free[0]) if len(free) else int(ties[0])
            min_val = best
            seen_cols[j] = True
            if row4col[j] < 0:
                sink = j
            else:
                i = int(row4col[j])
        u[cur] += min_val
        others = seen_rows.copy()
        others[cur] = False
        u[others] += min_val - shortest[col4row[others]]
        v[seen_cols] -= min_val - shortest[seen_cols]
        j = sink
        while True:
            i = int(path[j])
            row4col[j] = i
            col4row[i], j = j, int(col4row[i])
            if i == cur:
                break
    return col4row, u, v


def _alt_path(tight: list[np.ndarray], match: np.ndarray, owner: np.ndarray,
              start_row: int, target_col: int, banned_col: int,
              blocked_rows: np.ndarray) -> list[tuple[int, int]] | None:
    """BFS for an alternating path that re-seats ``start_row`` and ends on ``target_col``.

    Returns the (row, new column) moves along the path, or None.
    """
    prev = {}
    frontier = [start_row]
    visited_cols = {banned_col}
    while frontier:
        nxt = []
        for r in frontier:
            for c in tight[r]:
                c = int(c)
                if c in visited_cols:
                    continue
                if c == target_col:
                    prev[c] = r
                    return _unwind(prev, match, c, start_row)
                if blocked_rows[owner[c]]:
                    continue
                visited_cols.add(c)
                prev[c] = r
                nxt.append(int(owner[c]))
        frontier = nxt
    return None


def _unwind(prev, match, col, start_row):
    steps = []
    while True:
        r = prev[col]
        steps.append((r, col))
        if r == start_row:
            return steps
        col = int(match[r])


def _lexicographic_optimum(tight_mask: np.ndarray, match: np.ndarray) -> np.ndarray:
    """Lexicographically smallest perfect matching on the tight-edge graph."""
    n = len(match)
    match = match.copy()
    owner = np.empty(n, dtype=np.int64)
    owner[match] = np.arange(n)
    tight = [np.flatnonzero(tight_mask[i]) for i in range(n)]
    fixed = np.zeros(n, dtype=bool)
    for i in range(n):
        for j in tight[i]:
            j = int(j)
            if j == match[i]:
                break
            r = int(owner[j])
            if fixed[r]:
                continue
            # move i -> j; row r must then reach i's old column through unfixed rows
            old = int(match[i])
            blocked = fixed.copy()
            blocked[i] = True
            path = _alt_path(tight, match, owner, r, old, j, blocked)
            if path is None:
                continue
            match[i] = j
            owner[j] = i
            for row, col in path:
                match[row] = col
                owner[col] = row
            break
        fixed[i] = True
    return match


def solve_lap_max(Q) -> np.ndarray:
    """Permutation ``p`` maximising ``sum_i Q[i, p[i]]``, ties broken lexicographically."""
    Q = np.asarray(Q, dtype=np.float64)
    if Q.ndim != 2 or Q.shape[0] != Q.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {Q.shape}")
    if not np.all(np.isfinite(Q)):
        raise ValueError("cost matrix has non-finite entries")
    n = Q.shape[0]
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    cost = -Q
    match, u, v = _lap_min(cost)
    reduced = cost - u[:, None] - v[None, :]
    tol = 1e-9 * (1.0 + np.abs(Q).max())
    tight = reduced <= tol
    if tight.sum() > n:
        match = _lexicographic_optimum(tight, match)
    return match


def sinkhorn_project(Q, tau: float = SINKHORN_TAU, iters: int = SINKHORN_ITERS,
                     tol: float | None = SINKHORN_TOL, max_iters: int = SINKHORN_MAX_ITERS):
    """Alternate row/column normalisation of ``exp(Q / tau)`` in log space.

    Runs ``iters`` rounds, then keeps going (up to ``max_iters``) while some
    row sum is further than ``tol`` from 1; columns are exact after every
    round. ``tol=None`` gives a fixed iteration count. Works on numpy arrays
    and autodiff tensors, with any leading batch dimensions.
    """
    if tau <= 0:
        raise ValueError("temperature must be positive")
    if iters < 1:
        raise ValueError("need at least one Sinkhorn iteration")
    tensor = isinstance(Q, ad.Tensor)
    if tensor:
        la = ad.scale(Q, 1.0 / tau)
        lse = ad.logsumexp
    else:
        la = np.asarray(Q) / tau
        if not np.all(np.isfinite(la)):
            raise ValueError("non-finite scores")
        lse = _lse
    done = 0
    while True:
        la = la - lse(la, axis=-1, keepdims=True)
        la = la - lse(la, axis=-2, keepdims=True)
        done += 1
        if done < iters:
            continue
        if tol is None or done >= max_iters:
            break
        rows = np.exp(ad._data(la)).sum(axis=-1)
        if np.abs(rows - 1).max() <= tol:
            break
    return ad.exp(la) if tensor else np.exp(la)


def _lse(x, axis, keepdims=True):
    m = x.max(axis=axis, keepdims=True)
    return np.log(np.exp(x - m).sum(axis=axis, keepdims=True)) + m


def round_stack(Qs: Sequence) -> PermutationSequence:
    """Hard projection of every matrix in the stack onto a permutation."""
    return PermutationSequence(tuple(solve_lap_max(ad._data(Q)) for Q in Qs))
