"""Minimum-cost bipartite assignment (Hungarian method, shortest augmenting paths)."""

from __future__ import annotations

import math

import numpy as np


def hungarian(cost) -> np.ndarray:
    """Solve the rectangular assignment problem for an ``n x m`` cost matrix.

    Requires ``n <= m``. Returns ``cols`` of length ``n`` such that row ``i``
    is matched to column ``cols[i]``, the columns are distinct and
    ``sum(cost[i, cols[i]])`` is minimal. Ties among equal-cost augmenting
    choices go to the lowest column index, so results are deterministic.
    """
    c = np.asarray(cost, dtype=np.float64)
    if c.ndim != 2:
        raise ValueError(f"cost must be 2-D, got shape {c.shape}")
    n, m = c.shape
    if n > m:
        raise ValueError(f"need rows <= cols, got {n}x{m}")
    if n == 0:
        return np.zeros(0, dtype=int)
    if not np.all(np.isfinite(c)):
        raise ValueError("cost matrix must be finite")

    # 1-based potentials; column 0 is the virtual source of each augmentation.
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    owner = np.zeros(m + 1, dtype=int)  # owner[j] = row (1-based) holding column j
    way = np.zeros(m + 1, dtype=int)
    for i in range(1, n + 1):
        owner[0] = i
        j0 = 0
        minv = np.full(m + 1, np.inf)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = owner[j0]
            free = ~used[1:]
            reduced = c[i0 - 1] - u[i0] - v[1:]
            better = free & (reduced < minv[1:])
            minv[1:][better] = reduced[better]
            way[1:][better] = j0
            masked = np.where(free, minv[1:], np.inf)
            j1 = int(np.argmin(masked)) + 1
            delta = masked[j1 - 1]
            u[owner[used]] += delta
            v[used] -= delta
            minv[~used] -= delta
            j0 = j1
            if owner[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            owner[j0] = owner[j1]
            j0 = j1

    cols = np.empty(n, dtype=int)
    for j in range(1, m + 1):
        if owner[j]:
            cols[owner[j] - 1] = j - 1
    return cols


def assignment_cost(cost, cols) -> float:
    """Exactly-rounded total cost of an assignment (row i -> cols[i])."""
    c = np.asarray(cost, dtype=np.float64)
    return math.fsum(float(c[i, j]) for i, j in enumerate(cols))


def l1_cost_matrix(gt, pred) -> np.ndarray:
    """Pairwise L1 distances, rows = ground truth, cols = predictions."""
    gt = np.asarray(gt, dtype=np.float64).reshape(-1, 2)
    pred = np.asarray(pred, dtype=np.float64).reshape(-1, 2)
    return np.abs(gt[:, None, :] - pred[None, :, :]).sum(-1)
