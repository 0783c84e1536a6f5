"""Communication graph, graph Laplacian and algebraic connectivity."""
from __future__ import annotations

import math
from collections import deque

import numpy as np

EPS_CONN = 1e-6


def adjacency(positions, comm_range: float) -> np.ndarray:
    """Binary symmetric adjacency: a_ij = 1 iff i != j and |p_i - p_j| <= comm_range."""
    p = np.asarray(positions, dtype=float).reshape(-1, 2)
    d2 = ((p[:, None, :] - p[None, :, :]) ** 2).sum(-1)
    a = (d2 <= comm_range * comm_range).astype(np.int64)
    np.fill_diagonal(a, 0)
    return a


def laplacian(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    return np.diag(a.sum(axis=1)) - a


def jacobi_eigenvalues(s: np.ndarray, tol: float = 1e-14, max_sweeps: int = 50) -> np.ndarray:
    """Eigenvalues of a small dense symmetric matrix by cyclic Jacobi rotations.

    Returns them in ascending order.
    """
    s = np.asarray(s, dtype=float)
    n = s.shape[0]
    if n == 1:
        return s.diagonal().copy()
    # scalar arithmetic on nested lists: for the few-robot matrices used here this
    # is much faster than numpy element access
    a = s.tolist()
    scale = max(float(np.abs(s).max()), 1e-300)
    for _ in range(max_sweeps):
        off = math.sqrt(sum(a[p][q] * a[p][q] for p in range(n - 1) for q in range(p + 1, n)))
        if off <= tol * scale:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p][q]
                if abs(apq) <= 1e-300:
                    continue
                theta = (a[q][q] - a[p][p]) / (2.0 * apq)
                t = math.copysign(1.0, theta) / (abs(theta) + math.sqrt(theta * theta + 1.0)) if theta != 0 else 1.0
                c = 1.0 / math.sqrt(t * t + 1.0)
                sn = t * c
                # A <- J^T A J on rows/cols p, q
                for row in a:
                    ap, aq = row[p], row[q]
                    row[p] = c * ap - sn * aq
                    row[q] = sn * ap + c * aq
                rp, rq = a[p], a[q]
                a[p] = [c * x - sn * y for x, y in zip(rp, rq)]
                a[q] = [sn * x + c * y for x, y in zip(rp, rq)]
    return np.sort(np.array([a[k][k] for k in range(n)]))


def lambda2(lap: np.ndarray) -> float:
    """Algebraic connectivity: second-smallest Laplacian eigenvalue."""
    lap = np.asarray(lap, dtype=float)
    if lap.shape[0] < 2:
        return 0.0
    return float(jacobi_eigenvalues(lap)[1])


def algebraic_connectivity(positions, comm_range: float) -> float:
    return lambda2(laplacian(adjacency(positions, comm_range)))


def connectivity_cost(positions, comm_range: float, eps: float = EPS_CONN) -> int:
    """1 when the team's communication graph is disconnected, else 0."""
    if len(np.asarray(positions).reshape(-1, 2)) < 2:
        return 0
    return int(algebraic_connectivity(positions, comm_range) <= eps)


def is_connected_bfs(a) -> bool:
    a = np.asarray(a)
    n = a.shape[0]
    if n == 0:
        return True
    seen = {0}
    todo = deque([0])
    while todo:
        u = todo.popleft()
        for v in np.flatnonzero(a[u]):
            v = int(v)
            if v not in seen:
                seen.add(v)
                todo.append(v)
    return len(seen) == n
