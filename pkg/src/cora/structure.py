"""Query permutation by optimal one-to-one matching of source and target
attention queries."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import cosine_matrix


@dataclass(frozen=True)
class PermutationPlan:
    pi: np.ndarray
    beta: float
    cost_total: float

    def __post_init__(self):
        pi = np.asarray(self.pi)
        if not np.array_equal(np.sort(pi), np.arange(len(pi))):
            raise ValueError("pi is not a permutation")

    @property
    def is_identity(self) -> bool:
        return bool(np.array_equal(self.pi, np.arange(len(self.pi))))

    def inverse(self) -> "PermutationPlan":
        inv = np.empty_like(self.pi)
        inv[self.pi] = np.arange(len(self.pi))
        return PermutationPlan(inv, self.beta, self.cost_total)


def cost_sa(Q_S, Q_T) -> np.ndarray:
    """Source-alignment cost ``1 - cos(q_s[i], q_t[j])``."""
    if np.shape(Q_S) != np.shape(Q_T):
        raise ValueError(f"query shapes differ: {np.shape(Q_S)} vs {np.shape(Q_T)}")
    return 1.0 - cosine_matrix(Q_S, Q_T)


def cost_tc(n: int) -> np.ndarray:
    """Target-consistency cost ``sqrt(|i - j|)`` over row-major token order."""
    if n < 1:
        raise ValueError("n must be >= 1")
    idx = np.arange(n)
    return np.sqrt(np.abs(idx[:, None] - idx[None, :]).astype(np.float64))


def normalize(C) -> np.ndarray:
    """Min-max rescale to [0, 1]; a constant matrix maps to zeros."""
    C = np.asarray(C, dtype=np.float64)
    lo, hi = C.min(), C.max()
    if hi - lo <= 0:
        return np.zeros_like(C)
    return (C - lo) / (hi - lo)


def blend_costs(C_SA, C_TC, beta: float) -> np.ndarray:
    if not 0.0 <= beta <= 1.0:
        raise ValueError("beta must lie in [0, 1]")
    return (1.0 - beta) * normalize(C_SA) + beta * normalize(C_TC)


def assignment_cost(C, pi) -> float:
    """Sum of ``C[n, pi[n]]`` accumulated left to right."""
    total = 0.0
    for n, j in enumerate(pi):
        total += float(C[n, j])
    return total


def linear_assignment(C) -> np.ndarray:
    """Minimum-cost perfect matching of a square matrix; returns ``pi`` with
    row ``n`` assigned to column ``pi[n]``.

    Shortest augmenting path with row/column potentials (Jonker-Volgenant /
    Kuhn-Munkres family), O(n^3). Rows are inserted in increasing order; at
    each Dijkstra step the free column with the smallest reduced distance is
    taken, ties resolved toward the smaller column index.
    """
    C = np.asarray(C, dtype=np.float64)
    if C.ndim != 2 or C.shape[0] != C.shape[1]:
        raise ValueError(f"cost matrix must be square, got {C.shape}")
    if not np.all(np.isfinite(C)):
        raise ValueError("cost matrix has non-finite entries")
    n = C.shape[0]
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    p = np.zeros(n + 1, dtype=np.int64)  # p[j]: row (1-based) holding column j
    way = np.zeros(n + 1, dtype=np.int64)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(n + 1, np.inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            free = ~used[1:]
            cur = C[i0 - 1] - u[i0] - v[1:]
            better = free & (cur < minv[1:])
            minv[1:][better] = cur[better]
            way[1:][better] = j0
            cand = np.where(free, minv[1:], np.inf)
            j1 = int(np.argmin(cand)) + 1
            delta = cand[j1 - 1]
            u[p[used]] += delta
            v[used] -= delta
            minv[1:][free] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    pi = np.empty(n, dtype=np.int64)
    pi[p[1:] - 1] = np.arange(n)
    return pi


def hungarian(C, beta: float = float("nan")) -> PermutationPlan:
    pi = linear_assignment(C)
    return PermutationPlan(pi, beta, assignment_cost(np.asarray(C, dtype=np.float64), pi))


def plan_alignment(Q_S, Q_T, beta: float) -> tuple[PermutationPlan, np.ndarray]:
    """Blend the two costs for one attention block and solve the matching.
    Returns the plan and the blended cost matrix."""
    C = blend_costs(cost_sa(Q_S, Q_T), cost_tc(np.shape(Q_T)[0]), beta)
    return hungarian(C, beta), C


def permute_queries(Q_T, plan: PermutationPlan) -> np.ndarray:
    Q_T = np.asarray(Q_T)
    if len(plan.pi) != Q_T.shape[0]:
        raise ValueError("plan length does not match the number of queries")
    return Q_T[plan.pi]
