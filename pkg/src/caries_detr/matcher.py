"""Bipartite matching between queries and ground-truth boxes."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .boxes import cxcywh_to_xyxy, pairwise_iou_giou

COST_CLASS = 2.0
COST_L1 = 5.0
COST_GIOU = 2.0


@dataclass
class MatchResult:
    pairs: list[tuple[int, int]]
    unmatched: list[int] = field(default_factory=list)
    cost: float = 0.0


def match_cost(probs: np.ndarray, boxes: np.ndarray, gt_boxes: np.ndarray, gt_classes: np.ndarray) -> np.ndarray:
    """[K, M] cost: -2 p_target + 5 L1 + 2 (1 - GIoU), boxes in cxcywh."""
    probs = np.asarray(probs, dtype=np.float64)
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    gt_classes = np.asarray(gt_classes, dtype=np.int64).reshape(-1)
    if gt_boxes.shape[0] == 0:
        return np.zeros((boxes.shape[0], 0))
    p_target = probs[:, gt_classes]
    l1 = np.abs(boxes[:, None, :] - gt_boxes[None, :, :]).sum(axis=-1)
    _, giou = pairwise_iou_giou(cxcywh_to_xyxy(boxes), cxcywh_to_xyxy(gt_boxes))
    return -COST_CLASS * p_target + COST_L1 * l1 + COST_GIOU * (1.0 - giou)


def _solve(a: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Shortest-augmenting-path assignment for an [n, m] matrix with n <= m.

    Returns (col assigned to each row, row potentials, col potentials).
    """
    n, m = a.shape
    inf = np.inf
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    p = np.zeros(m + 1, dtype=np.int64)  # p[j]: row (1-based) owning column j, 0 = free
    way = np.zeros(m + 1, dtype=np.int64)
    cost = np.zeros((n + 1, m + 1))
    cost[1:, 1:] = a
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(m + 1, inf)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            free = ~used
            free[0] = False
            cur = cost[i0] - u[i0] - v
            better = free & (cur < minv)
            minv[better] = cur[better]
            way[better] = j0
            cand = np.where(free, minv, inf)
            j1 = int(np.argmin(cand))
            delta = cand[j1]
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
    assign = np.full(n, -1, dtype=np.int64)
    for j in range(1, m + 1):
        if p[j]:
            assign[p[j] - 1] = j - 1
    return assign, u[1:], v[1:]


def _optimal_cost(cost_qg: np.ndarray) -> tuple[float, np.ndarray]:
    if cost_qg.shape[1] == 0:
        return 0.0, np.zeros(0, dtype=np.int64)
    assign, _, _ = _solve(cost_qg.T)
    return float(cost_qg[assign, np.arange(cost_qg.shape[1])].sum()), assign


def hungarian(cost: np.ndarray) -> MatchResult:
    """Minimum-cost assignment of every gt column to a distinct query row.

    Among equal-cost optima, the lexicographically smallest sorted pair
    list is returned.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ValueError(f"cost matrix must be 2-d, got shape {cost.shape}")
    k, m = cost.shape
    if m == 0:
        return MatchResult([], list(range(k)), 0.0)
    if m > k:
        raise ValueError(f"more ground truths ({m}) than queries ({k})")
    if not np.all(np.isfinite(cost)):
        raise ValueError("cost matrix has non-finite entries")

    assign_g, u_g, v_q = _solve(cost.T)  # rows = gts, cols = queries
    best = float(cost[assign_g, np.arange(m)].sum())
    tol = 1e-9 * (1.0 + np.abs(cost).max())
    reduced = cost - u_g[None, :] - v_q[:, None]
    tight = reduced <= tol

    # greedy lexicographic tie-break; only tight edges can sit in an optimum
    current = {int(assign_g[g]): g for g in range(m)}  # query -> gt
    fixed_q: list[int] = []
    fixed_g: list[int] = []
    fixed_cost = 0.0
    for _ in range(m):
        chosen = None
        for q in range(k):
            if q in fixed_q:
                continue
            for g in range(m):
                if g in fixed_g or not tight[q, g]:
                    continue
                if current.get(q) == g:
                    chosen = (q, g)
                    break
                rows = [r for r in range(k) if r not in fixed_q and r != q]
                cols = [c for c in range(m) if c not in fixed_g and c != g]
                rest, sub_assign = _optimal_cost(cost[np.ix_(rows, cols)])
                if fixed_cost + cost[q, g] + rest <= best + tol:
                    chosen = (q, g)
                    current = dict(zip(fixed_q, fixed_g))
                    current[q] = g
                    for ci, ri in zip(cols, sub_assign):
                        current[rows[ri]] = ci
                    break
            if chosen is not None:
                break
        q, g = chosen
        fixed_q.append(q)
        fixed_g.append(g)
        fixed_cost += cost[q, g]
    pairs = sorted(zip(fixed_q, fixed_g))
    matched = set(fixed_q)
    return MatchResult(pairs, [q for q in range(k) if q not in matched],
                       float(sum(cost[q, g] for q, g in pairs)))
