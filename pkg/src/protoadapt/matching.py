"""Assignment problems: example-to-query and query-to-target matching.

Prototype construction matches each reference mask independently to its
best-IoU predicted mask (many-to-one allowed). The training loss instead
needs an exclusive one-to-one matching between queries and ground-truth
segments, solved exactly with the Hungarian algorithm on negative IoU.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import ConfigError
from .masks import iou_matrix


@dataclass(frozen=True)
class ExampleAssignment:
    example_index: int
    query_index: int
    iou: float
    low_confidence: bool


@dataclass(frozen=True)
class TargetAssignment:
    """Per-query class targets (void = num_classes) and loss weights."""

    class_target: np.ndarray  # (N,) int64
    weight: np.ndarray        # (N,) float64
    matched_pairs: list[tuple[int, int]]  # (query, gt) pairs that got a class


def match_examples(example_masks: list[np.ndarray],
                   predicted: list[np.ndarray],
                   min_iou: float = 0.0) -> list[ExampleAssignment]:
    """Best-IoU query for each example mask, independently per example.

    Ties go to the lowest query index. Assignments below ``min_iou`` are
    flagged low-confidence but still returned.
    """
    if not predicted:
        raise ConfigError("match_examples needs at least one predicted mask")
    ious = iou_matrix(example_masks, predicted)
    out = []
    for e in range(len(example_masks)):
        q = int(np.argmax(ious[e]))
        best = float(ious[e, q])
        out.append(ExampleAssignment(e, q, best, best < min_iou))
    return out


def _solve_cost(cost: np.ndarray) -> float:
    rows, cols = linear_sum_assignment(cost)
    return float(cost[rows, cols].sum())


def hungarian(cost: np.ndarray) -> list[tuple[int, int]]:
    """Minimum-cost assignment of min(rows, cols) pairs.

    Among equally optimal assignments, returns the lexicographically
    smallest pair list (pairs sorted by row). Ties are resolved by
    forcing candidate pairs in order and checking that an optimal
    completion still exists.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ConfigError("cost must be a 2-D matrix")
    if not np.all(np.isfinite(cost)):
        raise ConfigError("cost matrix must be finite")
    n_rows, n_cols = cost.shape
    k = min(n_rows, n_cols)
    if k == 0:
        return []

    best_total = _solve_cost(cost)
    tol = 1e-9 * max(1.0, abs(best_total))
    skipping_allowed = n_rows > n_cols

    pairs: list[tuple[int, int]] = []
    rows_left = list(range(n_rows))
    cols_left = list(range(n_cols))
    spent = 0.0
    for slot in range(k):
        need = k - slot - 1
        if skipping_allowed:
            candidates = [r for i, r in enumerate(rows_left)
                          if len(rows_left) - i - 1 >= need]
        else:
            candidates = rows_left[:1]
        placed = False
        for r in candidates:
            rows_after = [x for x in rows_left if x > r]
            for c in cols_left:
                cols_after = [x for x in cols_left if x != c]
                rest = 0.0
                if need:
                    rest = _solve_cost(cost[np.ix_(rows_after, cols_after)])
                if spent + cost[r, c] + rest <= best_total + tol:
                    pairs.append((r, c))
                    spent += cost[r, c]
                    rows_left = rows_after
                    cols_left = cols_after
                    placed = True
                    break
            if placed:
                break
        if not placed:  # float-tolerance fallback; should not happen
            raise RuntimeError("hungarian tie-break failed to place a pair")
    return pairs


def assign_targets(predicted: list[np.ndarray],
                   gt: list[tuple[np.ndarray, int]],
                   num_classes: int,
                   void_weight: float = 0.1) -> TargetAssignment:
    """Class targets for every query via exclusive bipartite matching.

    Queries matched to a ground-truth segment (at positive IoU) take its
    class with weight 1.0; everything else is void with ``void_weight``.
    Matched pairs with zero IoU are discarded: supervising a query with
    a segment it does not overlap carries no signal.
    """
    n = len(predicted)
    targets = np.full(n, num_classes, dtype=np.int64)
    weights = np.full(n, float(void_weight), dtype=np.float64)
    matched: list[tuple[int, int]] = []
    if gt:
        ious = iou_matrix(predicted, [m for m, _ in gt])
        for q, g in hungarian(-ious):
            if ious[q, g] > 0.0:
                cid = gt[g][1]
                if not 0 <= cid < num_classes:
                    raise ConfigError(f"GT class id {cid} outside [0, {num_classes})")
                targets[q] = cid
                weights[q] = 1.0
                matched.append((q, g))
    return TargetAssignment(targets, weights, matched)
