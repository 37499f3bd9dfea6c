"""Query-to-instance assignment and the base detection loss.

The matching cost for query q and instance i is

    1 * (-softmax_prob_q[class_i]) + 5 * L1(box_q, target_i)

over the normalized 10-d box rows; velocity enters through the box vector but
attributes never enter the cost.  ``hungarian`` returns the minimum-total-cost
assignment of min(N_q, N) pairs; among equal-cost optima it returns the
lexicographically smallest pair list.  The inner minimum-cost solves use
scipy's exact rectangular assignment solver; the tie canonicalization, the
padding semantics and the loss live here, and the test suite checks totals
against exhaustive permutation search.

The base loss over one scene, normalized by max(N, 1):

    sum_matched(CE_class + CE_attribute + 5 * L1) + 0.1 * sum_unmatched CE_no_object
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import autodiff as ad
from .autodiff import Tensor
from .codec import regression_targets
from .scene import Geometry, GtScene

__all__ = [
    "CostMatrix", "Assignment", "match_cost", "hungarian", "perception_loss",
    "NO_OBJECT", "CLASS_WEIGHT", "BOX_WEIGHT", "NO_OBJECT_WEIGHT",
]

NO_OBJECT = 10            # index of the no-object class among the 11 logits
CLASS_WEIGHT = 1.0
BOX_WEIGHT = 5.0
NO_OBJECT_WEIGHT = 0.1


@dataclass(frozen=True)
class CostMatrix:
    costs: np.ndarray             # (N_q, N) combined
    class_component: np.ndarray   # (N_q, N)
    box_component: np.ndarray     # (N_q, N)


@dataclass(frozen=True)
class Assignment:
    """Injective query->instance pairs, sorted by query index."""

    pairs: tuple[tuple[int, int], ...]

    def matched_queries(self):
        return [q for q, _ in self.pairs]

    def unmatched_queries(self, n_queries: int):
        used = {q for q, _ in self.pairs}
        return [q for q in range(n_queries) if q not in used]


def match_cost(class_logits: np.ndarray, boxes: np.ndarray, scene: GtScene,
               geometry: Geometry, class_weight: float = CLASS_WEIGHT,
               box_weight: float = BOX_WEIGHT) -> CostMatrix:
    """Cost matrix between N_q predictions and the scene's N instances."""
    logits = np.asarray(class_logits, dtype=np.float64)
    boxes = np.asarray(boxes, dtype=np.float64)
    if logits.ndim != 2 or boxes.ndim != 2 or logits.shape[0] != boxes.shape[0]:
        raise ValueError(
            f"match_cost: logits {logits.shape} and boxes {boxes.shape} disagree")
    n = len(scene.instances)
    m = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(m)
    probs = e / e.sum(axis=1, keepdims=True)
    class_ids = [inst.class_id for inst in scene.instances]
    class_cost = -probs[:, class_ids] if n else np.zeros((logits.shape[0], 0))
    targets = regression_targets(scene.instances, geometry)
    box_cost = np.abs(boxes[:, None, :] - targets[None, :, :]).sum(axis=2)
    total = class_weight * class_cost + box_weight * box_cost
    return CostMatrix(costs=total, class_component=class_cost,
                      box_component=box_cost)


def _lsa_total(costs: np.ndarray) -> float:
    """Exact minimum total of a rectangular assignment (full min-side)."""
    if costs.size == 0 or 0 in costs.shape:
        return 0.0
    r, c = linear_sum_assignment(costs)
    return math.fsum(costs[i, j] for i, j in zip(r, c))


def hungarian(costs, canonical: bool = True) -> Assignment:
    """Minimum-cost assignment; optionally canonicalized under ties.

    With ``canonical`` (the contract default) ties are broken toward the
    lexicographically smallest pair list: matched pairs are fixed greedily in
    query order, preferring a match over a skip and the smallest instance
    index among choices that still reach the optimal total.  The training hot
    path passes canonical=False; real-valued costs make ties measure-zero
    there and the direct solver is already deterministic.
    """
    c = costs.costs if isinstance(costs, CostMatrix) else np.asarray(costs, dtype=np.float64)
    if c.ndim != 2:
        raise ValueError(f"hungarian: expected a 2-D cost matrix, got {c.shape}")
    if not np.isfinite(c).all():
        raise ValueError("hungarian: non-finite entries in the cost matrix")
    nq, n = c.shape
    k = min(nq, n)
    if k == 0:
        return Assignment(pairs=())
    rows, cols = linear_sum_assignment(c)
    if not canonical:
        order = np.argsort(rows)
        return Assignment(pairs=tuple(
            (int(rows[i]), int(cols[i])) for i in order))

    best = math.fsum(c[i, j] for i, j in zip(rows, cols))
    tol = 1e-9 * (1.0 + abs(best))
    pairs: list[tuple[int, int]] = []
    avail = list(range(n))
    fixed = 0.0
    for q in range(nq):
        if len(pairs) == k:
            break
        rest_rows = np.arange(q + 1, nq)
        chosen = None
        for pos, i in enumerate(avail):
            rest_cols = avail[:pos] + avail[pos + 1:]
            need = k - len(pairs) - 1
            if min(len(rest_rows), len(rest_cols)) < need:
                continue
            completion = _lsa_total(c[np.ix_(rest_rows, rest_cols)])
            if fixed + c[q, i] + completion <= best + tol:
                chosen = (pos, i)
                break
        if chosen is not None:
            pos, i = chosen
            pairs.append((q, int(i)))
            fixed += c[q, i]
            avail.pop(pos)
    assert len(pairs) == k, "canonical refinement lost the optimal matching"
    return Assignment(pairs=tuple(pairs))


def perception_loss(class_logits: Tensor, attr_logits: Tensor, boxes: Tensor,
                    assignment: Assignment, scene: GtScene,
                    geometry: Geometry) -> Tensor:
    """Base detection loss for one scene as a scalar tensor.

    ``class_logits`` is (N_q, 11), ``attr_logits`` (N_q, 2), ``boxes``
    (N_q, 10).  Matched queries pay class CE, attribute CE and weighted L1 on
    the box row; unmatched queries pay down-weighted no-object CE.
    """
    nq = class_logits.shape[0]
    n = len(scene.instances)
    dtype = class_logits.dtype
    cls_targets = np.full(nq, NO_OBJECT, dtype=np.int64)
    cls_weights = np.full(nq, NO_OBJECT_WEIGHT)
    attr_weights = np.zeros(nq)
    attr_targets = np.zeros(nq, dtype=np.int64)
    for q, i in assignment.pairs:
        inst = scene.instances[i]
        cls_targets[q] = inst.class_id
        cls_weights[q] = 1.0
        attr_weights[q] = 1.0
        attr_targets[q] = inst.attribute_id
    inv_n = 1.0 / max(n, 1)

    loss = ad.cross_entropy(class_logits, cls_targets, weights=cls_weights,
                            reduction="sum")
    if assignment.pairs:
        loss = ad.add(loss, ad.cross_entropy(
            attr_logits, attr_targets, weights=attr_weights, reduction="sum"))
        q_idx = [q for q, _ in assignment.pairs]
        i_idx = [i for _, i in assignment.pairs]
        targets = regression_targets(
            [scene.instances[i] for i in i_idx], geometry).astype(dtype)
        diff = ad.sub(ad.take_rows(boxes, q_idx), Tensor(targets))
        loss = ad.add(loss, ad.scale(ad.sum_all(ad.absolute(diff)), BOX_WEIGHT))
    return ad.scale(loss, inv_n)
