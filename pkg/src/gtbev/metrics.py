"""nuScenes-style detection metrics with exactly reproducible arithmetic.

Every reduction is a math.fsum (correctly rounded, order independent) over
64-bit values, so two runs over the same inputs produce bit-identical
reports and the test suite can compare against its brute-force evaluator
with plain equality.

The matching rule: predictions of one class are pooled across scenes and
walked in descending score (ties keep input order: scenes in ground-truth
file order, then list position).  Each prediction claims the nearest
still-unclaimed ground-truth instance of its class in its own scene, at
planar center distance strictly below the threshold; distance ties go to the
smallest instance index.  Claimed pairs are true positives, the rest false
positives.

AP: precision of the earliest walk prefix whose recall reaches r, for r on
the grid {0.10, 0.11, ..., 1.00}; average max(p - 0.1, 0) over the grid and
divide by 0.9, which sends a perfect detector to exactly 1.  A class with no
ground truth and no predictions drops out of every mean; with predictions
but no ground truth it scores 0.

True-positive errors use the 2 m threshold.  Yaw error is the smallest
rotation between headings, evaluated modulo 180 degrees for barriers and
skipped for traffic cones; velocity and attribute errors skip both barriers
and traffic cones.  A class with no true positives contributes the worst
case 1.0 to each of its error means.

NDS = (5 * mAP + sum of max(1 - error, 0) over the five mean errors) / 10.
"""

from __future__ import annotations

import math
from bisect import bisect_left
from dataclasses import dataclass
from typing import Mapping, Sequence

from .scene import CLASS_NAMES, LONG_TAIL_CLASSES, GtScene, PredictedBox

__all__ = [
    "EVAL_THRESHOLDS", "TP_THRESHOLD", "ERROR_KEYS", "MetricsReport",
    "greedy_match", "average_precision", "class_tp_errors", "nds_score",
    "evaluate", "evaluate_files",
]

EVAL_THRESHOLDS = (0.5, 1.0, 2.0, 4.0)
TP_THRESHOLD = 2.0
ERROR_KEYS = ("ate", "ase", "aoe", "ave", "aae")
# recall grid: {0.10, 0.11, ..., 1.00}
_RECALL_GRID = tuple(i / 100.0 for i in range(10, 101))


@dataclass(frozen=True)
class MetricsReport:
    per_class_ap: dict            # class name -> {threshold: AP}
    class_ap: dict                # class name -> mean AP over thresholds
    per_class_tp: dict            # class name -> {error key: value | None}
    mean_ap: float
    mean_errors: dict             # error key -> mean over contributing classes
    nds: float
    long_tail_map: float
    eligible: tuple               # class names with any GT or predictions
    n_gt: int
    n_pred: int
    n_tp: int                     # true positives at the 2 m threshold


def _planar(a, b) -> float:
    return math.hypot(a[0] - b[0], a[1] - b[1])


def greedy_match(scenes: Sequence[GtScene],
                 preds_by_scene: Sequence[Sequence[PredictedBox]],
                 class_id: int, threshold: float):
    """Match one class at one threshold.

    Returns (flags, claims): one TP/FP flag per pooled prediction in walk
    order, and one (scene_index, instance_index, pred_index) triple per TP.
    """
    pooled = []
    for s, preds in enumerate(preds_by_scene):
        for p, pred in enumerate(preds):
            if pred.class_id == class_id:
                pooled.append((s, p, pred))
    pooled.sort(key=lambda entry: -entry[2].score)
    flags: list[bool] = []
    claims: list[tuple[int, int, int]] = []
    taken: set[tuple[int, int]] = set()
    for s, p, pred in pooled:
        best = None
        for g, gt in enumerate(scenes[s].instances):
            if gt.class_id != class_id or (s, g) in taken:
                continue
            d = _planar(pred.center, gt.center)
            if d < threshold and (best is None or (d, g) < best):
                best = (d, g)
        if best is None:
            flags.append(False)
        else:
            flags.append(True)
            taken.add((s, best[1]))
            claims.append((s, best[1], p))
    return flags, claims


def average_precision(flags: Sequence[bool], n_gt: int) -> float:
    """AP of one class at one threshold from its ordered TP/FP flags."""
    if n_gt == 0:
        return 0.0
    recalls: list[float] = []
    precisions: list[float] = []
    tp = 0
    for k, flag in enumerate(flags, start=1):
        tp += 1 if flag else 0
        recalls.append(tp / n_gt)
        precisions.append(tp / k)
    values = []
    for r in _RECALL_GRID:
        # recalls are non-decreasing, so the earliest prefix reaching r is a
        # bisection; past the final recall the precision is 0
        k = bisect_left(recalls, r)
        p = precisions[k] if k < len(recalls) else 0.0
        values.append(max(p - 0.1, 0.0))
    return math.fsum(values) / len(values) / 0.9


def class_tp_errors(scenes: Sequence[GtScene],
                    preds_by_scene: Sequence[Sequence[PredictedBox]],
                    claims, class_id: int) -> dict:
    """Five error means for one class from its 2 m claims.

    Inapplicable metrics map to None; zero claims put each applicable metric
    at the worst case 1.0.
    """
    name = CLASS_NAMES[class_id]
    skip = {
        "aoe": name == "traffic_cone",
        "ave": name in ("barrier", "traffic_cone"),
        "aae": name in ("barrier", "traffic_cone"),
    }
    out: dict[str, float | None] = {}
    ate, ase, aoe, ave, acc = [], [], [], [], []
    period = math.pi if name == "barrier" else 2.0 * math.pi
    for s, g, p in claims:
        gt = scenes[s].instances[g]
        pred = preds_by_scene[s][p]
        ate.append(_planar(pred.center, gt.center))
        inter = (min(pred.size[0], gt.size[0])
                 * min(pred.size[1], gt.size[1])
                 * min(pred.size[2], gt.size[2]))
        v1 = pred.size[0] * pred.size[1] * pred.size[2]
        v2 = gt.size[0] * gt.size[1] * gt.size[2]
        ase.append(1.0 - inter / (v1 + v2 - inter))
        d = (pred.yaw - gt.yaw) % period
        aoe.append(min(d, period - d))
        ave.append(math.hypot(pred.velocity[0] - gt.velocity[0],
                              pred.velocity[1] - gt.velocity[1]))
        acc.append(1.0 if pred.attribute_id == gt.attribute_id else 0.0)
    n = len(claims)
    for key, vals in (("ate", ate), ("ase", ase), ("aoe", aoe), ("ave", ave)):
        if skip.get(key, False):
            out[key] = None
        elif n == 0:
            out[key] = 1.0
        else:
            out[key] = math.fsum(vals) / n
    if skip["aae"]:
        out["aae"] = None
    elif n == 0:
        out["aae"] = 1.0
    else:
        out["aae"] = 1.0 - math.fsum(acc) / n
    return out


def nds_score(mean_ap: float, errors: Sequence[float]) -> float:
    """Composite score from mAP and the five mean errors, each floored at 0."""
    if len(errors) != 5:
        raise ValueError(f"nds_score: expected 5 error terms, got {len(errors)}")
    return (5.0 * mean_ap
            + math.fsum(max(1.0 - e, 0.0) for e in errors)) / 10.0


def evaluate(scenes: Sequence[GtScene],
             predictions: Mapping[str, Sequence[PredictedBox]]) -> MetricsReport:
    """Score predictions against ground truth over a whole dataset.

    Scene id sets must agree exactly; scenes are processed in the order given
    here, which also fixes the tie order of equal-score predictions.
    """
    scene_ids = [s.scene_id for s in scenes]
    missing = sorted(set(scene_ids) - set(predictions.keys()))
    extra = sorted(set(predictions.keys()) - set(scene_ids))
    if missing or extra:
        raise ValueError(
            "evaluate: scene ids disagree; "
            f"missing from predictions: {missing}, unknown: {extra}")
    preds_by_scene = [list(predictions[sid]) for sid in scene_ids]

    n_gt_class = [0] * len(CLASS_NAMES)
    for scene in scenes:
        for inst in scene.instances:
            n_gt_class[inst.class_id] += 1
    n_pred_class = [0] * len(CLASS_NAMES)
    for preds in preds_by_scene:
        for pred in preds:
            n_pred_class[pred.class_id] += 1
    eligible = [c for c in range(len(CLASS_NAMES))
                if n_gt_class[c] > 0 or n_pred_class[c] > 0]

    per_class_ap: dict = {}
    class_ap: dict = {}
    per_class_tp: dict = {}
    n_tp = 0
    for c in eligible:
        name = CLASS_NAMES[c]
        row = {}
        for t in EVAL_THRESHOLDS:
            flags, claims = greedy_match(scenes, preds_by_scene, c, t)
            row[t] = average_precision(flags, n_gt_class[c])
            if t == TP_THRESHOLD:
                per_class_tp[name] = class_tp_errors(
                    scenes, preds_by_scene, claims, c)
                n_tp += len(claims)
        per_class_ap[name] = row
        class_ap[name] = math.fsum(row[t] for t in EVAL_THRESHOLDS) / len(EVAL_THRESHOLDS)

    if eligible:
        mean_ap = math.fsum(class_ap[CLASS_NAMES[c]] for c in eligible) / len(eligible)
    else:
        mean_ap = 0.0
    mean_errors = {}
    for key in ERROR_KEYS:
        vals = [per_class_tp[CLASS_NAMES[c]][key] for c in eligible
                if per_class_tp[CLASS_NAMES[c]][key] is not None]
        mean_errors[key] = math.fsum(vals) / len(vals) if vals else 1.0
    nds = nds_score(mean_ap, [mean_errors[k] for k in ERROR_KEYS])
    lt = [class_ap[name] for name in LONG_TAIL_CLASSES if name in class_ap]
    long_tail = math.fsum(lt) / len(lt) if lt else 0.0

    return MetricsReport(
        per_class_ap=per_class_ap, class_ap=class_ap,
        per_class_tp=per_class_tp, mean_ap=mean_ap,
        mean_errors=mean_errors, nds=nds, long_tail_map=long_tail,
        eligible=tuple(CLASS_NAMES[c] for c in eligible),
        n_gt=sum(n_gt_class), n_pred=sum(n_pred_class), n_tp=n_tp)


def evaluate_files(pred_path, gt_path) -> MetricsReport:
    """Schema-checked evaluation of a prediction file against a scene file."""
    from .scene_io import load_predictions, load_scenes

    scenes = load_scenes(gt_path)
    predictions = load_predictions(pred_path)
    return evaluate(scenes, predictions)
