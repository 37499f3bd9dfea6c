"""Brute-force detection-metrics evaluator used as the oracle in tests.

Written independently of gtbev.metrics and kept deliberately naive: no
sorting-and-cumulating, no claimed-set bookkeeping beyond a flat list, every
precision/recall value recomputed from scratch by rescanning prefixes.  All
reductions go through math.fsum so results are correctly rounded and can be
compared to the implementation with exact equality.

Shared definitions (the contract, not implementation detail): predictions are
walked in descending score with ties kept in input order (scenes in ground
truth order, then list position); a prediction claims the nearest unclaimed
same-class ground truth instance at planar distance strictly below the
threshold, ties to the smallest instance index; AP evaluates the precision of
the earliest prefix whose recall reaches each grid point r in {0.10 ... 1.00},
then averages max(p - 0.1, 0) and divides by 0.9.
"""

import math

from gtbev.scene import CLASS_NAMES, LONG_TAIL_CLASSES

THRESHOLDS = (0.5, 1.0, 2.0, 4.0)
ERROR_KEYS = ("ate", "ase", "aoe", "ave", "aae")


def _walk_order(preds):
    """Indices of pooled predictions in descending-score stable order.

    Selection sort on purpose: repeatedly scan for the highest remaining
    score, earliest position first.
    """
    remaining = list(range(len(preds)))
    order = []
    while remaining:
        best = remaining[0]
        for i in remaining[1:]:
            if preds[i].score > preds[best].score:
                best = i
        order.append(best)
        remaining.remove(best)
    return order


def _match(scenes, preds_by_scene, class_id, threshold):
    """Flags per walked prediction plus (scene, instance, pred) claims."""
    pooled = []
    for s, preds in enumerate(preds_by_scene):
        for p, pred in enumerate(preds):
            if pred.class_id == class_id:
                pooled.append((s, p, pred))
    order = _walk_order([pred for _, _, pred in pooled])
    flags = []
    claims = []
    taken = []
    for k in order:
        s, p, pred = pooled[k]
        candidates = []
        for g, gt in enumerate(scenes[s].instances):
            if gt.class_id != class_id or (s, g) in taken:
                continue
            d = math.hypot(pred.center[0] - gt.center[0],
                           pred.center[1] - gt.center[1])
            if d < threshold:
                candidates.append((d, g))
        if candidates:
            best = candidates[0]
            for c in candidates[1:]:
                if c < best:
                    best = c
            flags.append(True)
            claims.append((s, best[1], p))
            taken.append((s, best[1]))
        else:
            flags.append(False)
    return flags, claims


def _average_precision(flags, n_gt):
    if n_gt == 0:
        return 0.0
    grid = [i / 100.0 for i in range(101) if i / 100.0 >= 0.1]
    values = []
    for r in grid:
        p = 0.0
        for k in range(1, len(flags) + 1):
            tp = sum(1 for f in flags[:k] if f)
            if tp / n_gt >= r:
                p = tp / k
                break
        values.append(max(p - 0.1, 0.0))
    return math.fsum(values) / len(values) / 0.9


def _class_errors(scenes, preds_by_scene, claims, class_id):
    name = CLASS_NAMES[class_id]
    out = {}
    for key in ERROR_KEYS:
        if key == "aoe" and name == "traffic_cone":
            out[key] = None
            continue
        if key in ("ave", "aae") and name in ("barrier", "traffic_cone"):
            out[key] = None
            continue
        if not claims:
            out[key] = 1.0
            continue
        vals = []
        for s, g, p in claims:
            gt = scenes[s].instances[g]
            pred = preds_by_scene[s][p]
            if key == "ate":
                vals.append(math.hypot(pred.center[0] - gt.center[0],
                                       pred.center[1] - gt.center[1]))
            elif key == "ase":
                inter = (min(pred.size[0], gt.size[0])
                         * min(pred.size[1], gt.size[1])
                         * min(pred.size[2], gt.size[2]))
                v1 = pred.size[0] * pred.size[1] * pred.size[2]
                v2 = gt.size[0] * gt.size[1] * gt.size[2]
                vals.append(1.0 - inter / (v1 + v2 - inter))
            elif key == "aoe":
                period = math.pi if name == "barrier" else 2.0 * math.pi
                d = (pred.yaw - gt.yaw) % period
                vals.append(min(d, period - d))
            elif key == "ave":
                vals.append(math.hypot(pred.velocity[0] - gt.velocity[0],
                                       pred.velocity[1] - gt.velocity[1]))
            elif key == "aae":
                vals.append(1.0 if pred.attribute_id == gt.attribute_id else 0.0)
        if key == "aae":
            out[key] = 1.0 - math.fsum(vals) / len(vals)
        else:
            out[key] = math.fsum(vals) / len(vals)
    return out


def oracle_report(scenes, predictions):
    """Full metrics report as a plain dict, by direct enumeration."""
    scene_ids = [s.scene_id for s in scenes]
    assert set(scene_ids) == set(predictions.keys())
    preds_by_scene = [list(predictions[sid]) for sid in scene_ids]

    n_gt_class = {c: 0 for c in range(len(CLASS_NAMES))}
    for s in scenes:
        for inst in s.instances:
            n_gt_class[inst.class_id] += 1
    n_pred_class = {c: 0 for c in range(len(CLASS_NAMES))}
    for preds in preds_by_scene:
        for p in preds:
            n_pred_class[p.class_id] += 1

    eligible = [c for c in range(len(CLASS_NAMES))
                if n_gt_class[c] > 0 or n_pred_class[c] > 0]

    per_class_ap = {}
    class_ap = {}
    per_class_tp = {}
    n_tp = 0
    for c in eligible:
        name = CLASS_NAMES[c]
        per_class_ap[name] = {}
        for t in THRESHOLDS:
            flags, claims = _match(scenes, preds_by_scene, c, t)
            per_class_ap[name][t] = _average_precision(flags, n_gt_class[c])
            if t == 2.0:
                per_class_tp[name] = _class_errors(scenes, preds_by_scene,
                                                   claims, c)
                n_tp += len(claims)
        class_ap[name] = math.fsum(per_class_ap[name][t]
                                   for t in THRESHOLDS) / len(THRESHOLDS)

    if eligible:
        mean_ap = math.fsum(class_ap[CLASS_NAMES[c]] for c in eligible) / len(eligible)
    else:
        mean_ap = 0.0

    mean_errors = {}
    for key in ERROR_KEYS:
        vals = [per_class_tp[CLASS_NAMES[c]][key] for c in eligible
                if per_class_tp[CLASS_NAMES[c]][key] is not None]
        mean_errors[key] = math.fsum(vals) / len(vals) if vals else 1.0

    nds = (5.0 * mean_ap + math.fsum(max(1.0 - mean_errors[k], 0.0)
                                     for k in ERROR_KEYS)) / 10.0

    lt = [class_ap[name] for name in LONG_TAIL_CLASSES if name in class_ap]
    long_tail = math.fsum(lt) / len(lt) if lt else 0.0

    return {
        "per_class_ap": per_class_ap,
        "class_ap": class_ap,
        "per_class_tp": per_class_tp,
        "mean_ap": mean_ap,
        "mean_errors": mean_errors,
        "nds": nds,
        "long_tail_map": long_tail,
        "eligible": [CLASS_NAMES[c] for c in eligible],
        "counts": {"n_gt": sum(n_gt_class.values()),
                   "n_pred": sum(n_pred_class.values()),
                   "n_tp": n_tp},
    }
