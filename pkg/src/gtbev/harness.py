"""Experiment harness: configs, the training loop, evaluation protocols,
and report emission.

A run is a pure function of (config, seed): data order, parameter init, and
view masking are all derived from explicit seeds, training is single
threaded, and evaluation merges per-scene results in dataset order.  The
guidance switches add loss terms and guidance-side parameters only, so the
detector parameter set is identical across configurations and a checkpoint
evaluates the same way no matter which switches trained it.
"""

from __future__ import annotations

import json
import logging
import math
import os
import re
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Graph, Tensor
from .codec import decode_box_row
from .guidance import (Guidance, contrastive_loss, gt_encode, gt_query_decode,
                       gtqi_loss, init_guidance, object_features)
from .matching import NO_OBJECT, hungarian, match_cost, perception_loss
from .metrics import ERROR_KEYS, EVAL_THRESHOLDS, MetricsReport, evaluate
from .model import (Detector, ModelConfig, bev_encode, decode, head,
                    init_params, load_checkpoint, save_checkpoint)
from .optim import AdamW
from .scene import (class_signatures, generate_scene, mask_view, masking_seed,
                    render_seed, render_views, scene_seed, signature_seed)
from .scene_io import (DatasetManifest, SchemaError, build_dataset,
                       load_manifest, manifest_from_dict, manifest_to_dict,
                       render_dataset, _field, _integer, _number)

__all__ = [
    "ExperimentConfig", "LossBreakdown", "RunRecord", "TrainResult",
    "NumericalError", "config_from_dict", "config_to_dict", "load_config",
    "train", "artifact_paths", "save_run_record", "load_run_record",
    "reevaluate", "report_to_dict", "report_from_dict", "emit_boxes",
    "predict", "evaluate_detector", "evaluate_checkpoint",
    "robustness_experiment", "validate_robustness_report",
    "ablation_variant", "ablation_experiment", "report_emit",
    "ABLATION_LABELS", "REPORT_COLUMNS",
]

logger = logging.getLogger("gtbev.harness")

RECORD_VERSION = 1
EVAL_BATCH = 8              # inference batch; fixed so reports never depend on it
EMIT_THRESHOLD = 0.5        # emit a box when no-object probability is below this
SKIP_BUDGET = 0.01          # tolerated fraction of skipped (non-finite) steps
EVAL_START_OFFSET = 2 ** 20  # derived eval scene indices live far from train
GUIDANCE_SEED_OFFSET = 1_000_003
MASK_POLICIES = ("none", "random-one-view")

ABLATION_LABELS = ("none", "BEV", "BEV&Dec")
REPORT_COLUMNS = ("nds", "map", "ate", "ase", "aoe", "ave", "aae",
                  "long_tail_map")


class NumericalError(RuntimeError):
    """Training diverged: the skipped-step budget was exhausted."""


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything a run needs, echoed verbatim into its RunRecord."""

    train_data: DatasetManifest
    eval_data: DatasetManifest
    model: ModelConfig = field(default_factory=ModelConfig)
    gt_bev: bool = False
    gt_qi: bool = False
    loss_weights: tuple = (1.0, 1.0, 1.0)     # base, gt_bev, gt_qi
    lr: float = 1e-3
    lr_schedule: str = "constant"             # or "cosine" (decay to zero)
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 1e-4
    epochs: int = 10
    batch_size: int = 8
    seeds: tuple = (0,)
    out_dir: str = "runs"

    def validate(self):
        self.train_data.validate()
        self.eval_data.validate()
        self.model.validate()
        if not self.seeds:
            raise SchemaError("config.seeds", "need at least one seed")
        if self.epochs < 1 or self.batch_size < 1:
            raise SchemaError("config", "epochs and batch_size must be positive")
        if len(self.loss_weights) != 3 or any(w < 0 for w in self.loss_weights):
            raise SchemaError("config.loss_weights",
                              f"expected 3 nonnegative weights, got "
                              f"{self.loss_weights!r}")
        if self.lr_schedule not in ("constant", "cosine"):
            raise SchemaError("config.optimizer.schedule",
                              f"unknown schedule {self.lr_schedule!r}")
        if self.train_data.rig != self.eval_data.rig or \
                self.train_data.geometry != self.eval_data.geometry:
            raise SchemaError("config.dataset",
                              "train and eval rig/geometry must agree")


def _manifest_entry(v, path: str, base_dir: str) -> DatasetManifest:
    if isinstance(v, str):
        full = v if os.path.isabs(v) else os.path.join(base_dir, v)
        return load_manifest(full)
    if isinstance(v, dict):
        m = manifest_from_dict(v, path)
        m.validate()
        return m
    raise SchemaError(path, "expected a manifest object or a file path")


def config_from_dict(doc: dict, base_dir: str = ".") -> ExperimentConfig:
    known = {"dataset", "model", "guidance", "loss_weights", "optimizer",
             "epochs", "batch_size", "seeds", "out_dir"}
    if not isinstance(doc, dict):
        raise SchemaError("config", "expected an object")
    extra = sorted(set(doc) - known)
    if extra:
        raise SchemaError("config", f"unknown keys {extra}")

    ds = _field(doc, "dataset", "config")
    train_data = _manifest_entry(_field(ds, "train", "config.dataset"),
                                 "config.dataset.train", base_dir)
    if "eval" in ds:
        eval_data = _manifest_entry(ds["eval"], "config.dataset.eval", base_dir)
    else:
        # a held-out tenth drawn from the same signature matrix as training:
        # same seed, scene indices offset past any plausible train range
        eval_data = replace(train_data,
                            start=train_data.start + EVAL_START_OFFSET,
                            count=max(1, train_data.count // 10))

    try:
        model = ModelConfig(**doc.get("model", {}))
        model.validate()
    except (TypeError, ValueError) as e:
        raise SchemaError("config.model", str(e)) from e

    guidance = doc.get("guidance", {})
    switches = {}
    for key in ("gt_bev", "gt_qi"):
        v = guidance.get(key, False)
        if not isinstance(v, bool):
            raise SchemaError(f"config.guidance.{key}",
                              f"expected a boolean, got {type(v).__name__}")
        switches[key] = v
    bad = sorted(set(guidance) - {"gt_bev", "gt_qi"})
    if bad:
        raise SchemaError("config.guidance", f"unknown keys {bad}")

    lw = doc.get("loss_weights", {})
    weights = tuple(_number(lw.get(k, 1.0), f"config.loss_weights.{k}", lo=0.0)
                    for k in ("base", "gt_bev", "gt_qi"))

    opt = doc.get("optimizer", {})
    lr = _number(opt.get("lr", 1e-3), "config.optimizer.lr", lo=0.0)
    schedule = opt.get("schedule", "constant")
    betas_raw = opt.get("betas", [0.9, 0.999])
    if not isinstance(betas_raw, (list, tuple)) or len(betas_raw) != 2:
        raise SchemaError("config.optimizer.betas", "expected two numbers")
    betas = tuple(_number(b, f"config.optimizer.betas[{i}]", lo=0.0, hi=1.0,
                          hi_open=True) for i, b in enumerate(betas_raw))
    eps = _number(opt.get("eps", 1e-8), "config.optimizer.eps", lo=0.0)
    wd = _number(opt.get("weight_decay", 1e-4),
                 "config.optimizer.weight_decay", lo=0.0)

    seeds_raw = _field(doc, "seeds", "config")
    if not isinstance(seeds_raw, list) or not seeds_raw:
        raise SchemaError("config.seeds", "expected a nonempty list")
    seeds = tuple(_integer(s, f"config.seeds[{i}]", lo=0)
                  for i, s in enumerate(seeds_raw))

    cfg = ExperimentConfig(
        train_data=train_data, eval_data=eval_data, model=model,
        gt_bev=switches["gt_bev"], gt_qi=switches["gt_qi"],
        loss_weights=weights, lr=lr, lr_schedule=str(schedule), betas=betas,
        eps=eps, weight_decay=wd,
        epochs=_integer(doc.get("epochs", 10), "config.epochs", lo=1),
        batch_size=_integer(doc.get("batch_size", 8), "config.batch_size",
                            lo=1),
        seeds=seeds, out_dir=str(doc.get("out_dir", "runs")),
    )
    cfg.validate()
    return cfg


def config_to_dict(cfg: ExperimentConfig) -> dict:
    """Full echo with manifests inlined, parseable by config_from_dict."""
    return {
        "dataset": {"train": manifest_to_dict(cfg.train_data),
                    "eval": manifest_to_dict(cfg.eval_data)},
        "model": asdict(cfg.model),
        "guidance": {"gt_bev": cfg.gt_bev, "gt_qi": cfg.gt_qi},
        "loss_weights": {"base": cfg.loss_weights[0],
                         "gt_bev": cfg.loss_weights[1],
                         "gt_qi": cfg.loss_weights[2]},
        "optimizer": {"lr": cfg.lr, "schedule": cfg.lr_schedule,
                      "betas": list(cfg.betas), "eps": cfg.eps,
                      "weight_decay": cfg.weight_decay},
        "epochs": cfg.epochs,
        "batch_size": cfg.batch_size,
        "seeds": list(cfg.seeds),
        "out_dir": cfg.out_dir,
    }


def load_config(path) -> ExperimentConfig:
    with open(path) as f:
        try:
            doc = json.load(f)
        except json.JSONDecodeError as e:
            raise SchemaError("config", f"invalid JSON: {e}") from e
    return config_from_dict(doc, base_dir=os.path.dirname(os.path.abspath(path)))


# ---------------------------------------------------------------------------
# loss bookkeeping


@dataclass(frozen=True)
class LossBreakdown:
    l_base: float
    l_gt_bev: float
    l_gt_qi: float
    total: float


def _breakdown(l_base, l_gt_bev, l_gt_qi, weights) -> LossBreakdown:
    # the recorded total is the 64-bit weighted sum of the recorded parts, so
    # the additivity invariant holds by construction
    total = math.fsum(w * v for w, v in
                      zip(weights, (l_base, l_gt_bev, l_gt_qi)))
    return LossBreakdown(l_base=float(l_base), l_gt_bev=float(l_gt_bev),
                         l_gt_qi=float(l_gt_qi), total=total)


def _mean_breakdown(rows) -> LossBreakdown:
    n = max(len(rows), 1)
    return LossBreakdown(
        l_base=math.fsum(r.l_base for r in rows) / n,
        l_gt_bev=math.fsum(r.l_gt_bev for r in rows) / n,
        l_gt_qi=math.fsum(r.l_gt_qi for r in rows) / n,
        total=math.fsum(r.total for r in rows) / n,
    )


@dataclass(frozen=True)
class RunRecord:
    format_version: int
    label: str
    seed: int
    config: dict                      # config_to_dict echo
    epoch_losses: tuple               # mean LossBreakdown per epoch
    steps: int
    skipped_steps: int
    wall_seconds: float               # informational, not reproducible
    checkpoint: str
    report: MetricsReport             # final checkpoint, no masking


@dataclass
class TrainResult:
    record: RunRecord
    detector: Detector
    guidance: Guidance | None
    step_losses: list                 # applied steps only, in order


# ---------------------------------------------------------------------------
# training


def _sum_terms(terms):
    acc = terms[0]
    for t in terms[1:]:
        acc = ad.add(acc, t)
    return acc


def _train_step(det, guid, opt, batch_scenes, batch_views, cfg, lr=None):
    """One forward/backward/update; returns (LossBreakdown, applied)."""
    w_base, w_bev, w_qi = cfg.loss_weights
    n = len(batch_scenes)
    with Graph() as g:
        enc = bev_encode(det, batch_views)
        out = decode(det, enc.z_bev)
        per_scene = []
        for b, scene in enumerate(batch_scenes):
            h = head(det, ad.index_batch(out, b))
            cm = match_cost(h.class_logits.numpy(), h.boxes.numpy(), scene,
                            det.geometry)
            assignment = hungarian(cm.costs, canonical=False)
            per_scene.append(perception_loss(h.class_logits, h.attr_logits,
                                             h.boxes, assignment, scene,
                                             det.geometry))
        base_t = ad.scale(_sum_terms(per_scene), 1.0 / n)
        terms = [ad.scale(base_t, w_base)]

        bev_t = qi_t = None
        if guid is not None:
            betas = [gt_encode(guid, list(s.instances), det.geometry)
                     if s.instances else None for s in batch_scenes]
        if cfg.gt_bev:
            con = []
            for b, scene in enumerate(batch_scenes):
                if betas[b] is None:
                    continue
                alpha = object_features(ad.index_batch(enc.z_bev, b),
                                        list(scene.instances), det.geometry)
                con.append(contrastive_loss(alpha, betas[b],
                                            guid.params["logit_scale"]))
            if con:
                bev_t = ad.scale(_sum_terms(con), 1.0 / n)
                terms.append(ad.scale(bev_t, w_bev))
        if cfg.gt_qi:
            outs = gt_query_decode(det, enc.z_bev, betas)
            qi = [gtqi_loss(o, s, det.geometry)
                  for o, s in zip(outs, batch_scenes) if o is not None]
            if qi:
                qi_t = ad.scale(_sum_terms(qi), 1.0 / n)
                terms.append(ad.scale(qi_t, w_qi))
        graph_loss = _sum_terms(terms)

    bd = _breakdown(base_t.item(),
                    bev_t.item() if bev_t is not None else 0.0,
                    qi_t.item() if qi_t is not None else 0.0,
                    cfg.loss_weights)
    if not math.isfinite(bd.total):
        return bd, False
    return bd, opt.step(g.backward(graph_loss), lr=lr)


def _label_slug(label: str) -> str:
    return re.sub(r"[^A-Za-z0-9]+", "_", label).strip("_").lower() or "run"


def artifact_paths(cfg: ExperimentConfig, label: str, seed: int):
    stem = f"{_label_slug(label)}_seed{seed}"
    return (os.path.join(cfg.out_dir, stem + ".gtbv"),
            os.path.join(cfg.out_dir, stem + ".json"))


def train(cfg: ExperimentConfig, seed: int, label: str = "run") -> TrainResult:
    """Train one run, evaluate its final checkpoint, persist both.

    Deterministic per (cfg, seed): parameter init, epoch shuffles, and the
    guidance parameters all derive from ``seed``.  Steps whose loss or
    gradients are non-finite are skipped and logged; more than SKIP_BUDGET of
    them fails the run with NumericalError.
    """
    cfg.validate()
    t0 = time.perf_counter()
    m = cfg.train_data
    scenes, views = render_dataset(m)
    det = init_params(cfg.model, m.rig, m.geometry, seed)
    guid = (init_guidance(cfg.model, seed + GUIDANCE_SEED_OFFSET)
            if cfg.gt_bev or cfg.gt_qi else None)
    params = {f"det.{k}": v for k, v in det.params.items()}
    if guid is not None:
        params.update({f"gt.{k}": v for k, v in guid.params.items()})
    opt = AdamW(params, lr=cfg.lr, betas=cfg.betas, eps=cfg.eps,
                weight_decay=cfg.weight_decay)

    step_losses: list[LossBreakdown] = []
    epoch_losses = []
    steps = skipped = 0
    total_steps = cfg.epochs * math.ceil(len(scenes) / cfg.batch_size)
    for epoch in range(cfg.epochs):
        order = np.random.default_rng([seed, epoch]).permutation(len(scenes))
        epoch_rows = []
        for lo in range(0, len(order), cfg.batch_size):
            idx = order[lo:lo + cfg.batch_size]
            lr = cfg.lr
            if cfg.lr_schedule == "cosine":
                lr = cfg.lr * 0.5 * (1.0 + math.cos(math.pi * steps
                                                    / total_steps))
            bd, applied = _train_step(det, guid, opt,
                                      [scenes[i] for i in idx],
                                      [views[i] for i in idx], cfg, lr=lr)
            steps += 1
            if not applied:
                skipped += 1
                logger.warning("step %d skipped: non-finite loss or gradients",
                               steps)
                continue
            step_losses.append(bd)
            epoch_rows.append(bd)
        epoch_losses.append(_mean_breakdown(epoch_rows))
        logger.info("epoch %d/%d: mean total %.4f", epoch + 1, cfg.epochs,
                    epoch_losses[-1].total)
    if skipped > SKIP_BUDGET * steps:
        raise NumericalError(
            f"train: {skipped} of {steps} steps skipped for non-finite values")

    eval_scenes, eval_views = render_dataset(cfg.eval_data)
    report = evaluate_detector(det, eval_scenes, eval_views)

    os.makedirs(cfg.out_dir, exist_ok=True)
    ckpt_path, record_path = artifact_paths(cfg, label, seed)
    save_checkpoint(det, ckpt_path)
    record = RunRecord(
        format_version=RECORD_VERSION, label=label, seed=seed,
        config=config_to_dict(cfg), epoch_losses=tuple(epoch_losses),
        steps=steps, skipped_steps=skipped,
        wall_seconds=time.perf_counter() - t0, checkpoint=ckpt_path,
        report=report,
    )
    save_run_record(record_path, record)
    return TrainResult(record=record, detector=det, guidance=guid,
                       step_losses=step_losses)


# ---------------------------------------------------------------------------
# record and report serialization


def report_to_dict(r: MetricsReport) -> dict:
    return {
        "per_class_ap": {name: {str(t): v[t] for t in EVAL_THRESHOLDS}
                         for name, v in r.per_class_ap.items()},
        "class_ap": dict(r.class_ap),
        "per_class_tp": {name: dict(v) for name, v in r.per_class_tp.items()},
        "mean_ap": r.mean_ap,
        "mean_errors": dict(r.mean_errors),
        "nds": r.nds,
        "long_tail_map": r.long_tail_map,
        "eligible": list(r.eligible),
        "n_gt": r.n_gt, "n_pred": r.n_pred, "n_tp": r.n_tp,
    }


def report_from_dict(doc: dict) -> MetricsReport:
    return MetricsReport(
        per_class_ap={name: {float(t): ap for t, ap in v.items()}
                      for name, v in doc["per_class_ap"].items()},
        class_ap=dict(doc["class_ap"]),
        per_class_tp={name: dict(v) for name, v in doc["per_class_tp"].items()},
        mean_ap=doc["mean_ap"],
        mean_errors=dict(doc["mean_errors"]),
        nds=doc["nds"],
        long_tail_map=doc["long_tail_map"],
        eligible=tuple(doc["eligible"]),
        n_gt=int(doc["n_gt"]), n_pred=int(doc["n_pred"]),
        n_tp=int(doc["n_tp"]),
    )


def save_run_record(path, record: RunRecord) -> None:
    doc = {
        "format_version": record.format_version,
        "label": record.label,
        "seed": record.seed,
        "config": record.config,
        "epoch_losses": [asdict(b) for b in record.epoch_losses],
        "steps": record.steps,
        "skipped_steps": record.skipped_steps,
        "wall_seconds": record.wall_seconds,
        "checkpoint": record.checkpoint,
        "report": report_to_dict(record.report),
    }
    with open(path, "w") as f:
        json.dump(doc, f, indent=1)
        f.write("\n")


def load_run_record(path) -> RunRecord:
    with open(path) as f:
        doc = json.load(f)
    if doc.get("format_version") != RECORD_VERSION:
        raise SchemaError("record.format_version",
                          f"unsupported {doc.get('format_version')!r}")
    return RunRecord(
        format_version=doc["format_version"], label=doc["label"],
        seed=doc["seed"], config=doc["config"],
        epoch_losses=tuple(LossBreakdown(**b) for b in doc["epoch_losses"]),
        steps=doc["steps"], skipped_steps=doc["skipped_steps"],
        wall_seconds=doc["wall_seconds"], checkpoint=doc["checkpoint"],
        report=report_from_dict(doc["report"]),
    )


def reevaluate(record: RunRecord) -> MetricsReport:
    """Re-score a record's final checkpoint on its own eval dataset."""
    cfg = config_from_dict(record.config)
    det = load_checkpoint(record.checkpoint)
    scenes, views = render_dataset(cfg.eval_data)
    return evaluate_detector(det, scenes, views)


# ---------------------------------------------------------------------------
# inference and evaluation


def emit_boxes(class_logits, attr_logits, boxes, geometry):
    """Detections from one scene's head output (arrays, not tensors).

    A query becomes a detection when its no-object probability falls below
    EMIT_THRESHOLD; its class is the best foreground class and its score that
    class's probability.
    """
    z = np.asarray(class_logits, dtype=np.float64)
    z = z - z.max(axis=1, keepdims=True)
    p = np.exp(z)
    p /= p.sum(axis=1, keepdims=True)
    out = []
    for q in range(p.shape[0]):
        if p[q, NO_OBJECT] < EMIT_THRESHOLD:
            c = int(np.argmax(p[q, :NO_OBJECT]))
            a = int(np.argmax(attr_logits[q]))
            out.append(decode_box_row(boxes[q], geometry, c, a,
                                      float(p[q, c])))
    return out


def predict(det, scenes, views, mask_policy="none", mask_seed=0,
            batch=EVAL_BATCH, index_base=0):
    """Detections per scene id; pure inference, no graph, no guidance.

    ``index_base`` keeps view-mask draws tied to absolute dataset indices so
    chunked evaluation reproduces the serial masking exactly.
    """
    if mask_policy not in MASK_POLICIES:
        raise SchemaError("mask_policy",
                          f"{mask_policy!r} not in {MASK_POLICIES}")
    if mask_policy == "random-one-view":
        views = [
            mask_view(v, int(np.random.default_rng(
                masking_seed(mask_seed, index_base + i)).integers(
                    det.rig.views)))
            for i, v in enumerate(views)
        ]
    preds = {}
    for lo in range(0, len(scenes), batch):
        out = decode(det, bev_encode(det, views[lo:lo + batch]).z_bev)
        for b, scene in enumerate(scenes[lo:lo + batch]):
            h = head(det, ad.index_batch(out, b))
            preds[scene.scene_id] = emit_boxes(
                h.class_logits.numpy(), h.attr_logits.numpy(),
                h.boxes.numpy(), det.geometry)
    return preds


def evaluate_detector(det, scenes, views, mask_policy="none",
                      mask_seed=0) -> MetricsReport:
    return evaluate(scenes, predict(det, scenes, views, mask_policy,
                                    mask_seed))


def _check_compat(det: Detector, m: DatasetManifest):
    if det.rig != m.rig or det.geometry != m.geometry:
        raise SchemaError("eval", "checkpoint rig/geometry do not match the "
                          "dataset manifest")


def _predict_chunk(path, manifest_doc, lo, hi, mask_policy, mask_seed):
    """Worker task: render and score scenes [lo, hi) of a manifest."""
    det = load_checkpoint(path)
    m = manifest_from_dict(manifest_doc)
    sig = class_signatures(m.rig.channels, signature_seed(m.seed))
    scenes, views = [], []
    for i in range(lo, hi):
        s = generate_scene(m.profile, m.geometry,
                           scene_seed(m.seed, m.start + i),
                           scene_id=f"s{m.start + i:06d}")
        scenes.append(s)
        views.append(render_views(s, m.rig, m.geometry, sig, m.noise_sigma,
                                  render_seed(m.seed, m.start + i)))
    return predict(det, scenes, views, mask_policy, mask_seed,
                   index_base=lo)


def evaluate_checkpoint(path, manifest: DatasetManifest, mask_policy="none",
                        mask_seed=0, workers=1) -> MetricsReport:
    """Score a stored checkpoint on the dataset a manifest describes.

    With ``workers > 1`` scenes are rendered and scored in parallel chunks
    aligned to EVAL_BATCH boundaries, so every forward pass sees the same
    batch composition as the serial path and the merged report is identical.
    """
    det = load_checkpoint(path)
    _check_compat(det, manifest)
    if workers <= 1:
        scenes, views = render_dataset(manifest)
        return evaluate_detector(det, scenes, views, mask_policy, mask_seed)

    n_batches = math.ceil(manifest.count / EVAL_BATCH)
    per_chunk = math.ceil(n_batches / workers) * EVAL_BATCH
    bounds = [(lo, min(lo + per_chunk, manifest.count))
              for lo in range(0, manifest.count, per_chunk)]
    doc = manifest_to_dict(manifest)
    preds = {}
    with ProcessPoolExecutor(max_workers=min(workers, len(bounds))) as pool:
        futures = [pool.submit(_predict_chunk, path, doc, lo, hi,
                               mask_policy, mask_seed) for lo, hi in bounds]
        for f in futures:        # submission order keeps the merge stable
            preds.update(f.result())
    return evaluate(build_dataset(manifest), preds)


# ---------------------------------------------------------------------------
# experiment protocols


def _headline(r: MetricsReport) -> dict:
    row = {"nds": r.nds, "map": r.mean_ap}
    row.update({k: r.mean_errors[k] for k in ERROR_KEYS})
    row["long_tail_map"] = r.long_tail_map
    return row


def robustness_experiment(checkpoints, manifest: DatasetManifest,
                          mask_seed=0) -> dict:
    """Paired unmasked vs one-view-masked reports per checkpoint.

    ``checkpoints`` is a sequence of (label, path) pairs; every checkpoint is
    scored on the same rendered eval set with both mask policies.
    """
    for label, path in checkpoints:
        if not os.path.exists(path):
            raise SchemaError("robustness", f"missing checkpoint {path!r} "
                              f"for {label!r}")
    scenes, views = render_dataset(manifest)
    rows, reports = [], {}
    for label, path in checkpoints:
        det = load_checkpoint(path)
        _check_compat(det, manifest)
        clean = evaluate_detector(det, scenes, views)
        masked = evaluate_detector(det, scenes, views, "random-one-view",
                                   mask_seed)
        rows.append({"label": label, "mask": "none", **_headline(clean)})
        rows.append({"label": label, "mask": "random-one-view",
                     **_headline(masked)})
        reports[label] = {"none": report_to_dict(clean),
                          "random-one-view": report_to_dict(masked)}
    return {"format_version": RECORD_VERSION, "mask_seed": mask_seed,
            "columns": list(REPORT_COLUMNS), "rows": rows,
            "reports": reports}


def validate_robustness_report(doc: dict) -> None:
    if doc.get("columns") != list(REPORT_COLUMNS):
        raise SchemaError("robustness.columns",
                          f"expected {list(REPORT_COLUMNS)}")
    rows = doc.get("rows")
    if not isinstance(rows, list) or not rows:
        raise SchemaError("robustness.rows", "expected a nonempty list")
    for i, row in enumerate(rows):
        missing = {"label", "mask", *REPORT_COLUMNS} - set(row)
        if missing:
            raise SchemaError(f"robustness.rows[{i}]",
                              f"missing {sorted(missing)}")
        if row["mask"] not in MASK_POLICIES:
            raise SchemaError(f"robustness.rows[{i}].mask",
                              f"unknown policy {row['mask']!r}")
        for col in REPORT_COLUMNS:
            _number(row[col], f"robustness.rows[{i}].{col}")


def ablation_variant(cfg: ExperimentConfig, label: str) -> ExperimentConfig:
    if label == "none":
        return replace(cfg, gt_bev=False, gt_qi=False)
    if label == "BEV":
        return replace(cfg, gt_bev=True, gt_qi=False)
    if label == "BEV&Dec":
        return replace(cfg, gt_bev=True, gt_qi=True)
    raise SchemaError("ablation", f"unknown label {label!r}")


def _grid_cell(cfg_doc: dict, label: str, seed: int) -> dict:
    cfg = ablation_variant(config_from_dict(cfg_doc), label)
    result = train(cfg, seed, label=label)
    r = result.record
    _, record_path = artifact_paths(cfg, label, seed)
    return {"label": label, "seed": seed, "nds": r.report.nds,
            "map": r.report.mean_ap, "checkpoint": r.checkpoint,
            "record": record_path, "wall_seconds": r.wall_seconds}


def ablation_experiment(cfg: ExperimentConfig, workers=1) -> dict:
    """Train and score {none, BEV, BEV&Dec} across every configured seed.

    Cells are independent runs, so with ``workers > 1`` they execute in a
    process pool; rows are always collected in (label, seed) order.
    """
    cfg.validate()
    t0 = time.perf_counter()
    cells = [(label, seed) for label in ABLATION_LABELS for seed in cfg.seeds]
    doc = config_to_dict(cfg)
    if workers <= 1:
        rows = [_grid_cell(doc, label, seed) for label, seed in cells]
    else:
        with ProcessPoolExecutor(max_workers=min(workers, len(cells))) as pool:
            futures = [pool.submit(_grid_cell, doc, label, seed)
                       for label, seed in cells]
            rows = [f.result() for f in futures]
    means = []
    for label in ABLATION_LABELS:
        mine = [r for r in rows if r["label"] == label]
        means.append({"label": label,
                      "mean_nds": math.fsum(r["nds"] for r in mine) / len(mine),
                      "mean_map": math.fsum(r["map"] for r in mine) / len(mine)})
    return {"format_version": RECORD_VERSION, "rows": rows, "means": means,
            "wall_seconds": time.perf_counter() - t0}


# ---------------------------------------------------------------------------
# report emission


def report_emit(records, out_dir, robustness: dict | None = None):
    """Summary tables from run records: headline CSV plus a JSON bundle.

    The CSV has one row per record with the fixed REPORT_COLUMNS headline;
    the JSON adds a per-class AP table over the ten classes in report order
    and, when given, the robustness rows.
    """
    import csv

    from .scene import REPORT_CLASS_ORDER

    records = list(records)
    if not records:
        raise SchemaError("report", "need at least one run record")
    os.makedirs(out_dir, exist_ok=True)

    headline = [{"label": r.label, "seed": r.seed, **_headline(r.report)}
                for r in records]
    per_class = [
        {"label": r.label, "seed": r.seed,
         **{name: r.report.class_ap.get(name) for name in REPORT_CLASS_ORDER}}
        for r in records
    ]

    csv_path = os.path.join(out_dir, "summary.csv")
    with open(csv_path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["label", "seed", *REPORT_COLUMNS])
        for row in headline:
            writer.writerow([row["label"], row["seed"],
                             *(repr(row[c]) for c in REPORT_COLUMNS)])

    json_path = os.path.join(out_dir, "summary.json")
    doc = {
        "format_version": RECORD_VERSION,
        "headline_columns": ["label", "seed", *REPORT_COLUMNS],
        "headline": headline,
        "class_order": list(REPORT_CLASS_ORDER),
        "per_class_ap": per_class,
        "robustness": robustness,
    }
    with open(json_path, "w") as f:
        json.dump(doc, f, indent=1)
        f.write("\n")
    return csv_path, json_path
