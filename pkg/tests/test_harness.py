"""Harness tests: config schema, training loop bookkeeping, determinism,
evaluation protocols, and report plumbing.  Training runs here are tiny;
the full benchmark lives in the acceptance suite.
"""

import json
import math
import os

import numpy as np
import pytest

from gtbev import harness
from gtbev.harness import (NumericalError, ablation_experiment,
                           ablation_variant, config_from_dict, config_to_dict,
                           emit_boxes, evaluate_checkpoint, evaluate_detector,
                           load_run_record, predict, reevaluate, report_emit,
                           report_from_dict, report_to_dict,
                           robustness_experiment, train,
                           validate_robustness_report)
from gtbev.matching import NO_OBJECT
from gtbev.metrics import ERROR_KEYS, nds_score
from gtbev.model import load_checkpoint, parameter_count
from gtbev.scene import REPORT_CLASS_ORDER, Geometry
from gtbev.scene_io import SchemaError, build_dataset, render_dataset


def make_doc(out_dir, count=8, seed=11, **over):
    doc = {
        "dataset": {"train": {"seed": seed, "count": count}},
        "epochs": 1, "batch_size": 8, "seeds": [0],
        "out_dir": str(out_dir),
    }
    doc.update(over)
    return doc


# --- configuration ----------------------------------------------------------


def test_config_echo_round_trips(tmp_path):
    doc = make_doc(tmp_path, guidance={"gt_bev": True, "gt_qi": True},
                   loss_weights={"gt_bev": 0.5},
                   optimizer={"lr": 3e-3, "schedule": "cosine"})
    cfg = config_from_dict(doc)
    assert cfg.gt_bev and cfg.gt_qi
    assert cfg.loss_weights == (1.0, 0.5, 1.0)
    assert cfg.lr == 3e-3 and cfg.lr_schedule == "cosine"
    again = config_from_dict(config_to_dict(cfg))
    assert again == cfg


def test_derived_eval_manifest(tmp_path):
    cfg = config_from_dict(make_doc(tmp_path, count=30, seed=9))
    # held-out split shares the train seed (same signature matrix) but
    # draws scene indices from a range training can never touch
    assert cfg.eval_data.seed == 9
    assert cfg.eval_data.start == harness.EVAL_START_OFFSET
    assert cfg.eval_data.count == 3
    assert cfg.eval_data.rig == cfg.train_data.rig
    train_ids = {s.scene_id for s in build_dataset(cfg.train_data)}
    eval_ids = {s.scene_id for s in build_dataset(cfg.eval_data)}
    assert not train_ids & eval_ids


def test_config_rejects_bad_documents(tmp_path):
    with pytest.raises(SchemaError, match="unknown keys"):
        config_from_dict(make_doc(tmp_path, extra_knob=1))
    with pytest.raises(SchemaError, match="seeds"):
        config_from_dict({**make_doc(tmp_path), "seeds": []})
    with pytest.raises(SchemaError, match="boolean"):
        config_from_dict(make_doc(tmp_path, guidance={"gt_bev": 1}))
    with pytest.raises(SchemaError, match="guidance"):
        config_from_dict(make_doc(tmp_path, guidance={"gt_dec": True}))
    with pytest.raises(SchemaError, match="schedule"):
        config_from_dict(make_doc(tmp_path,
                                  optimizer={"schedule": "linear"}))
    with pytest.raises(SchemaError, match="betas"):
        config_from_dict(make_doc(tmp_path, optimizer={"betas": [0.9]}))
    with pytest.raises(SchemaError, match="agree"):
        config_from_dict(make_doc(
            tmp_path, dataset={"train": {"seed": 1, "count": 8},
                               "eval": {"seed": 2, "count": 4,
                                        "rig": {"views": 4}}}))


def test_config_reads_manifest_files(tmp_path):
    manifest = {"seed": 4, "count": 6}
    path = tmp_path / "train.json"
    path.write_text(json.dumps(manifest))
    cfg = config_from_dict({"dataset": {"train": "train.json"}, "seeds": [0],
                            "out_dir": str(tmp_path)},
                           base_dir=str(tmp_path))
    assert cfg.train_data.seed == 4 and cfg.train_data.count == 6


# --- training loop ----------------------------------------------------------


def test_loss_breakdown_additive_and_baseline_zero(tmp_path):
    weights = {"base": 1.0, "gt_bev": 0.5, "gt_qi": 2.0}
    cfg = config_from_dict(make_doc(
        tmp_path, count=8, epochs=2,
        guidance={"gt_bev": True, "gt_qi": True}, loss_weights=weights))
    res = train(cfg, 0, label="weighted")
    assert res.step_losses
    for b in res.step_losses:
        assert b.total == math.fsum(
            [1.0 * b.l_base, 0.5 * b.l_gt_bev, 2.0 * b.l_gt_qi])
        assert b.l_gt_bev > 0 and b.l_gt_qi > 0

    base = train(config_from_dict(make_doc(tmp_path, count=8)), 0,
                 label="plain")
    for b in base.step_losses:
        assert b.l_gt_bev == 0.0 and b.l_gt_qi == 0.0
        assert b.total == b.l_base


def test_same_seed_reruns_bitwise_identical(tmp_path):
    doc = make_doc(tmp_path / "a", count=8, epochs=2,
                   guidance={"gt_bev": True, "gt_qi": True})
    first = train(config_from_dict(doc), 3, label="run")
    doc2 = {**doc, "out_dir": str(tmp_path / "b")}
    second = train(config_from_dict(doc2), 3, label="run")
    a = open(first.record.checkpoint, "rb").read()
    b = open(second.record.checkpoint, "rb").read()
    assert a == b
    assert first.record.report == second.record.report
    assert first.record.epoch_losses == second.record.epoch_losses
    different = train(config_from_dict(
        {**doc, "out_dir": str(tmp_path / "c")}), 4, label="run")
    assert open(different.record.checkpoint, "rb").read() != a


def test_detector_parameters_identical_across_switches(tmp_path):
    plain = train(config_from_dict(make_doc(tmp_path / "p")), 0, label="p")
    guided = train(config_from_dict(make_doc(
        tmp_path / "g", guidance={"gt_bev": True, "gt_qi": True})), 0,
        label="g")
    assert set(plain.detector.params) == set(guided.detector.params)
    assert parameter_count(plain.detector) == parameter_count(guided.detector)
    assert plain.guidance is None and guided.guidance is not None


def test_divergent_run_raises_numerical_error(tmp_path):
    cfg = config_from_dict(make_doc(tmp_path, count=8, epochs=4,
                                    optimizer={"lr": 1e15}))
    with pytest.raises(NumericalError, match="skipped"):
        train(cfg, 0, label="boom")


def test_single_scene_overfit(tmp_path):
    cfg = config_from_dict(make_doc(
        tmp_path, count=1, seed=54, epochs=1000, batch_size=1,
        guidance={"gt_bev": True, "gt_qi": True},
        optimizer={"lr": 2e-3, "schedule": "cosine", "weight_decay": 0.0}))
    res = train(cfg, 0, label="overfit")
    assert res.step_losses[-1].total < 0.1


# --- records ----------------------------------------------------------------


def test_run_record_round_trip_and_reevaluation(tmp_path):
    cfg = config_from_dict(make_doc(tmp_path, count=8,
                                    guidance={"gt_bev": True, "gt_qi": False}))
    res = train(cfg, 1, label="BEV")
    _, record_path = harness.artifact_paths(cfg, "BEV", 1)
    loaded = load_run_record(record_path)
    assert loaded == res.record
    assert reevaluate(loaded) == loaded.report


def test_report_dict_round_trip(tmp_path):
    cfg = config_from_dict(make_doc(tmp_path, count=8))
    res = train(cfg, 0, label="run")
    doc = json.loads(json.dumps(report_to_dict(res.record.report)))
    assert report_from_dict(doc) == res.record.report


# --- inference and evaluation ----------------------------------------------


def test_emission_rule():
    geometry = Geometry()
    boxes = np.tile(np.array([0.5, 0.5, 0.3, 0.0, 0.0, 0.0, 0.0, 1.0,
                              0.0, 0.0]), (3, 1))
    attr = np.array([[0.0, 1.0]] * 3)
    logits = np.zeros((3, 11))
    logits[0, NO_OBJECT] = 9.0          # confident background: dropped
    logits[1, 2] = 2.0                  # clear foreground: kept
    # exactly 0.5 background mass: p = (0.5, 0.5) over {class 3, no-object}
    logits[2, :] = -1e30
    logits[2, 3] = 0.0
    logits[2, NO_OBJECT] = 0.0
    out = emit_boxes(logits, attr, boxes, geometry)
    assert len(out) == 1
    p = np.exp(logits[1] - logits[1].max())
    p /= p.sum()
    assert out[0].class_id == 2
    assert out[0].score == pytest.approx(float(p[2]), rel=1e-12)
    assert out[0].attribute_id == 1
    assert out[0].center[0] == pytest.approx(0.0, abs=1e-9)


def test_evaluation_deterministic_and_masked_seeded(tmp_path):
    cfg = config_from_dict(make_doc(tmp_path, count=16))
    res = train(cfg, 0, label="run")
    scenes, views = render_dataset(cfg.eval_data)
    det = res.detector
    assert evaluate_detector(det, scenes, views) == \
        evaluate_detector(det, scenes, views)
    m1 = evaluate_detector(det, scenes, views, "random-one-view", mask_seed=5)
    m2 = evaluate_detector(det, scenes, views, "random-one-view", mask_seed=5)
    assert m1 == m2
    with pytest.raises(SchemaError, match="mask_policy"):
        predict(det, scenes, views, "drop-everything")


def test_checkpoint_evaluation_parallel_matches_serial(tmp_path):
    doc = make_doc(tmp_path, count=8,
                   dataset={"train": {"seed": 11, "count": 8},
                            "eval": {"seed": 77, "count": 20}})
    cfg = config_from_dict(doc)
    res = train(cfg, 0, label="run")
    serial = evaluate_checkpoint(res.record.checkpoint, cfg.eval_data)
    parallel = evaluate_checkpoint(res.record.checkpoint, cfg.eval_data,
                                   workers=2)
    assert serial == parallel
    masked_s = evaluate_checkpoint(res.record.checkpoint, cfg.eval_data,
                                   "random-one-view", mask_seed=3)
    masked_p = evaluate_checkpoint(res.record.checkpoint, cfg.eval_data,
                                   "random-one-view", mask_seed=3, workers=2)
    assert masked_s == masked_p


# --- experiment protocols ---------------------------------------------------


@pytest.fixture(scope="module")
def tiny_grid(tmp_path_factory):
    out = tmp_path_factory.mktemp("grid")
    doc = make_doc(out, count=8, seeds=[0, 1])
    cfg = config_from_dict(doc)
    grid = ablation_experiment(cfg)
    return cfg, grid


def test_ablation_grid_shape(tiny_grid):
    cfg, grid = tiny_grid
    assert len(grid["rows"]) == 3 * 2
    assert [r["label"] for r in grid["rows"]] == \
        ["none", "none", "BEV", "BEV", "BEV&Dec", "BEV&Dec"]
    assert [m["label"] for m in grid["means"]] == list(harness.ABLATION_LABELS)
    for mean in grid["means"]:
        mine = [r["nds"] for r in grid["rows"] if r["label"] == mean["label"]]
        assert mean["mean_nds"] == math.fsum(mine) / len(mine)


def test_ablation_rows_recomputable(tiny_grid):
    _, grid = tiny_grid
    for row in grid["rows"]:
        record = load_run_record(row["record"])
        r = record.report
        assert row["nds"] == nds_score(
            r.mean_ap, [r.mean_errors[k] for k in ERROR_KEYS])
        assert row["map"] == r.mean_ap
        assert os.path.exists(row["checkpoint"])


def test_ablation_variant_labels(tmp_path):
    cfg = config_from_dict(make_doc(tmp_path))
    assert not ablation_variant(cfg, "none").gt_bev
    bev = ablation_variant(cfg, "BEV")
    assert bev.gt_bev and not bev.gt_qi
    both = ablation_variant(cfg, "BEV&Dec")
    assert both.gt_bev and both.gt_qi
    with pytest.raises(SchemaError, match="label"):
        ablation_variant(cfg, "everything")


def test_robustness_report_shape(tiny_grid):
    cfg, grid = tiny_grid
    pairs = [(row["label"] + str(row["seed"]), row["checkpoint"])
             for row in grid["rows"][:2]]
    doc = robustness_experiment(pairs, cfg.eval_data, mask_seed=1)
    validate_robustness_report(doc)
    assert len(doc["rows"]) == 4
    assert doc["columns"] == list(harness.REPORT_COLUMNS)
    masks = [r["mask"] for r in doc["rows"]]
    assert masks == ["none", "random-one-view"] * 2
    # deterministic rerun
    again = robustness_experiment(pairs, cfg.eval_data, mask_seed=1)
    assert again["rows"] == doc["rows"]


def test_robustness_rejects_missing_checkpoint(tmp_path):
    cfg = config_from_dict(make_doc(tmp_path))
    with pytest.raises(SchemaError, match="missing checkpoint"):
        robustness_experiment([("gone", str(tmp_path / "gone.gtbv"))],
                              cfg.eval_data)


def test_validate_robustness_report_catches_damage(tiny_grid):
    cfg, grid = tiny_grid
    doc = robustness_experiment([("a", grid["rows"][0]["checkpoint"])],
                                cfg.eval_data)
    bad = json.loads(json.dumps(doc))
    del bad["rows"][0]["nds"]
    with pytest.raises(SchemaError, match="missing"):
        validate_robustness_report(bad)
    bad2 = json.loads(json.dumps(doc))
    bad2["columns"] = bad2["columns"][:-1]
    with pytest.raises(SchemaError, match="columns"):
        validate_robustness_report(bad2)


def test_report_emit_tables(tiny_grid, tmp_path):
    _, grid = tiny_grid
    records = [load_run_record(row["record"]) for row in grid["rows"]]
    csv_path, json_path = report_emit(records, tmp_path)
    lines = open(csv_path).read().strip().splitlines()
    assert lines[0] == "label,seed," + ",".join(harness.REPORT_COLUMNS)
    assert len(lines) == 1 + len(records)     # configurations x seeds
    doc = json.load(open(json_path))
    assert doc["class_order"] == list(REPORT_CLASS_ORDER)
    for row in doc["per_class_ap"]:
        assert set(REPORT_CLASS_ORDER) <= set(row)
    assert len(doc["headline"]) == len(records)
    with pytest.raises(SchemaError, match="at least one"):
        report_emit([], tmp_path)
