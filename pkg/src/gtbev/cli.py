"""Command-line front end.

Subcommands map one-to-one onto harness operations and share only files:
`generate` writes a dataset, `train`/`ablate` write checkpoints and run
records, `eval`/`metrics`/`robustness` write reports, `report` collects run
records into summary tables.  Exit codes: 0 success, 2 validation failure,
3 numerical failure.
"""

import argparse
import json
import logging
import os
import sys
from dataclasses import replace

# cap BLAS threads before numpy loads; runs are single threaded by design
# and process pools would otherwise oversubscribe the machine
os.environ.setdefault("OMP_NUM_THREADS", "1")
os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("MKL_NUM_THREADS", "1")

from . import harness
from .harness import NumericalError, load_config
from .metrics import evaluate_files
from .scene_io import (SchemaError, build_dataset, load_manifest,
                       save_manifest, save_scenes)

logger = logging.getLogger("gtbev.cli")


def _write_json(path, doc):
    with open(path, "w") as f:
        json.dump(doc, f, indent=1)
        f.write("\n")


def _print_headline(report):
    row = harness._headline(report)
    print("  ".join(f"{k}={row[k]:.4f}" for k in harness.REPORT_COLUMNS))


def cmd_generate(args) -> int:
    m = load_manifest(args.config)
    os.makedirs(args.out, exist_ok=True)
    scenes = build_dataset(m)
    save_scenes(os.path.join(args.out, "scenes.json"), scenes)
    save_manifest(os.path.join(args.out, "manifest.json"), m)
    print(f"wrote {len(scenes)} scenes to {args.out}")
    return 0


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    if args.out:
        cfg = replace(cfg, out_dir=args.out)
    seeds = [args.seed] if args.seed is not None else list(cfg.seeds)
    label = {(False, False): "none", (True, False): "BEV",
             (False, True): "Dec", (True, True): "BEV&Dec"}[
                 (cfg.gt_bev, cfg.gt_qi)]
    for seed in seeds:
        result = harness.train(cfg, seed, label=label)
        print(f"{label} seed {seed}: "
              f"nds={result.record.report.nds:.4f} "
              f"map={result.record.report.mean_ap:.4f} "
              f"({result.record.checkpoint})")
    return 0


def cmd_eval(args) -> int:
    cfg = load_config(args.config)
    report = harness.evaluate_checkpoint(
        args.checkpoint, cfg.eval_data, mask_policy=args.mask,
        mask_seed=args.seed or 0, workers=args.workers)
    os.makedirs(args.out, exist_ok=True)
    _write_json(os.path.join(args.out, "report.json"),
                harness.report_to_dict(report))
    _print_headline(report)
    return 0


def cmd_metrics(args) -> int:
    report = evaluate_files(args.predictions, args.scenes)
    os.makedirs(args.out, exist_ok=True)
    _write_json(os.path.join(args.out, "report.json"),
                harness.report_to_dict(report))
    _print_headline(report)
    return 0


def cmd_robustness(args) -> int:
    cfg = load_config(args.config)
    pairs = [(os.path.splitext(os.path.basename(p))[0], p)
             for p in args.checkpoints]
    doc = harness.robustness_experiment(pairs, cfg.eval_data,
                                        mask_seed=args.seed or 0)
    harness.validate_robustness_report(doc)
    os.makedirs(args.out, exist_ok=True)
    _write_json(os.path.join(args.out, "robustness.json"), doc)
    for row in doc["rows"]:
        print(f"{row['label']:>12} {row['mask']:>16} "
              f"nds={row['nds']:.4f} map={row['map']:.4f}")
    return 0


def cmd_ablate(args) -> int:
    cfg = load_config(args.config)
    if args.out:
        cfg = replace(cfg, out_dir=args.out)
    grid = harness.ablation_experiment(cfg, workers=args.workers)
    os.makedirs(cfg.out_dir, exist_ok=True)
    _write_json(os.path.join(cfg.out_dir, "grid.json"), grid)
    records = [harness.load_run_record(row["record"]) for row in grid["rows"]]
    harness.report_emit(records, cfg.out_dir)
    for mean in grid["means"]:
        print(f"{mean['label']:>8}: mean_nds={mean['mean_nds']:.4f} "
              f"mean_map={mean['mean_map']:.4f}")
    return 0


def cmd_report(args) -> int:
    records = [harness.load_run_record(p) for p in args.records]
    robustness = None
    if args.robustness:
        with open(args.robustness) as f:
            robustness = json.load(f)
        harness.validate_robustness_report(robustness)
    csv_path, json_path = harness.report_emit(records, args.out,
                                              robustness=robustness)
    print(f"wrote {csv_path} and {json_path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gtbev",
        description="BEV detection lab: datasets, training, evaluation")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a dataset from a manifest")
    p.add_argument("--config", required=True, help="manifest JSON")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train the configured seeds")
    p.add_argument("--config", required=True, help="experiment JSON")
    p.add_argument("--seed", type=int, help="train this seed only")
    p.add_argument("--out", help="override the configured output directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on the eval split")
    p.add_argument("--config", required=True, help="experiment JSON")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--mask", choices=harness.MASK_POLICIES, default="none")
    p.add_argument("--seed", type=int, help="mask draw seed")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("metrics", help="score stored predictions")
    p.add_argument("--scenes", required=True, help="ground-truth JSON")
    p.add_argument("--predictions", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("robustness",
                       help="paired masked/unmasked checkpoint reports")
    p.add_argument("checkpoints", nargs="+", help="checkpoint files")
    p.add_argument("--config", required=True, help="experiment JSON")
    p.add_argument("--seed", type=int, help="mask draw seed")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_robustness)

    p = sub.add_parser("ablate", help="train and score the guidance grid")
    p.add_argument("--config", required=True, help="experiment JSON")
    p.add_argument("--out", help="override the configured output directory")
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("report", help="summary tables from run records")
    p.add_argument("records", nargs="+", help="run record JSON files")
    p.add_argument("--robustness", help="robustness report JSON to include")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except NumericalError as e:
        logger.error("%s", e)
        return 3
    except (SchemaError, ValueError, OSError) as e:
        logger.error("%s", e)
        return 2


if __name__ == "__main__":
    sys.exit(main())
