"""Command-line entry points.

Subcommands: gen-data, train, eval, sweep-beta, analyze-density,
export-plots. Every command is deterministic given identical flags and
seeds. Exit codes: 0 success, 2 configuration/usage error, 3 runtime abort.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import os
import sys

from .datasets import (
    DatasetIndex,
    DensityProfile,
    GenerationError,
    TileSpec,
    density_histogram,
    write_dataset,
)
from .detector import DenseRotatedDetector, ModelConfig, arrays_into_module, load_checkpoint
from .training import (
    ConfigError,
    ExperimentConfig,
    TrainingDiverged,
    load_config,
    run_training,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3

DEFAULT_BETA_SWEEP = (10.0, 50.0, 100.0, 300.0, 500.0, 700.0)


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rotssod",
        description="Semi-supervised oriented object detection, desk scale.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="materialize a synthetic dataset")
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--n", type=int, default=200, help="number of training scenes")
    g.add_argument("--val-n", type=int, default=60, help="number of validation scenes")
    g.add_argument(
        "--fraction", type=int, default=10, choices=(1, 5, 10, 20, 30),
        help="labeled percentage preset",
    )
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--image-size", type=int, default=128)
    g.add_argument("--classes", type=int, default=3)
    g.add_argument("--clusters", type=int, default=2)
    g.add_argument("--objects-per-cluster", type=int, nargs=2, default=(6, 12))
    g.add_argument("--cluster-radius", type=float, default=24.0)
    g.add_argument("--background-fraction", type=float, default=0.1)
    g.add_argument("--scale-range", type=float, nargs=2, default=(9.0, 20.0))
    g.add_argument("--clutter", type=int, nargs=2, default=(4, 9))
    g.add_argument("--noise", type=float, default=0.04)
    g.add_argument(
        "--uniform", action="store_true",
        help="spread objects uniformly (evenly-distributed scenes)",
    )

    t = sub.add_parser("train", help="run one training experiment")
    t.add_argument("--config", required=True, help="experiment config JSON")
    t.add_argument("--out", default=None, help="override output directory")
    t.add_argument("--data", default=None, help="override dataset manifest")
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--beta", type=float, default=None)
    t.add_argument("--iters", type=int, default=None)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a dataset's val split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True, help="dataset manifest")
    e.add_argument("--out", required=True, help="report JSON path")
    e.add_argument(
        "--model", default="teacher", choices=("teacher", "student"),
        help="which parameter set to evaluate",
    )

    s = sub.add_parser("sweep-beta", help="train once per beta value")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True, help="sweep output directory")
    s.add_argument(
        "--values", default=",".join(str(v) for v in DEFAULT_BETA_SWEEP),
        help="comma-separated beta values",
    )
    s.add_argument("--seed", type=int, default=None)
    s.add_argument("--iters", type=int, default=None)

    d = sub.add_parser("analyze-density", help="objects-per-tile histogram")
    d.add_argument("--data", required=True, help="dataset manifest")
    d.add_argument("--out", required=True, help="output directory")
    d.add_argument("--tile", type=int, default=128)
    d.add_argument("--overlap", type=int, default=25)
    d.add_argument(
        "--labeled-only", action="store_true",
        help="restrict to labeled samples (default uses all annotations)",
    )

    p = sub.add_parser("export-plots", help="CSV series from a metrics log")
    p.add_argument("--log", required=True, help="metrics.jsonl path")
    p.add_argument("--out", required=True, help="output directory")

    return parser


def cmd_gen_data(args) -> int:
    if args.n <= 0:
        print("error: empty dataset (--n must be >= 1)", file=sys.stderr)
        return EXIT_CONFIG
    profile = DensityProfile(
        num_clusters=args.clusters,
        objects_per_cluster=tuple(args.objects_per_cluster),
        cluster_radius=args.cluster_radius,
        background_fraction=1.0 if args.uniform else args.background_fraction,
        class_count=args.classes,
        scale_range=tuple(args.scale_range),
        image_size=args.image_size,
        clutter=tuple(args.clutter),
        noise=args.noise,
        seed=args.seed,
    )
    manifest = write_dataset(
        args.out, profile, args.n, args.fraction, val_samples=args.val_n
    )
    idx = DatasetIndex(manifest)
    print(
        f"wrote {len(idx.samples)} train scenes "
        f"({len(idx.labeled_ids)} labeled, {len(idx.unlabeled_ids)} unlabeled) "
        f"and {len(idx.val)} val scenes to {manifest}"
    )
    return EXIT_OK


def _config_with_overrides(args) -> ExperimentConfig:
    cfg = load_config(args.config)
    updates = {}
    if getattr(args, "out", None) is not None:
        updates["out_dir"] = args.out
    if getattr(args, "data", None) is not None:
        updates["data_manifest"] = args.data
    if getattr(args, "seed", None) is not None:
        updates["seed"] = args.seed
    if getattr(args, "beta", None) is not None:
        updates["beta"] = args.beta
    if getattr(args, "iters", None) is not None:
        updates["iterations"] = args.iters
    return dataclasses.replace(cfg, **updates) if updates else cfg


def cmd_train(args) -> int:
    cfg = _config_with_overrides(args)
    summary = run_training(cfg)
    print(
        f"finished {summary['iterations']} iterations, "
        f"final mAP {summary['final_map']:.4f}, log at {summary['metrics_path']}"
    )
    return EXIT_OK


def cmd_eval(args) -> int:
    payload = load_checkpoint(args.checkpoint)
    if "config" not in payload:
        print("error: checkpoint carries no config", file=sys.stderr)
        return EXIT_RUNTIME
    cfg = ExperimentConfig.from_dict(payload["config"])
    dataset = DatasetIndex(args.data)
    model_cfg = dataclasses.replace(cfg.model, num_classes=len(dataset.class_names))
    model = DenseRotatedDetector(model_cfg)
    arrays_into_module(model, payload[args.model])
    model.eval()

    import torch

    from . import augment as aug_mod
    from .detector import decode_predictions
    from .evaluation import evaluate

    preds, gts = [], []
    with torch.no_grad():
        for vid in dataset.val_ids:
            sample = dataset.load(vid)
            geo = aug_mod.identity_geo(sample.image.shape[:2], cfg.augment.pad_multiple)
            maps = model(geo.apply_to_image(sample.image))
            preds.append(
                decode_predictions(maps, cfg.eval_score_thresh, cfg.eval_nms_iou)
            )
            gts.append(sample.boxes)
    report = evaluate(preds, gts, model_cfg.num_classes, cfg.eval_iou_thresh)
    with open(args.out, "w") as fh:
        json.dump(report.to_json_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"mAP {report.map:.4f} -> {args.out}")
    return EXIT_OK


def cmd_sweep_beta(args) -> int:
    base = load_config(args.config)
    try:
        values = [float(v) for v in args.values.split(",") if v.strip() != ""]
    except ValueError:
        print(f"error: bad --values '{args.values}'", file=sys.stderr)
        return EXIT_CONFIG
    if not values:
        print("error: no beta values given", file=sys.stderr)
        return EXIT_CONFIG
    os.makedirs(args.out, exist_ok=True)
    rows = []
    for beta in values:
        updates = {
            "beta": beta,
            "out_dir": os.path.join(args.out, f"beta_{beta:g}"),
            "selection": "ddpls",
        }
        if args.seed is not None:
            updates["seed"] = args.seed
        if args.iters is not None:
            updates["iterations"] = args.iters
        cfg = dataclasses.replace(base, **updates)
        summary = run_training(cfg)
        rows.append((beta, summary["final_map"]))
        print(f"beta={beta:g}: mAP {summary['final_map']:.4f}")
    table_path = os.path.join(args.out, "sweep.csv")
    with open(table_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["beta", "map"])
        for beta, m in rows:
            writer.writerow([f"{beta:g}", repr(m)])
    print(f"sweep table -> {table_path}")
    return EXIT_OK


def cmd_analyze_density(args) -> int:
    spec = TileSpec(tile_size=args.tile, overlap=args.overlap)
    dataset = DatasetIndex(args.data)
    ids = dataset.labeled_ids if args.labeled_only else [
        e["id"] for e in dataset.samples
    ]
    samples = [dataset.load(sid, reveal_boxes=True) for sid in ids]
    hist = density_histogram(samples, spec)
    os.makedirs(args.out, exist_ok=True)
    csv_path = os.path.join(args.out, "density.csv")
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["objects_per_tile", "tiles"])
        for k, v in hist.counts.items():
            writer.writerow([k, v])
    stats_path = os.path.join(args.out, "density_stats.json")
    with open(stats_path, "w") as fh:
        json.dump(
            {
                "mean": hist.mean,
                "max": hist.max,
                "empty_fraction": hist.empty_fraction,
                "total_tiles": hist.total_tiles,
            },
            fh,
            indent=2,
            sort_keys=True,
        )
        fh.write("\n")
    print(
        f"{hist.total_tiles} tiles: mean {hist.mean:.3f} objects, "
        f"max {hist.max}, empty fraction {hist.empty_fraction:.3f}"
    )
    return EXIT_OK


def cmd_export_plots(args) -> int:
    records = []
    with open(args.log) as fh:
        for idx, line in enumerate(fh):
            line = line.strip()
            if not line:
                continue
            try:
                records.append(json.loads(line))
            except json.JSONDecodeError:
                print(f"error: corrupt record at index {idx}", file=sys.stderr)
                return EXIT_RUNTIME
    selection = [
        r
        for r in records
        if r.get("type") == "train" and r.get("s_pds") is not None
    ]
    os.makedirs(args.out, exist_ok=True)
    pds_path = os.path.join(args.out, "pds_by_iteration.csv")
    with open(pds_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iteration", "s_pds"])
        for r in selection:
            writer.writerow([r["iteration"], repr(r["s_pds"])])
    sel_path = os.path.join(args.out, "selection_vs_pds.csv")
    with open(sel_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["s_pds", "k_selected", "confidence_sum", "n_total", "beta"])
        for r in selection:
            writer.writerow(
                [
                    repr(r["s_pds"]),
                    r["k_selected"],
                    repr(r["confidence_sum"]),
                    r["n_total"],
                    "" if r["beta"] is None else repr(r["beta"]),
                ]
            )
    if not selection:
        print("error: no selection records in log (empty unsupervised phase)", file=sys.stderr)
        return EXIT_RUNTIME
    print(f"wrote {len(selection)} rows to {pds_path} and {sel_path}")
    return EXIT_OK


_COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "sweep-beta": cmd_sweep_beta,
    "analyze-density": cmd_analyze_density,
    "export-plots": cmd_export_plots,
}


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except (ConfigError, GenerationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingDiverged as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
