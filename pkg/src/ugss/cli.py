"""Command-line pipeline orchestration (``ugss`` console script).

Commands: generate, preprocess, clean, train-teacher, impute,
train-student, evaluate, ablation, plot. Configuration is JSON
(see ``docs/config_schema.json``); ``--seed`` overrides the config seed.
Exit codes: 0 success, 1 runtime failure, 2 configuration/validation
error. Every command writes a ``run.json`` provenance record into its
output directory. Intermediate ablation artifacts go to
``$UGSS_CACHE_DIR`` when set, else ``<out>/cache``.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__, core_data
from .errors import ConfigError, UgssError, ValidationError

CACHE_ENV = "UGSS_CACHE_DIR"


def _load_config(path: str | None) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    try:
        return json.loads(p.read_text("utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {p} is not valid JSON: {exc}") from exc


def _write_run_record(out_dir: Path, args, config_path: str | None,
                      seed, started: float):
    import torch

    out_dir.mkdir(parents=True, exist_ok=True)
    config_hash = None
    if config_path and Path(config_path).exists():
        config_hash = hashlib.sha256(Path(config_path).read_bytes()).hexdigest()
    record = {
        "command": args.command,
        "argv": sys.argv[1:],
        "config_path": config_path,
        "config_sha256": config_hash,
        "seed": seed,
        "versions": {
            "ugss": __version__,
            "python": sys.version.split()[0],
            "numpy": np.__version__,
            "torch": torch.__version__,
        },
        "started_utc": datetime.fromtimestamp(started, tz=timezone.utc).isoformat(),
        "wall_time_s": round(time.time() - started, 3),
    }
    (out_dir / "run.json").write_text(json.dumps(record, sort_keys=True, indent=2) + "\n")


# ---------------------------------------------------------------------------
# command implementations


def cmd_generate(args) -> int:
    from .phantom import PhantomConfig, generate_dataset

    cfg = _load_config(args.config)
    n = int(cfg.get("n", 10))
    phantom_cfg = PhantomConfig.from_dict(cfg.get("phantom", {}))
    if args.seed is not None:
        import dataclasses
        phantom_cfg = dataclasses.replace(phantom_cfg, seed=args.seed)
    out = Path(args.out)
    manifest = generate_dataset(phantom_cfg, n, out)
    full, partial = core_data.split_by_availability(manifest)
    print(f"generated {len(manifest)} records -> {out}")
    print(f"fully annotated: {len(full)}, partially annotated: {len(partial)}")
    return 0


def cmd_preprocess(args) -> int:
    from .preprocess import preprocess_dataset

    cfg = _load_config(args.config)
    spacing = tuple(cfg.get("target_spacing_mm", [2.5, 2.5, 2.5]))
    manifest = core_data.load_manifest(args.manifest)
    out_manifest = preprocess_dataset(
        manifest, args.out, spacing,
        level=float(cfg.get("window_level", 40.0)),
        width=float(cfg.get("window_width", 400.0)))
    print(f"preprocessed {len(out_manifest)} records -> {args.out}")
    return 0


def cmd_clean(args) -> int:
    from .autoclean import CleaningThresholds, clean_dataset, compute_extent_histograms

    cfg = _load_config(args.config)
    thresholds = CleaningThresholds.from_dict(cfg)
    manifest = core_data.load_manifest(args.manifest)
    out = Path(args.out)

    with_hips = [e.id for e in manifest.records
                 if core_data.read_meta(e.path)["organs"]["hips"]["available"]]
    if with_hips:
        scan_h, bowel_h = compute_extent_histograms(
            manifest.subset(with_hips), float(cfg.get("histogram_bin_mm", 10.0)))
        scan_h.to_csv(out / "scan_extent.csv")
        bowel_h.to_csv(out / "bowel_extent.csv")

    cleaned, report = clean_dataset(manifest, thresholds, out / "cleaned")
    report.to_json(out / "cleaning_report.json")
    print(f"kept {report.kept} / {report.n_input} "
          f"(discarded {report.discarded}, modified {report.modified}, "
          f"skipped {report.skipped_no_landmark})")
    return 0


def _fold_records(manifest, cfg, seed):
    from .training import make_folds

    folds = int(cfg.get("folds", 5))
    fold_index = int(cfg.get("fold_index", 0))
    if not 0 <= fold_index < folds:
        raise ConfigError(f"fold_index {fold_index} outside [0, {folds})")
    plan = make_folds(manifest.ids(), folds, seed)
    fold = plan.folds[fold_index]
    train = core_data.load_records(manifest.subset(fold.train_ids))
    val = core_data.load_records(manifest.subset(fold.val_ids))
    return train, val


def _train_config(cfg: dict, seed: int, role: str):
    from .augment import AugmentConfig
    from .model import ModelConfig
    from .training import TrainConfig

    augment = cfg.get("augment")
    return TrainConfig(
        role=role,
        epochs=int(cfg.get("epochs", 30 if role == "teacher" else 15)),
        patch_depth=int(cfg.get("patch_depth", 32)),
        lr=float(cfg.get("lr", 1e-3)),
        weight_decay=float(cfg.get("weight_decay", 1e-4)),
        lr_decay_gamma=float(cfg.get("lr_decay_gamma", 0.1)),
        augment=AugmentConfig(**augment) if augment else None,
        seed=seed,
        model=ModelConfig(**cfg.get("model", {})),
    )


def cmd_train_teacher(args) -> int:
    from .training import train_teacher

    cfg = _load_config(args.config)
    seed = args.seed if args.seed is not None else int(cfg.get("seed", 0))
    manifest = core_data.load_manifest(args.manifest)
    full, partial = core_data.split_by_availability(manifest)
    if len(full) == 0:
        raise ConfigError("manifest contains no fully annotated records to train a teacher")
    if len(partial):
        print(f"teacher trains on the fully annotated subset: "
              f"{len(full)} of {len(manifest)} records")
    train, val = _fold_records(full, cfg, seed)
    result = train_teacher(train, val, _train_config(cfg, seed, "teacher"))
    out = Path(args.out)
    result.save_checkpoint(out / "checkpoint.pt")
    result.curves_to_csv(out / "curves.csv")
    print(f"teacher trained: {result.steps} steps, "
          f"best mean val dice {result.best_val_dice:.4f} (epoch {result.best_epoch})")
    return 0


def cmd_impute(args) -> int:
    from .impute import impute_dataset
    from .model import load_checkpoint

    model, _, _ = load_checkpoint(args.checkpoint)
    manifest = core_data.load_manifest(args.manifest)
    out = Path(args.out)
    imputed, report = impute_dataset(model, manifest, out / "imputed",
                                     patch_depth=args.patch_depth)
    report.to_json(out / "impute_report.json")
    print(f"imputed {report.n_records - report.n_passed_through} records "
          f"({report.n_passed_through} passed through); per organ: "
          f"{report.imputed_per_organ}")
    return 0


def cmd_train_student(args) -> int:
    from .training import train_student

    cfg = _load_config(args.config)
    seed = args.seed if args.seed is not None else int(cfg.get("seed", 0))
    manifest = core_data.load_manifest(args.manifest)

    # validate on records whose labels are entirely clinical
    clinical_ids = []
    for entry in manifest.records:
        organs = core_data.read_meta(entry.path)["organs"]
        if all(o["source"] == "CLINICAL" for o in organs.values()):
            clinical_ids.append(entry.id)
    if not clinical_ids:
        raise ConfigError("imputed manifest contains no fully clinical records "
                          "to validate on")
    _, val = _fold_records(manifest.subset(clinical_ids), cfg, seed)
    val_ids = {r.id for r in val}
    train = core_data.load_records(
        manifest.subset([i for i in manifest.ids() if i not in val_ids]))

    result = train_student(train, val, _train_config(cfg, seed, "student"))
    out = Path(args.out)
    result.save_checkpoint(out / "checkpoint.pt")
    result.curves_to_csv(out / "curves.csv")
    print(f"student trained: {result.steps} steps, "
          f"best mean val dice {result.best_val_dice:.4f} (epoch {result.best_epoch})")
    return 0


def cmd_evaluate(args) -> int:
    from .metrics import evaluate_dataset
    from .model import load_checkpoint

    model, _, _ = load_checkpoint(args.checkpoint)
    manifest = core_data.load_manifest(args.manifest)
    table = evaluate_dataset(model, manifest, patch_depth=args.patch_depth,
                             tolerance_mm=args.tolerance)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    table.to_csv(out / "metrics.csv")
    table.aggregates_json(out / "aggregates.json")
    stats = table.per_scan_mean_stats()
    d, sd, hd = stats["dice"], stats["surface_dice"], stats["hd95_mm"]
    print(f"dice {d[0]:.4f} ({d[1]:.4f})  surface dice {sd[0]:.4f} ({sd[1]:.4f})  "
          f"hd95 {hd[0]:.2f} ({hd[1]:.2f}) mm  [n={len(table.scan_ids())}]")
    return 0


def cmd_ablation(args) -> int:
    from .ablation import ExperimentConfig, run_ablation

    cfg_dict = _load_config(args.config)
    if args.seed is not None:
        cfg_dict["seed"] = args.seed
    cfg = ExperimentConfig.from_dict(cfg_dict)
    cache_dir = os.environ.get(CACHE_ENV) or None
    status = run_ablation(cfg, args.out, cache_dir=cache_dir,
                          parallel_folds=args.parallel_folds)
    failed = {f: {a: s for a, s in arms.items() if s != "ok"}
              for f, arms in status.items()}
    failed = {f: a for f, a in failed.items() if a}
    print(f"ablation complete -> {args.out}/table1.csv")
    if failed:
        print(f"WARNING: some arms failed: {json.dumps(failed)[:500]}", file=sys.stderr)
    return 0


def _read_csv(path: Path) -> list[dict]:
    lines = path.read_text().strip().splitlines()
    header = lines[0].split(",")
    return [dict(zip(header, line.split(","))) for line in lines[1:]]


def cmd_plot(args) -> int:
    from .svgplot import bar_chart_svg, histogram_svg

    results = Path(args.results)
    out = Path(args.out) if args.out else results
    if not results.exists():
        raise ConfigError(f"results directory {results} does not exist")
    made = []

    table = results / "table1.csv"
    if table.exists():
        rows = _read_csv(table)
        labels = [r["method"] for r in rows]
        for metric, title in (("dice", "Dice (per-scan mean)"),
                              ("surface_dice", "Surface Dice (per-scan mean)"),
                              ("hd95", "HD95 [mm] (per-scan mean)")):
            values = [float(r[f"{metric}_mean"]) for r in rows]
            errors = [float(r[f"{metric}_std"]) for r in rows]
            made.append(bar_chart_svg(out / f"{metric}.svg", title, labels, values, errors))

    for name, title in (("scan_extent", "Scan cranial border vs hip landmark"),
                        ("bowel_extent", "Bowel-bag cranial border vs hip landmark")):
        csv = results / f"{name}.csv"
        if csv.exists():
            rows = _read_csv(csv)
            lefts = [float(r["bin_left_mm"]) for r in rows]
            counts = [int(r["count"]) for r in rows]
            width = lefts[1] - lefts[0] if len(lefts) > 1 else 10.0
            made.append(histogram_svg(out / f"{name}.svg", title, lefts, counts, width))

    if not made:
        raise ConfigError(f"nothing to plot in {results} "
                          "(no table1.csv or extent histogram CSVs)")
    print("wrote " + ", ".join(str(p) for p in made))
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ugss",
        description="Semi-supervised organ segmentation pipeline on synthetic phantoms")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, **kw):
        p = sub.add_parser(name, **kw)
        p.set_defaults(fn=fn)
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        return p

    p = add("generate", cmd_generate, help="generate a phantom dataset")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)

    p = add("preprocess", cmd_preprocess, help="standardize, resample, and window a dataset")
    p.add_argument("--config", default=None)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)

    p = add("clean", cmd_clean, help="apply landmark-relative cleaning")
    p.add_argument("--config", required=True, help="thresholds JSON")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)

    p = add("train-teacher", cmd_train_teacher, help="train a K-head teacher")
    p.add_argument("--config", required=True)
    p.add_argument("--manifest", required=True, help="cleaned fully annotated manifest")
    p.add_argument("--out", required=True)

    p = add("impute", cmd_impute, help="impute missing annotations with a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--patch-depth", type=int, default=32)

    p = add("train-student", cmd_train_student, help="train a student on imputed data")
    p.add_argument("--config", required=True)
    p.add_argument("--manifest", required=True, help="imputed manifest")
    p.add_argument("--out", required=True)

    p = add("evaluate", cmd_evaluate, help="score a checkpoint on a test manifest")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--patch-depth", type=int, default=32)
    p.add_argument("--tolerance", type=float, default=2.5)

    p = add("ablation", cmd_ablation, help="run the multi-arm ablation")
    p.add_argument("--config", required=True, help="experiment JSON")
    p.add_argument("--out", required=True)
    p.add_argument("--parallel-folds", type=int, default=1)

    p = add("plot", cmd_plot, help="emit SVG charts from a results directory")
    p.add_argument("--results", required=True)
    p.add_argument("--out", default=None)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    started = time.time()
    try:
        code = args.fn(args)
    except (ConfigError, ValidationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except UgssError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception:
        import traceback
        traceback.print_exc()
        return 1
    out = getattr(args, "out", None)
    if out:
        _write_run_record(Path(out), args, getattr(args, "config", None),
                          getattr(args, "seed", None), started)
    return code


if __name__ == "__main__":
    sys.exit(main())
