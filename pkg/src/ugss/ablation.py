"""The multi-arm ablation harness behind ``ugss ablation``.

Produces a headline results table (per-scan-mean Dice / Surface Dice /
HD95 per arm), per-organ appendix tables, and pairwise Wilcoxon
comparisons against the two baseline arms, over a shared phantom dataset,
cleaning pass, and cross-validation fold plan.

Arms: two plain-U-Net baselines (uncleaned / cleaned data), K-head
teachers with basic or additional augmentations, students trained on
imputed data with the uncertainty-weighted loss, and repeated
teacher-student iterations where each student becomes the next imputer.
All trainings for fold f share seed (base_seed * 1000 + f), so arms are
paired fold-for-fold. Per-arm failures are isolated and reported in
``run_status.json``; successful arms still produce rows.
"""

from __future__ import annotations

import dataclasses
import json
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import core_data, impute
from .autoclean import CleaningThresholds, clean_dataset, compute_extent_histograms
from .augment import AugmentConfig, Tier
from .core_data import DatasetManifest, ORGANS
from .errors import ConfigError
from .metrics import MetricsTable, evaluate_dataset, wilcoxon_signed_rank
from .model import ModelConfig
from .phantom import PhantomConfig, generate_dataset
from .preprocess import preprocess_dataset
from .training import (
    TrainConfig,
    make_folds,
    student_config,
    teacher_config,
    train_plain_unet,
    train_student,
    train_teacher,
)

ARM_BASELINE_FULL = "baseline_full"
ARM_BASELINE_CLEAN = "baseline_clean"
ARM_BASIC_TEACHER = "basic_teacher"
ARM_BASIC_STUDENT = "basic_student"
ARM_ROBUST_TEACHER = "robust_teacher"
ARM_BASIC_T_ROBUST_S = "basic_teacher+robust_student"
ARM_ROBUST_T_ROBUST_S = "robust_teacher+robust_student"
ARM_ITER2 = "robust_teacher+robust_student-iter2"
ARM_ITER3 = "robust_teacher+robust_student-iter3"

ALL_ARMS = [ARM_BASELINE_FULL, ARM_BASELINE_CLEAN, ARM_BASIC_TEACHER, ARM_BASIC_STUDENT,
            ARM_ROBUST_TEACHER, ARM_BASIC_T_ROBUST_S, ARM_ROBUST_T_ROBUST_S,
            ARM_ITER2, ARM_ITER3]
ARM_ALIASES = {"iter2": ARM_ITER2, "iter3": ARM_ITER3}

METRICS = ("dice", "surface_dice", "hd95_mm")


@dataclass
class ExperimentConfig:
    seed: int = 7
    folds: int = 5
    n_train: int = 60
    n_test: int = 12
    phantom: PhantomConfig = field(default_factory=PhantomConfig)
    thresholds: CleaningThresholds = field(
        default_factory=lambda: CleaningThresholds(105.0, 80.0, 20.0))
    model: ModelConfig = field(default_factory=ModelConfig)
    teacher_epochs: int = 30
    student_epochs: int = 15
    patch_depth: int = 32
    arms: list[str] = field(default_factory=lambda: list(ALL_ARMS))
    tolerance_mm: float = 2.5
    histogram_bin_mm: float = 10.0

    def __post_init__(self):
        self.arms = [ARM_ALIASES.get(a, a) for a in self.arms]
        unknown = [a for a in self.arms if a not in ALL_ARMS]
        if unknown:
            raise ConfigError(f"unknown ablation arms: {unknown}; valid: {ALL_ARMS}")

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        if "phantom" in d:
            d["phantom"] = PhantomConfig.from_dict(d["phantom"])
        if "thresholds" in d:
            d["thresholds"] = CleaningThresholds.from_dict(d["thresholds"])
        if "model" in d:
            d["model"] = ModelConfig(**d["model"])
        return cls(**d)

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["phantom"]["availability_probs"] = {
            o.key: p for o, p in self.phantom.availability_probs.items()}
        return out


def _basic_augment(seed: int) -> AugmentConfig:
    return AugmentConfig(tier=Tier.BASIC, seed=seed)


def _additional_augment(seed: int) -> AugmentConfig:
    return AugmentConfig(tier=Tier.ADDITIONAL, seed=seed)


@dataclass
class PreparedData:
    full_manifest: Path  # preprocessed, uncleaned fully annotated
    cleaned_full_manifest: Path
    cleaned_partial_manifest: Path
    test_manifest: Path
    cleaning_report: dict
    scan_hist_csv: Path
    bowel_hist_csv: Path


def prepare_data(cfg: ExperimentConfig, cache_dir: str | Path,
                 results_dir: str | Path) -> PreparedData:
    """Generate, preprocess, split, and clean the phantom pools (deterministic)."""
    cache_dir = Path(cache_dir)
    results_dir = Path(results_dir)
    results_dir.mkdir(parents=True, exist_ok=True)

    train_phantom = cfg.phantom
    test_phantom = dataclasses.replace(
        cfg.phantom, seed=cfg.phantom.seed + 1,
        availability_probs={o: 1.0 for o in ORGANS},
        cranial_extent_jitter=0, bowel_overannotation_prob=0.0)

    raw_train = generate_dataset(train_phantom, cfg.n_train, cache_dir / "raw_train")
    raw_test = generate_dataset(test_phantom, cfg.n_test, cache_dir / "raw_test")
    prep_train = preprocess_dataset(raw_train, cache_dir / "prep_train")
    prep_test = preprocess_dataset(raw_test, cache_dir / "prep_test")

    full, partial = core_data.split_by_availability(prep_train)
    if len(full) < cfg.folds:
        raise ConfigError(
            f"only {len(full)} fully annotated records for {cfg.folds} folds; "
            "increase n_train or availability probabilities")
    core_data.save_manifest(full, cache_dir / "full_manifest.json")

    scan_h, bowel_h = compute_extent_histograms(full, cfg.histogram_bin_mm)
    scan_csv = scan_h.to_csv(results_dir / "scan_extent.csv")
    bowel_csv = bowel_h.to_csv(results_dir / "bowel_extent.csv")

    cleaned_full, report = clean_dataset(full, cfg.thresholds, cache_dir / "full_clean")
    cleaned_partial, _ = clean_dataset(partial, cfg.thresholds, cache_dir / "partial_clean")
    report.to_json(results_dir / "cleaning_report.json")

    return PreparedData(
        full_manifest=cache_dir / "full_manifest.json",
        cleaned_full_manifest=cache_dir / "full_clean" / "manifest.json",
        cleaned_partial_manifest=cache_dir / "partial_clean" / "manifest.json",
        test_manifest=cache_dir / "prep_test" / "manifest.json",
        cleaning_report=json.loads((results_dir / "cleaning_report.json").read_text()),
        scan_hist_csv=scan_csv,
        bowel_hist_csv=bowel_csv,
    )


class FoldPipeline:
    """Lazily trains and caches the models one fold needs across arms."""

    def __init__(self, cfg: ExperimentConfig, prepared: PreparedData,
                 fold_index: int, out_dir: Path):
        self.cfg = cfg
        self.fold = fold_index
        self.seed = cfg.seed * 1000 + fold_index
        self.out_dir = Path(out_dir)
        self.test_manifest = core_data.load_manifest(prepared.test_manifest)
        self.full = core_data.load_manifest(prepared.full_manifest)
        self.cleaned_full = core_data.load_manifest(prepared.cleaned_full_manifest)
        self.cleaned_partial = core_data.load_manifest(prepared.cleaned_partial_manifest)
        self._cache: dict[str, object] = {}

    def _fold_split(self, manifest: DatasetManifest):
        plan = make_folds(manifest.ids(), self.cfg.folds, self.cfg.seed)
        fold = plan.folds[self.fold]
        train = core_data.load_records(manifest.subset(fold.train_ids))
        val = core_data.load_records(manifest.subset(fold.val_ids))
        return train, val, manifest.subset(fold.train_ids)

    def _train_cfg(self, maker, epochs: int, robust: bool, k_override=None) -> TrainConfig:
        model = self.cfg.model if k_override is None \
            else dataclasses.replace(self.cfg.model, k=k_override)
        aug = _additional_augment(self.seed) if robust else _basic_augment(self.seed)
        return maker(epochs=epochs, patch_depth=self.cfg.patch_depth, model=model,
                     augment=aug, seed=self.seed)

    def baseline(self, cleaned: bool):
        key = f"baseline_{'clean' if cleaned else 'full'}"
        if key not in self._cache:
            manifest = self.cleaned_full if cleaned else self.full
            train, val, _ = self._fold_split(manifest)
            cfg = self._train_cfg(teacher_config, self.cfg.teacher_epochs,
                                  robust=False, k_override=1)
            self._cache[key] = train_plain_unet(train, val, cfg)
            self._save(key, self._cache[key])
        return self._cache[key]

    def teacher(self, robust: bool):
        key = f"teacher_{'robust' if robust else 'basic'}"
        if key not in self._cache:
            train, val, _ = self._fold_split(self.cleaned_full)
            cfg = self._train_cfg(teacher_config, self.cfg.teacher_epochs, robust)
            self._cache[key] = train_teacher(train, val, cfg)
            self._save(key, self._cache[key])
        return self._cache[key]

    def _imputed_manifest(self, imputer_key: str, imputer_result) -> DatasetManifest:
        key = f"imputed_by_{imputer_key}"
        if key not in self._cache:
            _, _, train_full_manifest = self._fold_split(self.cleaned_full)
            combined = DatasetManifest(
                records=list(train_full_manifest.records) + list(self.cleaned_partial.records))
            out = self.out_dir / key.replace("+", "_")
            manifest, _ = impute.impute_dataset(
                imputer_result.best_model(), combined, out,
                patch_depth=self.cfg.patch_depth)
            self._cache[key] = manifest
        return self._cache[key]

    def student(self, teacher_robust: bool, robust: bool, iteration: int = 1):
        key = f"student_t{'R' if teacher_robust else 'B'}_s{'R' if robust else 'B'}_i{iteration}"
        if key not in self._cache:
            if iteration == 1:
                imputer_key = f"teacher_{'robust' if teacher_robust else 'basic'}"
                imputer = self.teacher(teacher_robust)
            else:
                imputer = self.student(teacher_robust, robust, iteration - 1)
                imputer_key = f"student_i{iteration - 1}"
            imputed = self._imputed_manifest(imputer_key, imputer)
            _, val, _ = self._fold_split(self.cleaned_full)
            train = core_data.load_records(imputed)
            cfg = self._train_cfg(student_config, self.cfg.student_epochs, robust)
            self._cache[key] = train_student(train, val, cfg)
            self._save(key, self._cache[key])
        return self._cache[key]

    def _save(self, key: str, result):
        arm_dir = self.out_dir / key.replace("+", "_")
        result.save_checkpoint(arm_dir / "checkpoint.pt")
        result.curves_to_csv(arm_dir / "curves.csv")

    def result_for_arm(self, arm: str):
        if arm == ARM_BASELINE_FULL:
            return self.baseline(cleaned=False)
        if arm == ARM_BASELINE_CLEAN:
            return self.baseline(cleaned=True)
        if arm == ARM_BASIC_TEACHER:
            return self.teacher(robust=False)
        if arm == ARM_ROBUST_TEACHER:
            return self.teacher(robust=True)
        if arm == ARM_BASIC_STUDENT:
            return self.student(teacher_robust=False, robust=False)
        if arm == ARM_BASIC_T_ROBUST_S:
            return self.student(teacher_robust=False, robust=True)
        if arm == ARM_ROBUST_T_ROBUST_S:
            return self.student(teacher_robust=True, robust=True)
        if arm == ARM_ITER2:
            return self.student(teacher_robust=True, robust=True, iteration=2)
        if arm == ARM_ITER3:
            return self.student(teacher_robust=True, robust=True, iteration=3)
        raise ConfigError(f"unknown arm {arm!r}")

    def evaluate_arm(self, arm: str) -> MetricsTable:
        result = self.result_for_arm(arm)
        table = evaluate_dataset(result.best_model(), self.test_manifest,
                                 patch_depth=self.cfg.patch_depth,
                                 tolerance_mm=self.cfg.tolerance_mm)
        table.to_csv(self.out_dir / "metrics" / f"{arm.replace('+', '_')}.csv")
        return table


def _fold_job(cfg_dict: dict, prepared_paths: dict, fold_index: int,
              out_dir: str) -> tuple[list[dict], dict]:
    """Run every requested arm for one fold; returns (rows, status)."""
    cfg = ExperimentConfig.from_dict(cfg_dict)
    prepared = PreparedData(**{k: Path(v) if isinstance(v, str) else v
                               for k, v in prepared_paths.items()})
    pipeline = FoldPipeline(cfg, prepared, fold_index,
                            Path(out_dir) / "arms" / f"fold_{fold_index}")
    rows: list[dict] = []
    status: dict[str, str] = {}
    for arm in cfg.arms:
        try:
            table = pipeline.evaluate_arm(arm)
        except Exception as exc:
            status[arm] = f"failed: {exc}\n{traceback.format_exc()}"
            continue
        status[arm] = "ok"
        for r in table.rows:
            rows.append({"arm": arm, "fold": fold_index, "scan_id": r.scan_id,
                         "organ": r.organ.key, "dice": r.dice,
                         "surface_dice": r.surface_dice, "hd95_mm": r.hd95_mm})
    return rows, status


def _fmt(x: float) -> str:
    return f"{x:.6f}"


def _write_rows_csv(rows: list[dict], path: Path):
    lines = ["arm,fold,scan_id,organ,dice,surface_dice,hd95_mm"]
    for r in rows:
        lines.append(f"{r['arm']},{r['fold']},{r['scan_id']},{r['organ']},"
                     f"{_fmt(r['dice'])},{_fmt(r['surface_dice'])},{_fmt(r['hd95_mm'])}")
    path.write_text("\n".join(lines) + "\n")


def _per_scan_means(rows: list[dict], arm: str, metric: str) -> dict[tuple, float]:
    """(fold, scan_id) -> mean over organs, NaN cells excluded."""
    grouped: dict[tuple, list[float]] = {}
    for r in rows:
        if r["arm"] != arm:
            continue
        grouped.setdefault((r["fold"], r["scan_id"]), []).append(r[metric])
    out = {}
    for key, values in grouped.items():
        arr = np.asarray(values)
        arr = arr[~np.isnan(arr)]
        out[key] = float(arr.mean()) if arr.size else float("nan")
    return out


def _mean_std(values) -> tuple[float, float]:
    arr = np.asarray(list(values), dtype=np.float64)
    arr = arr[~np.isnan(arr)]
    if arr.size == 0:
        return float("nan"), float("nan")
    std = float(arr.std(ddof=1)) if arr.size > 1 else 0.0
    return float(arr.mean()), std


def write_tables(rows: list[dict], arms: list[str], out_dir: Path):
    """Headline table, per-organ appendix tables, and Wilcoxon comparisons."""
    present = [a for a in arms if any(r["arm"] == a for r in rows)]

    lines = ["method,dice_mean,dice_std,surface_dice_mean,surface_dice_std,"
             "hd95_mean,hd95_std,hd95_undefined"]
    for arm in present:
        cells = [arm]
        for metric in METRICS:
            mean, std = _mean_std(_per_scan_means(rows, arm, metric).values())
            cells += [_fmt(mean), _fmt(std)]
        n_undef = sum(1 for r in rows if r["arm"] == arm and np.isnan(r["hd95_mm"]))
        cells.append(str(n_undef))
        lines.append(",".join(cells))
    (out_dir / "table1.csv").write_text("\n".join(lines) + "\n")

    for metric, name in (("dice", "appendix_dice.csv"), ("surface_dice", "appendix_sd.csv"),
                         ("hd95_mm", "appendix_hd.csv")):
        header = "method," + ",".join(f"{o.key}_mean,{o.key}_std" for o in ORGANS)
        lines = [header]
        for arm in present:
            cells = [arm]
            for organ in ORGANS:
                values = [r[metric] for r in rows
                          if r["arm"] == arm and r["organ"] == organ.key]
                mean, std = _mean_std(values)
                cells += [_fmt(mean), _fmt(std)]
            lines.append(",".join(cells))
        (out_dir / name).write_text("\n".join(lines) + "\n")

    baselines = [a for a in (ARM_BASELINE_FULL, ARM_BASELINE_CLEAN) if a in present]
    lines = ["metric,arm,baseline,n,statistic,p_value,method"]
    for metric in METRICS:
        for arm in present:
            for base in baselines:
                if arm == base:
                    continue
                a = _per_scan_means(rows, arm, metric)
                b = _per_scan_means(rows, base, metric)
                keys = sorted(set(a) & set(b))
                x = np.array([a[k] for k in keys])
                y = np.array([b[k] for k in keys])
                ok = ~(np.isnan(x) | np.isnan(y))
                try:
                    res = wilcoxon_signed_rank(x[ok], y[ok])
                    lines.append(f"{metric},{arm},{base},{res.n},"
                                 f"{_fmt(res.statistic)},{_fmt(res.p_value)},{res.method}")
                except Exception:
                    lines.append(f"{metric},{arm},{base},{int(ok.sum())},nan,nan,skipped")
    (out_dir / "wilcoxon.csv").write_text("\n".join(lines) + "\n")


def run_ablation(cfg: ExperimentConfig, out_dir: str | Path,
                 cache_dir: str | Path | None = None,
                 parallel_folds: int = 1) -> dict:
    """Run the requested arms over all folds; returns the per-arm status map."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cache_dir = Path(cache_dir) if cache_dir else out_dir / "cache"
    prepared = prepare_data(cfg, cache_dir, out_dir)

    prepared_paths = {
        "full_manifest": str(prepared.full_manifest),
        "cleaned_full_manifest": str(prepared.cleaned_full_manifest),
        "cleaned_partial_manifest": str(prepared.cleaned_partial_manifest),
        "test_manifest": str(prepared.test_manifest),
        "cleaning_report": prepared.cleaning_report,
        "scan_hist_csv": str(prepared.scan_hist_csv),
        "bowel_hist_csv": str(prepared.bowel_hist_csv),
    }
    cfg_dict = cfg.to_dict()

    all_rows: list[dict] = []
    status: dict[str, dict[str, str]] = {}
    if parallel_folds > 1:
        with ProcessPoolExecutor(max_workers=parallel_folds) as pool:
            futures = [pool.submit(_fold_job, cfg_dict, prepared_paths, f, str(out_dir))
                       for f in range(cfg.folds)]
            outcomes = [f.result() for f in futures]
    else:
        outcomes = [_fold_job(cfg_dict, prepared_paths, f, str(out_dir))
                    for f in range(cfg.folds)]

    for fold_index, (rows, fold_status) in enumerate(outcomes):
        all_rows.extend(rows)
        status[f"fold_{fold_index}"] = fold_status

    _write_rows_csv(all_rows, out_dir / "per_scan_rows.csv")
    write_tables(all_rows, cfg.arms, out_dir)
    (out_dir / "run_status.json").write_text(
        json.dumps(status, sort_keys=True, indent=2) + "\n")
    return status
