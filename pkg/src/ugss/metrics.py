"""Segmentation metrics and the paired signed-rank comparison.

Surface definition: a mask voxel is a surface voxel when at least one of
its six face neighbors is outside the mask or it lies on the array border.
Surface-to-surface distances are Euclidean between voxel centers honoring
anisotropic spacing (computed with an exact distance transform, verified
against a brute-force pairwise oracle in the test suite).

Conventions for degenerate inputs: Dice and Surface Dice of two empty
masks are 1.0 (perfect agreement); HD95 is undefined (NaN) when either
mask is empty, and undefined cells are counted but excluded from
aggregates.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage
from scipy.stats import rankdata

from .core_data import DatasetManifest, OrganId, ORGANS
from .errors import ValidationError

_FACE_STRUCT = ndimage.generate_binary_structure(3, 1)


def dice(a: np.ndarray, b: np.ndarray) -> float:
    """Volumetric Dice overlap; 1.0 when both masks are empty."""
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ValidationError(f"mask shapes differ: {a.shape} vs {b.shape}")
    denom = int(a.sum()) + int(b.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int((a & b).sum()) / denom


def surface_voxels(mask: np.ndarray) -> np.ndarray:
    """Mask voxels with a face neighbor outside the mask or on the border."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        return np.zeros_like(mask)
    eroded = ndimage.binary_erosion(mask, structure=_FACE_STRUCT, border_value=0)
    return mask & ~eroded


def _surface_distances(a: np.ndarray, b: np.ndarray, spacing):
    """Directed distances (d_a_to_b, d_b_to_a) between surface voxel sets."""
    surf_a = surface_voxels(a)
    surf_b = surface_voxels(b)
    n_a, n_b = int(surf_a.sum()), int(surf_b.sum())

    def distances_to(surf_from_count, surf_from, surf_to):
        if surf_from_count == 0:
            return np.empty(0, dtype=np.float64)
        if not surf_to.any():
            return np.full(surf_from_count, np.inf)
        dt = ndimage.distance_transform_edt(~surf_to, sampling=spacing)
        return dt[surf_from]

    return (distances_to(n_a, surf_a, surf_b),
            distances_to(n_b, surf_b, surf_a))


def surface_dice(a: np.ndarray, b: np.ndarray, tolerance_mm: float, spacing) -> float:
    """Fraction of surface voxels within ``tolerance_mm`` of the other surface."""
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ValidationError(f"mask shapes differ: {a.shape} vs {b.shape}")
    d_ab, d_ba = _surface_distances(a, b, spacing)
    total = d_ab.size + d_ba.size
    if total == 0:
        return 1.0
    hits = int((d_ab <= tolerance_mm).sum()) + int((d_ba <= tolerance_mm).sum())
    return hits / total


def hd95(a: np.ndarray, b: np.ndarray, spacing) -> float:
    """95th-percentile symmetric surface distance in mm; NaN if a mask is empty."""
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ValidationError(f"mask shapes differ: {a.shape} vs {b.shape}")
    if not a.any() or not b.any():
        return float("nan")
    d_ab, d_ba = _surface_distances(a, b, spacing)
    return float(max(np.percentile(d_ab, 95), np.percentile(d_ba, 95)))


# ---------------------------------------------------------------------------
# per-dataset evaluation


@dataclass
class MetricRow:
    scan_id: str
    organ: OrganId
    dice: float
    surface_dice: float
    hd95_mm: float  # NaN = undefined (empty mask)


def _mean_std(values: list[float]) -> tuple[float, float, int]:
    """(mean, sample std, n_undefined) over the defined entries."""
    arr = np.asarray(values, dtype=np.float64)
    defined = arr[~np.isnan(arr)]
    n_undef = int(np.isnan(arr).sum())
    if defined.size == 0:
        return float("nan"), float("nan"), n_undef
    std = float(np.std(defined, ddof=1)) if defined.size > 1 else 0.0
    return float(np.mean(defined)), std, n_undef


@dataclass
class MetricsTable:
    rows: list[MetricRow] = field(default_factory=list)
    tolerance_mm: float = 2.5

    def add(self, scan_id: str, organ: OrganId, d: float, sd: float, hd: float):
        self.rows.append(MetricRow(scan_id, organ, d, sd, hd))

    def scan_ids(self) -> list[str]:
        seen = dict.fromkeys(r.scan_id for r in self.rows)
        return list(seen)

    def per_scan_means(self, metric: str) -> dict[str, float]:
        """Mean over organs per scan; undefined cells are excluded."""
        out = {}
        for sid in self.scan_ids():
            vals = [getattr(r, metric) for r in self.rows if r.scan_id == sid]
            mean, _, _ = _mean_std(vals)
            out[sid] = mean
        return out

    def per_scan_mean_stats(self) -> dict[str, tuple[float, float, int]]:
        """Mean/std over scans of the per-scan organ means (headline style)."""
        stats = {}
        for metric in ("dice", "surface_dice", "hd95_mm"):
            means = list(self.per_scan_means(metric).values())
            stats[metric] = _mean_std(means)
        return stats

    def per_organ_stats(self) -> dict[OrganId, dict[str, tuple[float, float, int]]]:
        stats = {}
        for organ in ORGANS:
            organ_rows = [r for r in self.rows if r.organ == organ]
            stats[organ] = {
                metric: _mean_std([getattr(r, metric) for r in organ_rows])
                for metric in ("dice", "surface_dice", "hd95_mm")
            }
        return stats

    def to_csv(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        lines = ["scan_id,organ,dice,surface_dice,hd95_mm"]
        for r in self.rows:
            lines.append(f"{r.scan_id},{r.organ.key},{r.dice:.6f},"
                         f"{r.surface_dice:.6f},{r.hd95_mm:.6f}")
        path.write_text("\n".join(lines) + "\n")
        return path

    def aggregates_json(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        per_scan = self.per_scan_mean_stats()
        per_organ = self.per_organ_stats()
        payload = {
            "tolerance_mm": self.tolerance_mm,
            "n_scans": len(self.scan_ids()),
            "per_scan_mean": {
                m: {"mean": v[0], "std": v[1], "n_undefined": v[2]}
                for m, v in per_scan.items()},
            "per_organ": {
                o.key: {m: {"mean": v[0], "std": v[1], "n_undefined": v[2]}
                        for m, v in stats.items()}
                for o, stats in per_organ.items()},
        }
        path.write_text(json.dumps(payload, sort_keys=True, indent=2, allow_nan=True) + "\n")
        return path


def score_record(pred_masks: dict[OrganId, np.ndarray],
                 ref_masks: dict[OrganId, np.ndarray],
                 spacing, scan_id: str, table: MetricsTable):
    for organ in ORGANS:
        table.add(scan_id, organ,
                  dice(pred_masks[organ], ref_masks[organ]),
                  surface_dice(pred_masks[organ], ref_masks[organ],
                               table.tolerance_mm, spacing),
                  hd95(pred_masks[organ], ref_masks[organ], spacing))


def evaluate_dataset(model, test_manifest: DatasetManifest,
                     patch_depth: int = 32, overlap: float = 0.5,
                     tolerance_mm: float = 2.5) -> MetricsTable:
    """Full-volume inference on every test record, scored against its labels.

    Test records must be fully annotated. Aggregation is available both
    per-organ and as per-scan means via :class:`MetricsTable`.
    """
    from . import core_data, impute  # deferred: torch import is heavy

    table = MetricsTable(tolerance_mm=tolerance_mm)
    for entry in test_manifest.records:
        record = core_data.read_container(entry.path)
        if not record.labels.fully_annotated():
            raise ValidationError(f"test record {record.id!r} is not fully annotated")
        mean_probs, _ = impute.predict_full_volume(model, record, patch_depth, overlap)
        cmap = np.argmax(mean_probs, axis=0)
        pred = core_data.masks_from_class_map(cmap)
        ref = {o: record.labels.masks[o] for o in ORGANS}
        score_record(pred, ref, record.image.spacing, record.id, table)
    return table


# ---------------------------------------------------------------------------
# Wilcoxon signed-rank test


@dataclass
class WilcoxonResult:
    statistic: float  # min of positive/negative rank sums
    p_value: float  # NaN when degenerate (all differences zero)
    n: int  # pairs remaining after dropping zero differences
    method: str  # "exact", "normal", or "degenerate"


EXACT_LIMIT = 20  # exact enumeration below this many nonzero pairs


def _exact_two_sided_p(ranks: np.ndarray, w_min: float) -> float:
    """P(min(W+, W-) <= w_min) under random signs, by enumeration.

    Uses a convolution over doubled ranks (ties make ranks half-integral) —
    equivalent to enumerating all 2^n sign patterns.
    """
    doubled = np.rint(2.0 * ranks).astype(np.int64)
    total = int(doubled.sum())
    counts = np.zeros(total + 1, dtype=np.float64)
    counts[0] = 1.0
    for r in doubled:
        shifted = np.zeros_like(counts)
        shifted[r:] = counts[:counts.size - r]
        counts = counts + shifted
    w2 = int(round(2.0 * w_min))
    cdf_low = counts[:min(w2, total) + 1].sum() / counts.sum()
    return min(1.0, 2.0 * cdf_low)


def wilcoxon_signed_rank(x, y) -> WilcoxonResult:
    """Two-sided Wilcoxon signed-rank test on paired samples.

    Zero differences are dropped; ties in |difference| get average ranks.
    Below ``EXACT_LIMIT`` nonzero pairs the p-value is computed by exact
    sign-pattern enumeration, above it by the normal approximation with tie
    correction. All-zero differences yield a degenerate marker (p = NaN).
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValidationError("wilcoxon_signed_rank expects two equal-length 1D samples")
    d = x - y
    d = d[d != 0]
    n = d.size
    if n == 0:
        return WilcoxonResult(statistic=0.0, p_value=float("nan"), n=0, method="degenerate")
    if n < 6:
        raise ValidationError(f"need >= 6 nonzero differences, got {n}")

    ranks = rankdata(np.abs(d), method="average")
    w_plus = float(ranks[d > 0].sum())
    w_minus = float(ranks[d < 0].sum())
    w = min(w_plus, w_minus)

    if n < EXACT_LIMIT:
        p = _exact_two_sided_p(ranks, w)
        return WilcoxonResult(statistic=w, p_value=p, n=n, method="exact")

    mean = n * (n + 1) / 4.0
    var = n * (n + 1) * (2 * n + 1) / 24.0
    _, tie_counts = np.unique(ranks, return_counts=True)
    var -= float(((tie_counts ** 3 - tie_counts) / 48.0).sum())
    if var <= 0:
        return WilcoxonResult(statistic=w, p_value=float("nan"), n=n, method="degenerate")
    z = (w - mean) / math.sqrt(var)
    p = min(1.0, math.erfc(-z / math.sqrt(2.0)))  # z <= 0 by construction
    return WilcoxonResult(statistic=w, p_value=p, n=n, method="normal")
