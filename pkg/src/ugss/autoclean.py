"""Automatic data cleaning driven by the hips cranial landmark.

Scans are cropped in the cranial direction, bowel-bag annotations above a
landmark-relative level are deleted, and scans whose bowel-bag annotation
does not reach into the pelvic window are discarded. All distances are in
mm relative to the most cranial hip voxel, so thresholds transfer across
voxel spacings. Rule order is crop -> delete -> discard, with discard
evaluated on the post-deletion mask.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import core_data
from .core_data import DatasetManifest, LabelSet, ManifestEntry, OrganId, ScanRecord
from .errors import ConfigError, LandmarkError

log = logging.getLogger(__name__)


@dataclass
class CleaningThresholds:
    """Landmark-relative distances (mm) governing crop / delete / discard."""

    crop_above_mm: float
    delete_bowel_above_mm: float
    discard_below_mm: float

    def __post_init__(self):
        if self.crop_above_mm < 0:
            raise ConfigError("crop_above_mm must be >= 0 "
                              "(cropping never removes slices at or below the landmark)")
        if not (self.crop_above_mm >= self.delete_bowel_above_mm >= self.discard_below_mm):
            raise ConfigError(
                "thresholds must satisfy crop_above_mm >= delete_bowel_above_mm "
                f">= discard_below_mm, got {self}")

    @classmethod
    def from_dict(cls, d: dict) -> "CleaningThresholds":
        return cls(float(d["crop_above_mm"]), float(d["delete_bowel_above_mm"]),
                   float(d["discard_below_mm"]))


def desk_thresholds(shape_z: int = 64, spacing_z: float = 2.5) -> CleaningThresholds:
    """Default thresholds for the synthetic phantoms.

    Derived from the phantom extent histograms: clean scans put the scan
    border ~0.58*Z and the bowel border ~0.42*Z above the hip landmark, so
    cutting at 0.66*Z / 0.50*Z keeps the clean (unimodal) part of each
    histogram and removes the injected chest / over-annotation modes. The
    discard line at 0.125*Z sits far below any intact bowel annotation.
    """
    extent = shape_z * spacing_z
    return CleaningThresholds(
        crop_above_mm=0.66 * extent,
        delete_bowel_above_mm=0.50 * extent,
        discard_below_mm=0.125 * extent,
    )


@dataclass
class ExtentHistogram:
    bin_edges: np.ndarray  # mm, length = len(counts) + 1
    counts: np.ndarray
    landmark: str
    border: str

    def to_csv(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        lines = ["bin_left_mm,count"]
        for left, c in zip(self.bin_edges[:-1], self.counts):
            lines.append(f"{left:.6f},{int(c)}")
        path.write_text("\n".join(lines) + "\n")
        return path


def hip_cranial_landmark(labels: LabelSet) -> int:
    """Largest z-index containing any hips voxel."""
    if not labels.available[OrganId.HIPS]:
        raise LandmarkError("hips annotation unavailable")
    zs = np.nonzero(labels.masks[OrganId.HIPS].any(axis=(1, 2)))[0]
    if zs.size == 0:
        raise LandmarkError("hips annotation is empty")
    return int(zs.max())


def _bowel_border(labels: LabelSet) -> int | None:
    if not labels.available[OrganId.BOWEL_BAG]:
        return None
    zs = np.nonzero(labels.masks[OrganId.BOWEL_BAG].any(axis=(1, 2)))[0]
    return int(zs.max()) if zs.size else None


def compute_extent_histograms(manifest: DatasetManifest,
                              bin_width_mm: float = 10.0
                              ) -> tuple[ExtentHistogram, ExtentHistogram]:
    """Landmark-relative distance histograms of scan and bowel-bag borders.

    Every record must have a hips annotation; records without a bowel-bag
    annotation contribute to the scan-extent histogram only.
    """
    if len(manifest) == 0:
        raise ConfigError("empty manifest")
    scan_d, bowel_d = [], []
    for entry in manifest.records:
        record = core_data.read_container(entry.path)
        sz = record.image.spacing[0]
        z_lm = hip_cranial_landmark(record.labels)
        scan_d.append((record.image.shape[0] - 1 - z_lm) * sz)
        zb = _bowel_border(record.labels)
        if zb is not None:
            bowel_d.append((zb - z_lm) * sz)

    def hist(values, border):
        values = np.asarray(values, dtype=np.float64)
        if values.size == 0:
            return ExtentHistogram(np.array([0.0, bin_width_mm]), np.array([0]),
                                   landmark="hips_cranial", border=border)
        lo = np.floor(values.min() / bin_width_mm) * bin_width_mm
        hi = np.ceil(values.max() / bin_width_mm) * bin_width_mm
        if hi <= lo:
            hi = lo + bin_width_mm
        nbins = int(round((hi - lo) / bin_width_mm))
        edges = lo + bin_width_mm * np.arange(nbins + 1)
        counts, _ = np.histogram(values, bins=edges)
        return ExtentHistogram(edges, counts, landmark="hips_cranial", border=border)

    return hist(scan_d, "scan"), hist(bowel_d, "bowel_bag")


@dataclass
class CleanOutcome:
    kept: bool
    record: ScanRecord | None = None
    reason: str | None = None
    slices_cropped: int = 0
    bowel_voxels_deleted: int = 0


CLEANING_LOG_KEY = "cleaning_log"


def apply_cleaning(record: ScanRecord, thresholds: CleaningThresholds) -> CleanOutcome:
    """Crop the FOV, delete cranial bowel-bag annotation, or discard the scan.

    Idempotent for kept records: a second application performs no actions.
    Raises LandmarkError when the hips landmark cannot be computed.
    """
    sz = record.image.spacing[0]
    z_lm = hip_cranial_landmark(record.labels)
    actions = json.loads(record.meta.get(CLEANING_LOG_KEY, "[]"))
    out = record.copy()

    # 1) crop slices above landmark + crop_above
    keep_top = int(np.floor(z_lm + thresholds.crop_above_mm / sz))
    slices_cropped = 0
    depth = out.image.shape[0]
    if keep_top < depth - 1:
        slices_cropped = depth - 1 - keep_top
        out.image.data = out.image.data[:keep_top + 1].copy()
        for organ in core_data.ORGANS:
            out.labels.masks[organ] = out.labels.masks[organ][:keep_top + 1].copy()
        if out.uncertainty is not None:
            out.uncertainty = out.uncertainty[:keep_top + 1].copy()
        core_data.transform_ground_truth(out, lambda m: m[:keep_top + 1].copy())
        actions.append({"action": "crop", "slices": slices_cropped})

    # 2) delete bowel-bag annotation above landmark + delete_bowel_above
    deleted = 0
    if out.labels.available[OrganId.BOWEL_BAG]:
        zcut = z_lm + thresholds.delete_bowel_above_mm / sz
        zs = np.arange(out.image.shape[0])
        above = zs > zcut
        mask = out.labels.masks[OrganId.BOWEL_BAG]
        deleted = int(mask[above].sum())
        if deleted:
            mask = mask.copy()
            mask[above] = 0
            out.labels.masks[OrganId.BOWEL_BAG] = mask
            actions.append({"action": "delete_bowel", "voxels": deleted})

    # 3) discard when the (post-deletion) bowel border misses the pelvic window
    if out.labels.available[OrganId.BOWEL_BAG]:
        zb = _bowel_border(out.labels)
        if zb is None or zb < z_lm + thresholds.discard_below_mm / sz:
            return CleanOutcome(kept=False, reason="bowel bag below pelvic window",
                                slices_cropped=slices_cropped, bowel_voxels_deleted=deleted)

    if actions or CLEANING_LOG_KEY in out.meta:
        out.meta[CLEANING_LOG_KEY] = json.dumps(actions)
    return CleanOutcome(kept=True, record=out,
                        slices_cropped=slices_cropped, bowel_voxels_deleted=deleted)


@dataclass
class CleaningReport:
    n_input: int = 0
    kept: int = 0
    discarded: int = 0
    skipped_no_landmark: int = 0
    modified: int = 0
    slices_cropped: int = 0
    bowel_voxels_deleted: int = 0
    discard_reasons: dict[str, str] = field(default_factory=dict)
    failures: dict[str, str] = field(default_factory=dict)

    def to_json(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        payload = {
            "n_input": self.n_input,
            "kept": self.kept,
            "discarded": self.discarded,
            "skipped_no_landmark": self.skipped_no_landmark,
            "modified": self.modified,
            "slices_cropped": self.slices_cropped,
            "bowel_voxels_deleted": self.bowel_voxels_deleted,
            "discard_reasons": self.discard_reasons,
            "failures": self.failures,
        }
        path.write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")
        return path


def clean_dataset(manifest: DatasetManifest, thresholds: CleaningThresholds,
                  out_dir: str | Path) -> tuple[DatasetManifest, CleaningReport]:
    """Apply :func:`apply_cleaning` to every record, writing kept ones to ``out_dir``.

    Records whose hips landmark is unavailable pass through unchanged and
    are counted as skipped; other per-record failures are recorded in the
    report rather than raised.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    report = CleaningReport(n_input=len(manifest))
    entries = []
    for entry in manifest.records:
        record = core_data.read_container(entry.path)
        try:
            outcome = apply_cleaning(record, thresholds)
        except LandmarkError:
            report.skipped_no_landmark += 1
            path = core_data.write_container(record, out_dir / record.id)
            entries.append(ManifestEntry(id=record.id, path=path))
            report.kept += 1
            continue
        except Exception as exc:  # pragma: no cover - defensive
            report.failures[entry.id] = str(exc)
            continue
        report.slices_cropped += outcome.slices_cropped
        report.bowel_voxels_deleted += outcome.bowel_voxels_deleted
        if not outcome.kept:
            report.discarded += 1
            report.discard_reasons[entry.id] = outcome.reason or ""
            continue
        if outcome.slices_cropped or outcome.bowel_voxels_deleted:
            report.modified += 1
        path = core_data.write_container(outcome.record, out_dir / record.id)
        entries.append(ManifestEntry(id=record.id, path=path))
        report.kept += 1

    cleaned = DatasetManifest(records=entries)
    core_data.save_manifest(cleaned, out_dir / "manifest.json")
    return cleaned, report
