"""Domain types for scans and labels, plus the on-disk container format.

Axis convention everywhere in this package: arrays are indexed (z, y, x)
with z the cranio-caudal axis, so "cranial" means increasing z. Images are
float32, masks are uint8 {0, 1}.

A scan container is a directory with a ``meta.json`` sidecar and one
little-endian C-order ``.raw`` file per array. Writes are atomic
(temp file + rename) and byte-identical for identical records, so
round-trips and re-runs can be compared at the byte level.
"""

from __future__ import annotations

import enum
import hashlib
import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ChecksumError, ContainerError, FormatError, ValidationError

log = logging.getLogger(__name__)

FORMAT_VERSION = 1

IMAGE_DTYPE = "<f4"
MASK_DTYPE = "|u1"
UNCERTAINTY_DTYPE = "<f4"


class OrganId(enum.IntEnum):
    """The four target organs; background is the implicit class 0."""

    BOWEL_BAG = 1
    BLADDER = 2
    HIPS = 3
    RECTUM = 4

    @property
    def key(self) -> str:
        return self.name.lower()


ORGANS: tuple[OrganId, ...] = tuple(OrganId)
NUM_CLASSES = len(ORGANS) + 1  # background + organs


class IntensityUnit(str, enum.Enum):
    HU = "HU"
    NORMALIZED = "NORMALIZED"


class LabelSource(str, enum.Enum):
    CLINICAL = "CLINICAL"
    IMPUTED = "IMPUTED"
    NONE = "NONE"


@dataclass
class Volume:
    """A 3D scalar grid with physical voxel spacing in mm (z, y, x)."""

    data: np.ndarray
    spacing: tuple[float, float, float]
    unit: IntensityUnit = IntensityUnit.HU

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 3:
            raise ValidationError(f"volume data must be 3D, got ndim={self.data.ndim}")
        self.spacing = tuple(float(s) for s in self.spacing)
        if isinstance(self.unit, str):
            self.unit = IntensityUnit(self.unit)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    def copy(self) -> "Volume":
        return Volume(self.data.copy(), self.spacing, self.unit)


@dataclass
class LabelSet:
    """Per-organ binary masks with availability flags and provenance tags.

    Masks exist for every organ; an unavailable organ's mask is all-zero
    and carries source NONE.
    """

    masks: dict[OrganId, np.ndarray]
    available: dict[OrganId, bool]
    source: dict[OrganId, LabelSource]

    def __post_init__(self):
        for organ in ORGANS:
            if organ not in self.masks:
                raise ValidationError(f"missing mask for {organ.key}")
            self.masks[organ] = np.asarray(self.masks[organ], dtype=np.uint8)
            self.available[organ] = bool(self.available.get(organ, False))
            src = self.source.get(organ, LabelSource.NONE)
            self.source[organ] = LabelSource(src)

    @classmethod
    def empty(cls, shape: tuple[int, int, int]) -> "LabelSet":
        return cls(
            masks={o: np.zeros(shape, dtype=np.uint8) for o in ORGANS},
            available={o: False for o in ORGANS},
            source={o: LabelSource.NONE for o in ORGANS},
        )

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.masks[OrganId.BOWEL_BAG].shape

    def available_organs(self) -> list[OrganId]:
        return [o for o in ORGANS if self.available[o]]

    def fully_annotated(self) -> bool:
        return all(self.available[o] for o in ORGANS)

    def copy(self) -> "LabelSet":
        return LabelSet(
            masks={o: m.copy() for o, m in self.masks.items()},
            available=dict(self.available),
            source=dict(self.source),
        )


@dataclass
class ScanRecord:
    """One image volume plus labels, optional uncertainty map, and metadata."""

    id: str
    image: Volume
    labels: LabelSet
    uncertainty: np.ndarray | None = None
    meta: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        if self.uncertainty is not None:
            self.uncertainty = np.asarray(self.uncertainty, dtype=np.float32)

    def copy(self) -> "ScanRecord":
        return ScanRecord(
            id=self.id,
            image=self.image.copy(),
            labels=self.labels.copy(),
            uncertainty=None if self.uncertainty is None else self.uncertainty.copy(),
            meta=dict(self.meta),
        )


def to_class_map(labels: LabelSet) -> np.ndarray:
    """Collapse a LabelSet to a single class-index map (background = 0).

    Organs are painted in ascending class index; masks are expected to be
    disjoint after preprocessing, in which case painting order is irrelevant.
    """
    cmap = np.zeros(labels.shape, dtype=np.int64)
    for organ in ORGANS:
        if labels.available[organ]:
            cmap[labels.masks[organ] > 0] = int(organ)
    return cmap


def masks_from_class_map(cmap: np.ndarray) -> dict[OrganId, np.ndarray]:
    """Expand a class-index map back into per-organ binary masks."""
    return {o: (cmap == int(o)).astype(np.uint8) for o in ORGANS}


# ---------------------------------------------------------------------------
# validation


@dataclass
class Violation:
    invariant: str
    detail: str
    count: int = 0


@dataclass
class ValidationReport:
    violations: list[Violation] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def add(self, invariant: str, detail: str, count: int = 0):
        self.violations.append(Violation(invariant, detail, count))

    def __str__(self) -> str:
        if self.ok:
            return "valid"
        return "; ".join(f"{v.invariant}: {v.detail}" for v in self.violations)


def validate_record(record: ScanRecord) -> ValidationReport:
    """Check every record invariant; returns a report, never raises."""
    report = ValidationReport()
    img = record.image

    if any(d < 1 for d in img.shape):
        report.add("shape", f"image dimensions must be >= 1, got {img.shape}")
    if any(not np.isfinite(s) or s <= 0 for s in img.spacing):
        report.add("spacing", f"spacing must be finite and positive, got {img.spacing}")
    if not np.all(np.isfinite(img.data)):
        report.add("intensity finiteness", "image contains non-finite values",
                   count=int(np.sum(~np.isfinite(img.data))))
    if img.unit == IntensityUnit.NORMALIZED:
        bad = int(np.sum((img.data < 0) | (img.data > 1)))
        if bad:
            report.add("intensity range", "NORMALIZED image has values outside [0, 1]", count=bad)

    for organ in ORGANS:
        mask = record.labels.masks[organ]
        if mask.shape != img.shape:
            report.add("shape consistency",
                       f"label_{organ.key} shape {mask.shape} != image shape {img.shape}")
            continue
        extra = int(np.sum(mask > 1))
        if extra:
            report.add("mask binarity", f"label_{organ.key} has values outside {{0,1}}", count=extra)
        avail = record.labels.available[organ]
        src = record.labels.source[organ]
        if avail and src == LabelSource.NONE:
            report.add("availability consistency", f"{organ.key} available but source NONE")
        if not avail:
            if src != LabelSource.NONE:
                report.add("availability consistency",
                           f"{organ.key} unavailable but source {src.value}")
            nz = int(np.count_nonzero(mask))
            if nz:
                report.add("availability consistency",
                           f"{organ.key} unavailable but mask has nonzero voxels", count=nz)

    # disjointness is only guaranteed (and only checked) for the triple the
    # preprocessing explicitly disambiguates
    triple = [OrganId.BLADDER, OrganId.RECTUM, OrganId.BOWEL_BAG]
    for i, a in enumerate(triple):
        for b in triple[i + 1:]:
            if not (record.labels.available[a] and record.labels.available[b]):
                continue
            ma, mb = record.labels.masks[a], record.labels.masks[b]
            if ma.shape != mb.shape or ma.shape != img.shape:
                continue
            overlap = int(np.sum((ma > 0) & (mb > 0)))
            if overlap:
                report.add("disjointness", f"{a.key} overlaps {b.key}", count=overlap)

    if record.uncertainty is not None:
        if record.uncertainty.shape != img.shape:
            report.add("shape consistency",
                       f"uncertainty shape {record.uncertainty.shape} != image shape {img.shape}")
        else:
            neg = int(np.sum(record.uncertainty < 0))
            if neg:
                report.add("uncertainty range", "uncertainty has negative values", count=neg)

    return report


# ---------------------------------------------------------------------------
# container I/O


def _sha256(buf: bytes) -> str:
    return hashlib.sha256(buf).hexdigest()


def _write_atomic(path: Path, data: bytes):
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(data)
    os.replace(tmp, path)


def write_container(record: ScanRecord, dir_path: str | Path) -> Path:
    """Write a record to ``dir_path``; byte-identical for identical input.

    Raises ValidationError if the record violates any invariant; the
    failing invariants are named in the message.
    """
    report = validate_record(record)
    if not report.ok:
        raise ValidationError(f"record {record.id!r} is invalid: {report}")

    dir_path = Path(dir_path)
    dir_path.mkdir(parents=True, exist_ok=True)

    image_bytes = np.ascontiguousarray(record.image.data, dtype=IMAGE_DTYPE).tobytes()
    meta = {
        "format_version": FORMAT_VERSION,
        "id": record.id,
        "shape": list(record.image.shape),
        "spacing_mm": list(record.image.spacing),
        "intensity_unit": record.image.unit.value,
        "image_dtype": IMAGE_DTYPE,
        "mask_dtype": MASK_DTYPE,
        "image_checksum_sha256": _sha256(image_bytes),
        "organs": {},
        "meta": dict(record.meta),
    }
    _write_atomic(dir_path / "image.raw", image_bytes)

    for organ in ORGANS:
        entry = {
            "available": record.labels.available[organ],
            "source": record.labels.source[organ].value,
        }
        if record.labels.available[organ]:
            mask_bytes = np.ascontiguousarray(
                record.labels.masks[organ], dtype=MASK_DTYPE).tobytes()
            entry["checksum_sha256"] = _sha256(mask_bytes)
            _write_atomic(dir_path / f"label_{organ.key}.raw", mask_bytes)
        meta["organs"][organ.key] = entry

    if record.uncertainty is not None:
        u_bytes = np.ascontiguousarray(record.uncertainty, dtype=UNCERTAINTY_DTYPE).tobytes()
        meta["uncertainty"] = {
            "dtype": UNCERTAINTY_DTYPE,
            "checksum_sha256": _sha256(u_bytes),
        }
        _write_atomic(dir_path / "uncertainty.raw", u_bytes)

    meta_bytes = (json.dumps(meta, sort_keys=True, indent=2) + "\n").encode("utf-8")
    _write_atomic(dir_path / "meta.json", meta_bytes)
    return dir_path


def _read_array(path: Path, dtype: str, shape: tuple[int, ...], checksum: str,
                what: str) -> np.ndarray:
    if dtype not in (IMAGE_DTYPE, MASK_DTYPE, UNCERTAINTY_DTYPE):
        raise FormatError(f"{what}: unsupported dtype descriptor {dtype!r}")
    if not path.exists():
        raise ContainerError(f"{what}: missing file {path}")
    buf = path.read_bytes()
    expected = int(np.prod(shape)) * np.dtype(dtype).itemsize
    if len(buf) != expected:
        raise FormatError(
            f"{what}: raw size {len(buf)} does not match shape {shape} ({expected} bytes)")
    if _sha256(buf) != checksum:
        raise ChecksumError(f"{what}: checksum mismatch in {path}")
    return np.frombuffer(buf, dtype=dtype).reshape(shape).copy()


def read_container(dir_path: str | Path) -> ScanRecord:
    """Read a record written by :func:`write_container`, verifying checksums."""
    dir_path = Path(dir_path)
    meta_path = dir_path / "meta.json"
    if not meta_path.exists():
        raise ContainerError(f"missing meta.json in {dir_path}")
    meta = json.loads(meta_path.read_text("utf-8"))
    if meta.get("format_version") != FORMAT_VERSION:
        raise FormatError(f"unsupported container version {meta.get('format_version')!r}")

    shape = tuple(int(v) for v in meta["shape"])
    if len(shape) != 3:
        raise FormatError(f"shape must have 3 entries, got {meta['shape']}")
    spacing = tuple(float(v) for v in meta["spacing_mm"])

    image = _read_array(dir_path / "image.raw", meta["image_dtype"], shape,
                        meta["image_checksum_sha256"], "image")

    labels = LabelSet.empty(shape)
    for organ in ORGANS:
        entry = meta["organs"].get(organ.key)
        if entry is None:
            raise FormatError(f"meta.json missing organ entry {organ.key!r}")
        labels.available[organ] = bool(entry["available"])
        labels.source[organ] = LabelSource(entry["source"])
        if labels.available[organ]:
            labels.masks[organ] = _read_array(
                dir_path / f"label_{organ.key}.raw", meta["mask_dtype"], shape,
                entry["checksum_sha256"], f"label_{organ.key}")

    uncertainty = None
    if "uncertainty" in meta:
        uncertainty = _read_array(dir_path / "uncertainty.raw",
                                  meta["uncertainty"]["dtype"], shape,
                                  meta["uncertainty"]["checksum_sha256"], "uncertainty")

    return ScanRecord(
        id=meta["id"],
        image=Volume(image, spacing, IntensityUnit(meta["intensity_unit"])),
        labels=labels,
        uncertainty=uncertainty,
        meta=dict(meta.get("meta", {})),
    )


def records_equal(a: ScanRecord, b: ScanRecord) -> bool:
    """Field-for-field equality with bit-level array comparison."""
    if a.id != b.id or a.meta != b.meta:
        return False
    if a.image.spacing != b.image.spacing or a.image.unit != b.image.unit:
        return False
    if a.image.shape != b.image.shape or not np.array_equal(a.image.data, b.image.data):
        return False
    for organ in ORGANS:
        if a.labels.available[organ] != b.labels.available[organ]:
            return False
        if a.labels.source[organ] != b.labels.source[organ]:
            return False
        if not np.array_equal(a.labels.masks[organ], b.labels.masks[organ]):
            return False
    if (a.uncertainty is None) != (b.uncertainty is None):
        return False
    if a.uncertainty is not None and not np.array_equal(a.uncertainty, b.uncertainty):
        return False
    return True


# ---------------------------------------------------------------------------
# dataset manifests


@dataclass
class ManifestEntry:
    id: str
    path: Path


@dataclass
class DatasetManifest:
    records: list[ManifestEntry]
    split_tags: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        ids = [r.id for r in self.records]
        if len(set(ids)) != len(ids):
            raise ValidationError("manifest record ids are not unique")

    def ids(self) -> list[str]:
        return [r.id for r in self.records]

    def path_of(self, record_id: str) -> Path:
        for r in self.records:
            if r.id == record_id:
                return r.path
        raise KeyError(record_id)

    def subset(self, ids: list[str]) -> "DatasetManifest":
        keep = set(ids)
        return DatasetManifest(
            records=[r for r in self.records if r.id in keep],
            split_tags={k: v for k, v in self.split_tags.items() if k in keep},
        )

    def __len__(self) -> int:
        return len(self.records)


def save_manifest(manifest: DatasetManifest, path: str | Path) -> Path:
    """Write a manifest as JSON with container paths relative to it."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    base = path.parent.resolve()
    payload = {
        "records": [
            {"id": r.id, "path": os.path.relpath(Path(r.path).resolve(), base)}
            for r in manifest.records
        ],
        "split_tags": manifest.split_tags,
    }
    _write_atomic(path, (json.dumps(payload, sort_keys=True, indent=2) + "\n").encode("utf-8"))
    return path


def load_manifest(path: str | Path) -> DatasetManifest:
    path = Path(path)
    payload = json.loads(path.read_text("utf-8"))
    base = path.parent.resolve()
    records = []
    for item in payload["records"]:
        rec_path = (base / item["path"]).resolve()
        if not rec_path.exists():
            raise ContainerError(f"manifest entry {item['id']!r}: path {rec_path} does not exist")
        records.append(ManifestEntry(id=item["id"], path=rec_path))
    return DatasetManifest(records=records, split_tags=dict(payload.get("split_tags", {})))


def load_records(manifest: DatasetManifest) -> list[ScanRecord]:
    return [read_container(r.path) for r in manifest.records]


def read_meta(container_dir: str | Path) -> dict:
    return json.loads((Path(container_dir) / "meta.json").read_text("utf-8"))


def split_by_availability(manifest: DatasetManifest) -> tuple[DatasetManifest, DatasetManifest]:
    """Split into (fully annotated, partially annotated) by availability flags.

    Only meta.json is read per record, so this is cheap on large datasets.
    """
    full_ids, partial_ids = [], []
    for entry in manifest.records:
        meta = read_meta(entry.path)
        organs = meta["organs"]
        if all(organs[o.key]["available"] for o in ORGANS):
            full_ids.append(entry.id)
        else:
            partial_ids.append(entry.id)
    return manifest.subset(full_ids), manifest.subset(partial_ids)


# ---------------------------------------------------------------------------
# auxiliary masks stored in record meta (run-length encoded)
#
# The phantom generator stashes its pre-noise ground truth here so that
# evaluation code can score cleaning/imputation without a clinician. The
# training pipeline never reads these keys.

GROUND_TRUTH_KEY = "ground_truth"


def encode_mask_rle(mask: np.ndarray) -> dict:
    """Run-length encode a binary mask (C-order runs of ones)."""
    flat = np.asarray(mask, dtype=np.uint8).ravel()
    if flat.size == 0:
        return {"shape": list(mask.shape), "runs": []}
    edges = np.flatnonzero(np.diff(flat)) + 1
    starts = np.concatenate(([0], edges))
    ends = np.concatenate((edges, [flat.size]))
    runs = [[int(s), int(e - s)] for s, e in zip(starts, ends) if flat[s]]
    return {"shape": list(mask.shape), "runs": runs}


def decode_mask_rle(payload: dict) -> np.ndarray:
    shape = tuple(int(v) for v in payload["shape"])
    flat = np.zeros(int(np.prod(shape)), dtype=np.uint8)
    for start, length in payload["runs"]:
        flat[start:start + length] = 1
    return flat.reshape(shape)


def set_ground_truth(record: ScanRecord, masks: dict[OrganId, np.ndarray]):
    payload = {o.key: encode_mask_rle(masks[o]) for o in ORGANS}
    record.meta[GROUND_TRUTH_KEY] = json.dumps(payload, sort_keys=True)


def get_ground_truth(record: ScanRecord) -> dict[OrganId, np.ndarray] | None:
    raw = record.meta.get(GROUND_TRUTH_KEY)
    if raw is None:
        return None
    payload = json.loads(raw)
    return {o: decode_mask_rle(payload[o.key]) for o in ORGANS}


def transform_ground_truth(record: ScanRecord, fn) -> None:
    """Apply ``fn(mask) -> mask`` to every stored ground-truth mask, if any."""
    masks = get_ground_truth(record)
    if masks is None:
        return
    set_ground_truth(record, {o: fn(m) for o, m in masks.items()})
