"""Preprocessing: label standardization, overlap removal, resampling, windowing.

Order of operations in :func:`preprocess_record` is fixed: standardize ->
remove bowel-bag overlap -> resample -> window. Overlap removal runs before
resampling because nearest-neighbor mask resampling cannot reintroduce
overlap, so disjointness survives.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from . import core_data
from .core_data import (
    IntensityUnit,
    LabelSet,
    LabelSource,
    OrganId,
    ORGANS,
    ScanRecord,
    Volume,
)
from .errors import ValidationError

log = logging.getLogger(__name__)

DEFAULT_SPACING = (2.5, 2.5, 2.5)
DEFAULT_WINDOW_LEVEL = 40.0
DEFAULT_WINDOW_WIDTH = 400.0


@dataclass
class RawLabelEntry:
    name: str
    mask: np.ndarray


# alias table after lowercasing and stripping separators ("-", "_", " ")
_ALIASES = {
    OrganId.BOWEL_BAG: {"bowel", "bowelbag"},
    OrganId.BLADDER: {"bladder"},
    OrganId.RECTUM: {"rectum"},
    OrganId.HIPS: {"hip", "hips", "hipl", "hipr", "lhip", "rhip",
                   "lefthip", "righthip", "hipleft", "hipright"},
}


def _normalize_name(name: str) -> str:
    return "".join(ch for ch in name.lower() if ch not in "-_ ")


def match_organ(name: str) -> OrganId | None:
    key = _normalize_name(name)
    for organ, aliases in _ALIASES.items():
        if key in aliases:
            return organ
    return None


def standardize_labels(entries: list[RawLabelEntry]) -> LabelSet:
    """Map raw label names onto the fixed organ set.

    Matching is case- and separator-insensitive; left/right hip entries are
    OR-combined into the single hips organ, as are duplicate matches for any
    organ. Unmatched names are dropped with a warning.
    """
    if not entries:
        raise ValidationError("standardize_labels requires at least a reference shape; "
                              "got no entries")
    shape = np.asarray(entries[0].mask).shape
    for e in entries:
        if np.asarray(e.mask).shape != shape:
            raise ValidationError(
                f"label {e.name!r} shape {np.asarray(e.mask).shape} conflicts with {shape}")

    labels = LabelSet.empty(shape)
    for entry in entries:
        organ = match_organ(entry.name)
        if organ is None:
            log.warning("unmatched: %s", entry.name)
            continue
        mask = (np.asarray(entry.mask) > 0).astype(np.uint8)
        if labels.available[organ]:
            labels.masks[organ] = np.logical_or(labels.masks[organ], mask).astype(np.uint8)
        else:
            labels.masks[organ] = mask
            labels.available[organ] = True
            labels.source[organ] = LabelSource.CLINICAL
    return labels


def resolve_overlap(labels: LabelSet) -> LabelSet:
    """Remove bladder/rectum voxels from the bowel-bag mask.

    Unavailable masks are all-zero, so they contribute nothing.
    """
    out = labels.copy()
    blocked = (labels.masks[OrganId.BLADDER] > 0) | (labels.masks[OrganId.RECTUM] > 0)
    out.masks[OrganId.BOWEL_BAG] = (
        (labels.masks[OrganId.BOWEL_BAG] > 0) & ~blocked).astype(np.uint8)
    return out


def resample_array(data: np.ndarray, spacing, target_spacing, order: int) -> np.ndarray:
    """Resample onto a new voxel grid with voxel-center alignment.

    Output voxel centers are mapped into continuous input coordinates and
    edge-clamped; order=1 is trilinear, order=0 nearest-neighbor. Identity
    spacings short-circuit to an exact copy.
    """
    spacing = tuple(float(s) for s in spacing)
    target_spacing = tuple(float(s) for s in target_spacing)
    if any(s <= 0 for s in target_spacing):
        raise ValidationError(f"target spacing must be positive, got {target_spacing}")
    if spacing == target_spacing:
        return data.copy()

    in_shape = data.shape
    out_shape = tuple(
        max(1, int(np.floor(n * s / t + 0.5)))
        for n, s, t in zip(in_shape, spacing, target_spacing))
    axes = [
        (np.arange(n_out, dtype=np.float64) + 0.5) * t / s - 0.5
        for n_out, s, t in zip(out_shape, spacing, target_spacing)
    ]
    coords = np.meshgrid(*axes, indexing="ij")
    out = ndimage.map_coordinates(
        data.astype(np.float32 if order else data.dtype),
        np.stack(coords), order=order, mode="nearest")
    return out.astype(data.dtype)


def resample(volume: Volume, target_spacing, mode: str = "trilinear") -> Volume:
    """Resample a volume to ``target_spacing`` (mm).

    mode "trilinear" is for images, "nearest" for masks stored as volumes.
    """
    order = {"trilinear": 1, "nearest": 0}.get(mode.lower())
    if order is None:
        raise ValidationError(f"unknown resampling mode {mode!r}")
    data = resample_array(volume.data, volume.spacing, target_spacing, order)
    return Volume(data, tuple(float(t) for t in target_spacing), volume.unit)


def window_hu(volume: Volume, level: float = DEFAULT_WINDOW_LEVEL,
              width: float = DEFAULT_WINDOW_WIDTH) -> Volume:
    """Map HU onto [0, 1] with a clamped linear display window."""
    if width <= 0:
        raise ValidationError(f"window width must be positive, got {width}")
    if volume.unit != IntensityUnit.HU:
        raise ValidationError("window_hu expects an HU volume")
    lo = level - width / 2.0
    out = np.clip((volume.data - lo) / width, 0.0, 1.0).astype(np.float32)
    return Volume(out, volume.spacing, IntensityUnit.NORMALIZED)


PREPROCESS_KEY = "preprocess_steps"


def preprocess_dataset(manifest, out_dir, target_spacing=DEFAULT_SPACING,
                       level: float = DEFAULT_WINDOW_LEVEL,
                       width: float = DEFAULT_WINDOW_WIDTH):
    """Preprocess every record in a manifest into ``out_dir`` (new manifest)."""
    from pathlib import Path

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for entry in manifest.records:
        record = core_data.read_container(entry.path)
        out = preprocess_record(record, target_spacing, level, width)
        path = core_data.write_container(out, out_dir / out.id)
        entries.append(core_data.ManifestEntry(id=out.id, path=path))
    new_manifest = core_data.DatasetManifest(records=entries)
    core_data.save_manifest(new_manifest, out_dir / "manifest.json")
    return new_manifest


def preprocess_record(record: ScanRecord,
                      target_spacing=DEFAULT_SPACING,
                      level: float = DEFAULT_WINDOW_LEVEL,
                      width: float = DEFAULT_WINDOW_WIDTH) -> ScanRecord:
    """Standardize labels, remove overlap, resample all arrays, window HU.

    Applying this to an already-preprocessed record is a no-op: the spacing
    matches so resampling short-circuits, and a NORMALIZED image skips
    windowing. Steps that modified the record are recorded (as a set union)
    under ``meta["preprocess_steps"]``.
    """
    steps = set(json.loads(record.meta.get(PREPROCESS_KEY, "[]")))
    target_spacing = tuple(float(t) for t in target_spacing)

    entries = [RawLabelEntry(o.key, record.labels.masks[o])
               for o in record.labels.available_organs()]
    if entries:
        labels = standardize_labels(entries)
        for organ in ORGANS:  # keep provenance (e.g. IMPUTED) from the input
            if labels.available[organ]:
                labels.source[organ] = record.labels.source[organ]
    else:
        labels = LabelSet.empty(record.image.shape)
    if not all(np.array_equal(labels.masks[o], record.labels.masks[o]) for o in ORGANS):
        steps.add("standardize")

    resolved = resolve_overlap(labels)
    if not np.array_equal(resolved.masks[OrganId.BOWEL_BAG], labels.masks[OrganId.BOWEL_BAG]):
        steps.add("resolve_overlap")
    labels = resolved

    image = record.image
    uncertainty = record.uncertainty
    if image.spacing != target_spacing:
        source_spacing = image.spacing
        image = resample(image, target_spacing, "trilinear")
        for organ in ORGANS:
            labels.masks[organ] = resample_array(
                labels.masks[organ], source_spacing, target_spacing, order=0)
        if uncertainty is not None:
            uncertainty = resample_array(uncertainty, source_spacing, target_spacing, order=0)
        steps.add("resample")

    if image.unit == IntensityUnit.HU:
        image = window_hu(image, level, width)
        steps.add("window")

    out = ScanRecord(id=record.id, image=image, labels=labels,
                     uncertainty=uncertainty, meta=dict(record.meta))
    if record.image.spacing != target_spacing:
        src = record.image.spacing
        core_data.transform_ground_truth(
            out, lambda m: resample_array(m, src, target_spacing, order=0))
    out.meta[PREPROCESS_KEY] = json.dumps(sorted(steps))
    return out
