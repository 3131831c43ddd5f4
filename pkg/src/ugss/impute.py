"""Annotation imputation from a trained teacher's mean prediction.

Full-volume inference slides a patch window along z (mirroring the training
patch geometry), averages overlapping window probabilities with uniform
weights, and computes the per-voxel entropy of the stitched mean map.

Imputation fills only organs that are missing: the predicted class map is
argmaxed, restricted to voxels not covered by any clinically available
mask, and stored with source IMPUTED. Uncertainty is zeroed at every
clinically determined voxel: inside available organ masks always, and
everywhere when the record had no missing organ (then background is
clinically implied too).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import core_data, model as model_mod
from .core_data import (
    DatasetManifest,
    LabelSource,
    ManifestEntry,
    OrganId,
    ORGANS,
    ScanRecord,
)
from .errors import ConfigError, ValidationError


def _window_starts(depth: int, patch_depth: int, overlap: float) -> list[int]:
    stride = max(1, int(round(patch_depth * (1.0 - overlap))))
    starts = list(range(0, depth - patch_depth + 1, stride))
    if starts[-1] != depth - patch_depth:
        starts.append(depth - patch_depth)
    return starts


def predict_full_volume(model, record: ScanRecord, patch_depth: int = 32,
                        overlap: float = 0.5) -> tuple[np.ndarray, np.ndarray]:
    """Sliding-window mean probabilities and entropy for a whole record.

    Returns ``(mean_probs, u)`` with shapes (C, z, y, x) and (z, y, x).
    ``model`` needs a ``predict_window(image) -> (C, d, h, w)`` method.
    Volumes thinner than ``patch_depth`` are symmetrically zero-padded for a
    single centered window and the padding is stripped afterwards.
    """
    if not 0.0 <= overlap < 1.0:
        raise ConfigError(f"overlap must be in [0, 1), got {overlap}")
    image = record.image.data
    depth = image.shape[0]

    if depth < patch_depth:
        pad_lo = (patch_depth - depth) // 2
        pad_hi = patch_depth - depth - pad_lo
        padded = np.pad(image, ((pad_lo, pad_hi), (0, 0), (0, 0)))
        probs = model.predict_window(padded)
        mean_probs = probs[:, pad_lo:pad_lo + depth].astype(np.float64)
        return mean_probs, model_mod.entropy_map(mean_probs)

    acc = None
    counts = np.zeros((depth, 1, 1), dtype=np.float64)
    for start in _window_starts(depth, patch_depth, overlap):
        probs = model.predict_window(image[start:start + patch_depth])
        if acc is None:
            acc = np.zeros((probs.shape[0], *image.shape), dtype=np.float64)
        acc[:, start:start + patch_depth] += probs
        counts[start:start + patch_depth] += 1.0
    mean_probs = acc / counts[None, :, :, :]
    return mean_probs, model_mod.entropy_map(mean_probs)


def impute_record(record: ScanRecord, mean_probs: np.ndarray,
                  u: np.ndarray) -> ScanRecord:
    """Fill missing organ masks from the prediction and attach uncertainty.

    Clinically available voxels are never modified and get u = 0; imputed
    masks are taken from the argmax restricted to unclaimed voxels, so they
    are disjoint from each other and from every available mask.
    """
    if mean_probs.shape[1:] != record.image.shape or u.shape != record.image.shape:
        raise ValidationError(
            f"prediction shape {mean_probs.shape[1:]} / uncertainty {u.shape} "
            f"do not match record shape {record.image.shape}")

    out = record.copy()
    available = np.zeros(record.image.shape, dtype=bool)
    for organ in ORGANS:
        if record.labels.available[organ]:
            available |= record.labels.masks[organ] > 0

    missing = [o for o in ORGANS if not record.labels.available[o]]
    cmap = np.argmax(mean_probs, axis=0)
    for organ in missing:
        out.labels.masks[organ] = ((cmap == int(organ)) & ~available).astype(np.uint8)
        out.labels.available[organ] = True
        out.labels.source[organ] = LabelSource.IMPUTED

    if missing:
        u_out = np.asarray(u, dtype=np.float32).copy()
        u_out[available] = 0.0
    else:
        # every voxel (background included) is clinically determined
        u_out = np.zeros(record.image.shape, dtype=np.float32)
    out.uncertainty = u_out
    out.meta["imputed_organs"] = json.dumps([o.key for o in missing])
    return out


@dataclass
class ImputeReport:
    n_records: int = 0
    n_passed_through: int = 0
    imputed_per_organ: dict[str, int] = field(default_factory=dict)

    def to_json(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps({
            "n_records": self.n_records,
            "n_passed_through": self.n_passed_through,
            "imputed_per_organ": self.imputed_per_organ,
        }, sort_keys=True, indent=2) + "\n")
        return path


def impute_dataset(model, manifest: DatasetManifest, out_dir: str | Path,
                   patch_depth: int = 32, overlap: float = 0.5
                   ) -> tuple[DatasetManifest, ImputeReport]:
    """Impute every partially annotated record; write new containers.

    Fully annotated records pass through with an all-zero uncertainty array
    (no inference needed). Output is deterministic for a fixed model and
    manifest.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    report = ImputeReport(n_records=len(manifest),
                          imputed_per_organ={o.key: 0 for o in ORGANS})
    entries = []
    for entry in manifest.records:
        record = core_data.read_container(entry.path)
        if record.labels.fully_annotated():
            out = record.copy()
            out.uncertainty = np.zeros(record.image.shape, dtype=np.float32)
            out.meta["imputed_organs"] = json.dumps([])
            report.n_passed_through += 1
        else:
            mean_probs, u = predict_full_volume(model, record, patch_depth, overlap)
            out = impute_record(record, mean_probs, u)
            for key in json.loads(out.meta["imputed_organs"]):
                report.imputed_per_organ[key] += 1
        path = core_data.write_container(out, out_dir / out.id)
        entries.append(ManifestEntry(id=out.id, path=path))
    imputed = DatasetManifest(records=entries)
    core_data.save_manifest(imputed, out_dir / "manifest.json")
    return imputed, report
