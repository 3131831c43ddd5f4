"""Deterministic synthetic abdominal phantom generator.

Stands in for the clinical CT dataset: every record contains two bright
hip ellipsoids, a central bladder, a posterior rectum tube, and a large
bowel-bag region, each with a distinct HU value inside a soft-tissue body
cylinder. Two noise modes mimic the raw-data problems the cleaning stage
must fix: extra "chest" slices appended cranially, and bowel-bag
annotations extended past their true cranial border. Organ annotations are
hidden per-organ with configurable probabilities to produce partially
annotated records.

The full pre-noise ground truth is retained in record meta (see
``core_data.set_ground_truth``) purely for evaluation; training code never
reads it. Generation is a pure function of (config, index), so datasets
can be produced in parallel and regenerate bit-identically.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import core_data, seeding
from .core_data import (
    DatasetManifest,
    IntensityUnit,
    LabelSet,
    LabelSource,
    ManifestEntry,
    OrganId,
    ORGANS,
    ScanRecord,
    Volume,
)
from .errors import ConfigError

# HU values painted into the image; chosen inside / around the 40/400
# display window so organs stay separable after normalization.
HU_AIR = -1000.0
HU_SOFT_TISSUE = 40.0
HU_HIPS = 400.0
HU_BLADDER = 0.0
HU_RECTUM = 160.0
HU_BOWEL = -80.0
HU_LUNG = -800.0

# availability defaults mirror the clinical annotation counts
# (383, 1103, 504, 865 of 1170 scans for bowel bag, bladder, hips, rectum)
PAPER_AVAILABILITY = {
    OrganId.BOWEL_BAG: 383 / 1170,
    OrganId.BLADDER: 1103 / 1170,
    OrganId.HIPS: 504 / 1170,
    OrganId.RECTUM: 865 / 1170,
}

NOISE_KEY = "phantom_noise"


@dataclass
class PhantomConfig:
    shape: tuple[int, int, int] = (64, 64, 64)
    spacing: tuple[float, float, float] = (2.5, 2.5, 2.5)
    seed: int = 0
    availability_probs: dict[OrganId, float] = field(
        default_factory=lambda: dict(PAPER_AVAILABILITY))
    cranial_extent_jitter: int = 0
    bowel_overannotation_prob: float = 0.0
    noise_sigma: float = 10.0

    def __post_init__(self):
        self.shape = tuple(int(v) for v in self.shape)
        self.spacing = tuple(float(v) for v in self.spacing)
        probs = {}
        for organ in ORGANS:
            p = self.availability_probs.get(organ, 1.0)
            if not 0.0 <= p <= 1.0:
                raise ConfigError(f"availability_probs[{organ.key}] must be in [0,1], got {p}")
            probs[organ] = float(p)
        self.availability_probs = probs
        if not 0.0 <= self.bowel_overannotation_prob <= 1.0:
            raise ConfigError("bowel_overannotation_prob must be in [0,1]")
        if self.cranial_extent_jitter < 0:
            raise ConfigError("cranial_extent_jitter must be >= 0")
        if self.seed < 0:
            raise ConfigError("seed must be non-negative")
        if any(s <= 0 for s in self.spacing):
            raise ConfigError("spacing must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomConfig":
        d = dict(d)
        if "availability_probs" in d and not isinstance(
                next(iter(d["availability_probs"]), None), OrganId):
            d["availability_probs"] = {
                OrganId[k.upper()]: v for k, v in d["availability_probs"].items()}
        return cls(**d)


def _ellipsoid(shape, center, radii) -> np.ndarray:
    zz, yy, xx = np.ogrid[:shape[0], :shape[1], :shape[2]]
    return (((zz - center[0]) / radii[0]) ** 2
            + ((yy - center[1]) / radii[1]) ** 2
            + ((xx - center[2]) / radii[2]) ** 2) <= 1.0


def _tube(shape, z_range, center_yx, radii_yx) -> np.ndarray:
    mask = np.zeros(shape, dtype=bool)
    yy, xx = np.ogrid[:shape[1], :shape[2]]
    disc = (((yy - center_yx[0]) / radii_yx[0]) ** 2
            + ((xx - center_yx[1]) / radii_yx[1]) ** 2) <= 1.0
    z0, z1 = max(0, int(z_range[0])), min(shape[0], int(z_range[1]))
    mask[z0:z1] = disc
    return mask


def _jitter(rng, value, rel=0.08):
    return value * (1.0 + rng.uniform(-rel, rel))


def generate_phantom(config: PhantomConfig, index: int) -> ScanRecord:
    """Generate one phantom record; a pure function of (config, index)."""
    Z, Y, X = config.shape
    if Z < 24 or Y < 24 or X < 24:
        raise ConfigError(f"shape {config.shape} too small for phantom geometry (min 24)")

    rng = seeding.rng(config.seed, seeding.TAG_RECORD, index)

    # --- abdomen geometry (jittered ellipsoids / tube), painted in HU
    body = np.zeros((Z, Y, X), dtype=bool)
    yy, xx = np.ogrid[:Y, :X]
    body_disc = (((yy - 0.5 * Y) / (0.48 * Y)) ** 2
                 + ((xx - 0.5 * X) / (0.48 * X)) ** 2) <= 1.0
    body[:] = body_disc

    hip_z = _jitter(rng, 0.32 * Z, 0.03)
    hip_rz = _jitter(rng, 0.10 * Z, 0.05)
    hip_ry = _jitter(rng, 0.13 * Y)
    hip_rx = _jitter(rng, 0.11 * X)
    hips = (_ellipsoid((Z, Y, X), (hip_z, 0.62 * Y, 0.28 * X), (hip_rz, hip_ry, hip_rx))
            | _ellipsoid((Z, Y, X), (hip_z, 0.62 * Y, 0.72 * X), (hip_rz, hip_ry, hip_rx)))

    bladder = _ellipsoid(
        (Z, Y, X),
        (_jitter(rng, 0.34 * Z, 0.05), _jitter(rng, 0.42 * Y, 0.05), 0.50 * X),
        (_jitter(rng, 0.11 * Z), _jitter(rng, 0.13 * Y), _jitter(rng, 0.14 * X)))

    rectum = _tube((Z, Y, X),
                   (_jitter(rng, 0.10 * Z, 0.2), _jitter(rng, 0.42 * Z, 0.05)),
                   (0.72 * Y, 0.50 * X),
                   (_jitter(rng, 0.07 * Y), _jitter(rng, 0.06 * X)))

    bowel = _ellipsoid(
        (Z, Y, X),
        (_jitter(rng, 0.62 * Z, 0.03), _jitter(rng, 0.45 * Y, 0.05), 0.50 * X),
        (_jitter(rng, 0.22 * Z, 0.04), _jitter(rng, 0.26 * Y), _jitter(rng, 0.30 * X)))

    # precedence keeps the ground truth single-valued per voxel
    bladder &= ~hips
    rectum &= ~(hips | bladder)
    bowel &= ~(hips | bladder | rectum)
    for name, m in (("hips", hips), ("bladder", bladder), ("rectum", rectum), ("bowel", bowel)):
        if not m.any():
            raise ConfigError(f"shape {config.shape} too small: {name} is empty")

    image = np.full((Z, Y, X), HU_AIR, dtype=np.float32)
    image[body] = HU_SOFT_TISSUE
    image[hips] = HU_HIPS
    image[bladder] = HU_BLADDER
    image[rectum] = HU_RECTUM
    image[bowel] = HU_BOWEL

    # --- noise mode 1: extra chest slices appended cranially
    n_chest = int(rng.integers(0, config.cranial_extent_jitter + 1)) \
        if config.cranial_extent_jitter > 0 else 0
    if n_chest > 0:
        chest = np.full((n_chest, Y, X), HU_AIR, dtype=np.float32)
        chest[:, body_disc] = HU_SOFT_TISSUE
        lung_l = (((yy - 0.45 * Y) / (0.22 * Y)) ** 2 + ((xx - 0.30 * X) / (0.16 * X)) ** 2) <= 1.0
        lung_r = (((yy - 0.45 * Y) / (0.22 * Y)) ** 2 + ((xx - 0.70 * X) / (0.16 * X)) ** 2) <= 1.0
        chest[:, lung_l | lung_r] = HU_LUNG
        image = np.concatenate([image, chest], axis=0)

    def grown(mask: np.ndarray) -> np.ndarray:
        if n_chest == 0:
            return mask
        return np.concatenate([mask, np.zeros((n_chest, Y, X), dtype=bool)], axis=0)

    gt = {
        OrganId.BOWEL_BAG: grown(bowel).astype(np.uint8),
        OrganId.BLADDER: grown(bladder).astype(np.uint8),
        OrganId.HIPS: grown(hips).astype(np.uint8),
        OrganId.RECTUM: grown(rectum).astype(np.uint8),
    }

    # --- noise mode 2: bowel-bag annotation extended past its true border
    emitted = {o: m.copy() for o, m in gt.items()}
    n_over = 0
    if rng.random() < config.bowel_overannotation_prob:
        depth = image.shape[0]
        top = int(np.max(np.nonzero(np.any(gt[OrganId.BOWEL_BAG], axis=(1, 2)))[0]))
        min_over = max(1, round(0.125 * Z))
        max_over = max(min_over + 1, round(0.25 * Z))
        n_over = int(rng.integers(min_over, max_over + 1))
        n_over = min(n_over, depth - 1 - top)
        if n_over > 0:
            cap = gt[OrganId.BOWEL_BAG][top]
            emitted[OrganId.BOWEL_BAG][top + 1:top + 1 + n_over] = cap

    # --- per-organ annotation hiding
    hidden = []
    labels = LabelSet.empty(image.shape)
    for organ in ORGANS:
        keep = rng.random() < config.availability_probs[organ]
        if keep:
            labels.masks[organ] = emitted[organ]
            labels.available[organ] = True
            labels.source[organ] = LabelSource.CLINICAL
        else:
            hidden.append(organ.key)

    # --- additive intensity noise (image only)
    if config.noise_sigma > 0:
        image = image + rng.normal(0.0, config.noise_sigma, size=image.shape).astype(np.float32)

    record = ScanRecord(
        id=f"phantom_{index:04d}",
        image=Volume(image, config.spacing, IntensityUnit.HU),
        labels=labels,
        meta={"provenance": json.dumps(
            {"generator": "phantom", "seed": config.seed, "index": index}, sort_keys=True)},
    )
    core_data.set_ground_truth(record, gt)
    record.meta[NOISE_KEY] = json.dumps({
        "chest_slices": n_chest,
        "bowel_overannotation_slices": n_over,
        "hidden_organs": hidden,
    }, sort_keys=True)
    return record


def generate_dataset(config: PhantomConfig, n: int, out_dir: str | Path) -> DatasetManifest:
    """Write ``n`` phantom containers plus a ``manifest.json`` to ``out_dir``."""
    if n < 1:
        raise ConfigError("n must be >= 1")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for i in range(n):
        record = generate_phantom(config, i)
        path = core_data.write_container(record, out_dir / record.id)
        entries.append(ManifestEntry(id=record.id, path=path))
    manifest = DatasetManifest(records=entries)
    core_data.save_manifest(manifest, out_dir / "manifest.json")
    return manifest


def noise_info(record: ScanRecord) -> dict:
    """Injected-noise bookkeeping for a phantom record (evaluation only)."""
    raw = record.meta.get(NOISE_KEY)
    return json.loads(raw) if raw else {}
