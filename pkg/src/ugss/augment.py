"""Training-time augmentations in two tiers.

BASIC draws global brightness/contrast shifts (within +/-20%) and small
rotations (within +/-10 degrees per axis). ADDITIONAL adds the
noisy-student transforms: left-right flipping, masking one organ with a
random intensity (simulated contrast agent), global elastic deformations,
and elastic deformations concentrated around the bowel bag or bladder.

Every transform returns a new record with the image, all masks, and the
uncertainty map (when present) moved consistently: images are interpolated
trilinearly, masks and uncertainty by nearest neighbor so binary masks
stay binary and (label, uncertainty) pairs travel together. Out-of-field
voxels become 0 (background, zero uncertainty). Parameter draws come from
the generator passed in, so output is a pure function of (record, config,
rng state).
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .core_data import IntensityUnit, OrganId, ORGANS, ScanRecord
from .errors import ValidationError


class Tier(str, enum.Enum):
    BASIC = "BASIC"
    ADDITIONAL = "ADDITIONAL"


@dataclass
class ElasticFieldSpec:
    ctrl_spacing_mm: float = 20.0
    max_disp_mm: float = 5.0
    sigma_mm: float | None = None  # None: use the organ's bounding-box radius


@dataclass
class AugmentConfig:
    tier: Tier = Tier.BASIC
    p_brightness_contrast: float = 0.5
    p_rotate: float = 0.5
    p_flip: float = 0.5
    p_organ_mask: float = 0.5
    p_elastic_global: float = 0.5
    p_elastic_organ: float = 0.5
    brightness_limit: float = 0.2
    contrast_limit: float = 0.2
    rotate_limit_deg: float = 10.0
    elastic: ElasticFieldSpec = field(default_factory=ElasticFieldSpec)
    mask_intensity_range: tuple[float, float] = (0.0, 1.0)
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.tier, str):
            self.tier = Tier(self.tier)
        if isinstance(self.elastic, dict):
            self.elastic = ElasticFieldSpec(**self.elastic)
        for name in ("p_brightness_contrast", "p_rotate", "p_flip", "p_organ_mask",
                     "p_elastic_global", "p_elastic_organ"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValidationError(f"{name} must be in [0,1], got {p}")


def brightness_contrast(image: np.ndarray, b: float, c: float) -> np.ndarray:
    """Contrast about 0.5 then brightness shift, clamped back to [0, 1]."""
    if not -0.2 - 1e-9 <= b <= 0.2 + 1e-9 or not -0.2 - 1e-9 <= c <= 0.2 + 1e-9:
        raise ValidationError(f"brightness/contrast must be within +/-0.2, got b={b}, c={c}")
    out = (image.astype(np.float32) - 0.5) * (1.0 + c) + 0.5 + b
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def _warp_record(record: ScanRecord, sample_fn) -> ScanRecord:
    """Apply a spatial resampling ``sample_fn(array, order) -> array`` everywhere."""
    out = record.copy()
    out.image.data = sample_fn(record.image.data, 1).astype(np.float32)
    for organ in ORGANS:
        out.labels.masks[organ] = sample_fn(record.labels.masks[organ], 0).astype(np.uint8)
    if record.uncertainty is not None:
        out.uncertainty = sample_fn(record.uncertainty, 0).astype(np.float32)
    return out


def _rotation_matrix(angles_deg) -> np.ndarray:
    az, ay, ax = (math.radians(a) for a in angles_deg)
    cz, sz = math.cos(az), math.sin(az)
    cy, sy = math.cos(ay), math.sin(ay)
    cx, sx = math.cos(ax), math.sin(ax)
    rz = np.array([[1, 0, 0], [0, cz, -sz], [0, sz, cz]])  # rotates the (y,x) plane
    ry = np.array([[cy, 0, -sy], [0, 1, 0], [sy, 0, cy]])  # rotates the (z,x) plane
    rx = np.array([[cx, -sx, 0], [sx, cx, 0], [0, 0, 1]])  # rotates the (z,y) plane
    return rz @ ry @ rx


def rotate(record: ScanRecord, angles_deg) -> ScanRecord:
    """Rotate about the volume center by (z, y, x)-axis angles in degrees.

    The rotation acts in physical (mm) space so anisotropic spacings are
    honored; out-of-field voxels are filled with 0.
    """
    if any(abs(a) > 10.0 + 1e-9 for a in angles_deg):
        raise ValidationError(f"rotation angles limited to +/-10 degrees, got {angles_deg}")
    if all(a == 0 for a in angles_deg):
        return record.copy()
    spacing = np.asarray(record.image.spacing, dtype=np.float64)
    center = (np.asarray(record.image.shape, dtype=np.float64) - 1.0) / 2.0
    r_inv = _rotation_matrix(angles_deg).T  # inverse of an orthonormal matrix
    matrix = np.diag(1.0 / spacing) @ r_inv @ np.diag(spacing)
    offset = center - matrix @ center

    def sample(arr, order):
        return ndimage.affine_transform(
            arr.astype(np.float32 if order else arr.dtype), matrix, offset=offset,
            order=order, mode="constant", cval=0.0)

    return _warp_record(record, sample)


def flip_lr(record: ScanRecord) -> ScanRecord:
    """Mirror along x. Labels keep their identity (hips are one merged organ)."""
    return _warp_record(record, lambda arr, order: arr[:, :, ::-1].copy())


def organ_mask_intensity(record: ScanRecord, organ: OrganId, value: float) -> ScanRecord:
    """Overwrite the image inside one organ's mask with a constant intensity."""
    if not record.labels.available[organ]:
        raise ValidationError(f"organ {organ.key} is not available in this record")
    if not 0.0 <= value <= 1.0:
        raise ValidationError(f"mask intensity must be in [0,1], got {value}")
    out = record.copy()
    out.image.data[record.labels.masks[organ] > 0] = np.float32(value)
    return out


def _organ_centroid_and_radius(record: ScanRecord, organ: OrganId):
    mask = record.labels.masks[organ] > 0
    coords = np.argwhere(mask).astype(np.float64)
    spacing = np.asarray(record.image.spacing)
    centroid_mm = coords.mean(axis=0) * spacing
    half_extent_mm = (coords.max(axis=0) - coords.min(axis=0) + 1.0) * spacing / 2.0
    return centroid_mm, float(half_extent_mm.mean())


def elastic_deform(record: ScanRecord, spec: ElasticFieldSpec,
                   rng: np.random.Generator, center: OrganId | None = None) -> ScanRecord:
    """Warp with a smooth random displacement field.

    The field is drawn on a coarse control grid (one point per
    ``ctrl_spacing_mm``), trilinearly upsampled, and bounded by
    ``max_disp_mm`` per axis. With ``center`` given, the field is scaled by
    a Gaussian envelope around that organ's centroid so the deformation
    stays local; the envelope sigma defaults to the organ's bounding-box
    radius.
    """
    shape = record.image.shape
    spacing = np.asarray(record.image.spacing, dtype=np.float64)
    extent_mm = (np.asarray(shape) - 1) * spacing
    n_ctrl = np.maximum(2, np.ceil(extent_mm / spec.ctrl_spacing_mm).astype(int) + 1)
    ctrl = rng.uniform(-spec.max_disp_mm, spec.max_disp_mm, size=(3, *n_ctrl))

    if spec.max_disp_mm == 0:
        return record.copy()

    idx = np.indices(shape, dtype=np.float64)
    ctrl_coords = idx * spacing[:, None, None, None] / spec.ctrl_spacing_mm
    disp_mm = np.stack([
        ndimage.map_coordinates(ctrl[axis], ctrl_coords, order=1, mode="nearest")
        for axis in range(3)])

    if center is not None:
        if not record.labels.available[center]:
            raise ValidationError(f"center organ {center.key} is not available")
        centroid_mm, bbox_radius = _organ_centroid_and_radius(record, center)
        sigma = spec.sigma_mm if spec.sigma_mm is not None else max(bbox_radius, 1e-6)
        r2 = ((idx * spacing[:, None, None, None]
               - centroid_mm[:, None, None, None]) ** 2).sum(axis=0)
        disp_mm *= np.exp(-r2 / (2.0 * sigma * sigma))

    coords = idx + disp_mm / spacing[:, None, None, None]

    def sample(arr, order):
        return ndimage.map_coordinates(
            arr.astype(np.float32 if order else arr.dtype), coords,
            order=order, mode="constant", cval=0.0)

    return _warp_record(record, sample)


def sample_augmentation(record: ScanRecord, config: AugmentConfig,
                        rng: np.random.Generator) -> ScanRecord:
    """Draw which transforms fire and their parameters, then apply them.

    BASIC fires only brightness/contrast and rotation; ADDITIONAL also fires
    flipping, organ masking, and both elastic variants. Output is fully
    determined by the generator state handed in.
    """
    out = record
    extra = config.tier == Tier.ADDITIONAL

    if extra and rng.random() < config.p_flip:
        out = flip_lr(out)

    if rng.random() < config.p_rotate:
        angles = rng.uniform(-config.rotate_limit_deg, config.rotate_limit_deg, size=3)
        out = rotate(out, tuple(angles))

    if extra and rng.random() < config.p_elastic_global:
        out = elastic_deform(out, config.elastic, rng)

    if extra and rng.random() < config.p_elastic_organ:
        candidates = [o for o in (OrganId.BOWEL_BAG, OrganId.BLADDER)
                      if out.labels.available[o] and out.labels.masks[o].any()]
        if candidates:
            center = candidates[int(rng.integers(0, len(candidates)))]
            out = elastic_deform(out, config.elastic, rng, center=center)

    if rng.random() < config.p_brightness_contrast:
        if out.image.unit != IntensityUnit.NORMALIZED:
            raise ValidationError("brightness/contrast requires a NORMALIZED image; "
                                  "preprocess records before augmenting")
        b = float(rng.uniform(-config.brightness_limit, config.brightness_limit))
        c = float(rng.uniform(-config.contrast_limit, config.contrast_limit))
        out = out if out is not record else out.copy()
        out.image.data = brightness_contrast(out.image.data, b, c)

    if extra and rng.random() < config.p_organ_mask:
        available = [o for o in ORGANS if out.labels.available[o]]
        if available:
            organ = available[int(rng.integers(0, len(available)))]
            lo, hi = config.mask_intensity_range
            out = organ_mask_intensity(out, organ, float(rng.uniform(lo, hi)))

    return out.copy() if out is record else out
