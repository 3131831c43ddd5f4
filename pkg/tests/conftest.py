import numpy as np
import pytest

from ugss.core_data import (
    IntensityUnit,
    LabelSet,
    LabelSource,
    OrganId,
    ORGANS,
    ScanRecord,
    Volume,
)


def make_record(shape=(8, 8, 8), spacing=(2.5, 2.5, 2.5), unit=IntensityUnit.HU,
                seed=0, with_uncertainty=False) -> ScanRecord:
    """A small fully annotated record with disjoint single-voxel-cube organs."""
    rng = np.random.default_rng(seed)
    image = rng.normal(40.0, 30.0, size=shape).astype(np.float32)
    if unit == IntensityUnit.NORMALIZED:
        image = np.clip((image + 160.0) / 400.0, 0.0, 1.0).astype(np.float32)
    labels = LabelSet.empty(shape)
    corners = {
        OrganId.BOWEL_BAG: (1, 1, 1),
        OrganId.BLADDER: (1, 5, 1),
        OrganId.HIPS: (5, 1, 1),
        OrganId.RECTUM: (5, 5, 5),
    }
    for organ, (z, y, x) in corners.items():
        mask = np.zeros(shape, dtype=np.uint8)
        mask[z:z + 2, y:y + 2, x:x + 2] = 1
        labels.masks[organ] = mask
        labels.available[organ] = True
        labels.source[organ] = LabelSource.CLINICAL
    uncertainty = None
    if with_uncertainty:
        uncertainty = rng.uniform(0.0, 1.0, size=shape).astype(np.float32)
    return ScanRecord(id=f"rec_{seed}", image=Volume(image, spacing, unit),
                      labels=labels, uncertainty=uncertainty)


@pytest.fixture
def record():
    return make_record()


def assert_organs_available(labels: LabelSet, organs):
    for organ in ORGANS:
        assert labels.available[organ] == (organ in organs)
