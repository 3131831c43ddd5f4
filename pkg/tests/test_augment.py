import numpy as np
import pytest

from ugss import seeding
from ugss.augment import (
    AugmentConfig,
    ElasticFieldSpec,
    Tier,
    brightness_contrast,
    elastic_deform,
    flip_lr,
    organ_mask_intensity,
    rotate,
    sample_augmentation,
)
from ugss.core_data import IntensityUnit, OrganId, ORGANS, records_equal
from ugss.errors import ValidationError
from ugss.metrics import dice

from conftest import make_record


def norm_record(seed=0, shape=(16, 16, 16)):
    return make_record(shape=shape, unit=IntensityUnit.NORMALIZED, seed=seed)


def sphere_record(radius=6, shape=(20, 20, 20)):
    record = norm_record(shape=shape)
    zz, yy, xx = np.indices(shape)
    c = (shape[0] - 1) / 2
    sphere = ((zz - c) ** 2 + (yy - c) ** 2 + (xx - c) ** 2) <= radius ** 2
    record.labels.masks[OrganId.BLADDER] = sphere.astype(np.uint8)
    for organ in (OrganId.BOWEL_BAG, OrganId.HIPS, OrganId.RECTUM):
        record.labels.masks[organ][:] = 0
        record.labels.masks[organ][0, organ.value, 0] = 1  # keep nonzero, out of the way
    return record


class TestBrightnessContrast:
    def test_identity(self):
        img = np.random.default_rng(0).uniform(0, 1, (4, 4, 4)).astype(np.float32)
        np.testing.assert_allclose(brightness_contrast(img, 0.0, 0.0), img, atol=1e-7)

    def test_brightness_shift(self):
        img = np.full((2, 2, 2), 0.5, dtype=np.float32)
        assert brightness_contrast(img, 0.1, 0.0)[0, 0, 0] == pytest.approx(0.6)

    def test_contrast_about_half(self):
        img = np.full((2, 2, 2), 0.75, dtype=np.float32)
        assert brightness_contrast(img, 0.0, 0.2)[0, 0, 0] == pytest.approx(0.8)

    def test_clamped(self):
        img = np.array([[[0.95, 0.02]]], dtype=np.float32)
        out = brightness_contrast(img, 0.2, 0.2)
        assert out.max() <= 1.0 and out.min() >= 0.0

    def test_limit_enforced(self):
        with pytest.raises(ValidationError):
            brightness_contrast(np.zeros((2, 2, 2), np.float32), 0.3, 0.0)


class TestRotate:
    def test_zero_angles_identity(self):
        record = norm_record()
        out = rotate(record, (0.0, 0.0, 0.0))
        assert records_equal(out, record)

    def test_round_trip_dice_on_sphere(self):
        record = sphere_record()
        once = rotate(record, (0.0, 10.0, 0.0))
        back = rotate(once, (0.0, -10.0, 0.0))
        d = dice(back.labels.masks[OrganId.BLADDER], record.labels.masks[OrganId.BLADDER])
        assert d > 0.9  # nearest-neighbor resampling loses a thin shell only

    def test_masks_stay_binary(self):
        record = sphere_record()
        out = rotate(record, (7.0, -4.0, 9.0))
        for organ in ORGANS:
            assert set(np.unique(out.labels.masks[organ])) <= {0, 1}

    def test_angle_limit(self):
        with pytest.raises(ValidationError):
            rotate(norm_record(), (11.0, 0.0, 0.0))

    def test_shapes_and_flags_preserved(self):
        record = sphere_record()
        out = rotate(record, (3.0, 3.0, 3.0))
        assert out.image.shape == record.image.shape
        assert out.image.spacing == record.image.spacing
        assert out.labels.available == record.labels.available


class TestFlip:
    def test_double_flip_identity(self):
        record = norm_record()
        out = flip_lr(flip_lr(record))
        assert records_equal(out, record)

    def test_voxel_counts_preserved(self):
        record = sphere_record()
        out = flip_lr(record)
        for organ in ORGANS:
            assert out.labels.masks[organ].sum() == record.labels.masks[organ].sum()

    def test_marker_position(self):
        record = norm_record(shape=(16, 16, 10))
        record.image.data[:] = 0
        record.image.data[0, 0, 2] = 1.0
        out = flip_lr(record)
        assert out.image.data[0, 0, 7] == 1.0
        assert out.image.data[0, 0, 2] == 0.0


class TestOrganMaskIntensity:
    def test_empty_mask_identity_on_image(self):
        record = norm_record()
        record.labels.masks[OrganId.RECTUM][:] = 0
        out = organ_mask_intensity(record, OrganId.RECTUM, 0.9)
        assert np.array_equal(out.image.data, record.image.data)

    def test_exact_voxels_set(self):
        record = sphere_record()
        n = record.labels.masks[OrganId.BLADDER].sum()
        out = organ_mask_intensity(record, OrganId.BLADDER, 0.9)
        assert (out.image.data == np.float32(0.9)).sum() == n
        assert np.array_equal(out.labels.masks[OrganId.BLADDER],
                              record.labels.masks[OrganId.BLADDER])

    def test_idempotent(self):
        record = sphere_record()
        once = organ_mask_intensity(record, OrganId.BLADDER, 0.3)
        twice = organ_mask_intensity(once, OrganId.BLADDER, 0.3)
        assert records_equal(once, twice)

    def test_unavailable_organ_rejected(self):
        record = norm_record()
        record.labels.available[OrganId.HIPS] = False
        with pytest.raises(ValidationError):
            organ_mask_intensity(record, OrganId.HIPS, 0.5)


class TestElastic:
    def test_zero_magnitude_identity(self):
        record = norm_record()
        spec = ElasticFieldSpec(max_disp_mm=0.0)
        out = elastic_deform(record, spec, seeding.rng(0))
        assert records_equal(out, record)

    def test_same_seed_identical(self):
        record = sphere_record()
        spec = ElasticFieldSpec(max_disp_mm=5.0)
        a = elastic_deform(record, spec, seeding.rng(7))
        b = elastic_deform(record, spec, seeding.rng(7))
        assert records_equal(a, b)

    def test_centroid_shift_bounded(self):
        record = sphere_record()
        spec = ElasticFieldSpec(max_disp_mm=5.0)  # 2 voxels at 2.5 mm spacing
        out = elastic_deform(record, spec, seeding.rng(3))
        before = np.argwhere(record.labels.masks[OrganId.BLADDER]).mean(axis=0)
        after = np.argwhere(out.labels.masks[OrganId.BLADDER]).mean(axis=0)
        assert np.all(np.abs(after - before) <= 2.0 + 1e-6)

    def test_organ_centered_is_local(self):
        record = sphere_record(shape=(24, 24, 24))
        record.image.data[:] = 0.5
        record.image.data[1, 1, 1] = 1.0  # far from the bladder centroid
        spec = ElasticFieldSpec(max_disp_mm=5.0, sigma_mm=5.0)
        out = elastic_deform(record, spec, seeding.rng(5), center=OrganId.BLADDER)
        # the far corner is (almost) untouched by the enveloped field
        assert out.image.data[1, 1, 1] == pytest.approx(1.0, abs=1e-3)


class TestSampleAugmentation:
    def test_all_probabilities_zero_identity(self):
        record = norm_record()
        cfg = AugmentConfig(tier=Tier.ADDITIONAL, p_brightness_contrast=0, p_rotate=0,
                            p_flip=0, p_organ_mask=0, p_elastic_global=0, p_elastic_organ=0)
        out = sample_augmentation(record, cfg, seeding.rng(1))
        assert records_equal(out, record)

    def test_same_rng_state_identical(self):
        record = sphere_record()
        cfg = AugmentConfig(tier=Tier.ADDITIONAL)
        a = sample_augmentation(record, cfg, seeding.rng(42))
        b = sample_augmentation(record, cfg, seeding.rng(42))
        assert records_equal(a, b)

    def test_basic_tier_preserves_labels_except_rotation(self):
        record = sphere_record()
        cfg = AugmentConfig(tier=Tier.BASIC, p_rotate=0.0, p_brightness_contrast=1.0)
        for i in range(20):
            out = sample_augmentation(record, cfg, seeding.rng(i))
            for organ in ORGANS:
                assert np.array_equal(out.labels.masks[organ], record.labels.masks[organ])

    def test_basic_never_flips_or_masks(self):
        record = sphere_record()
        record.image.data[:] = 0.5
        cfg = AugmentConfig(tier=Tier.BASIC, p_rotate=0.0, p_brightness_contrast=0.0,
                            p_flip=1.0, p_organ_mask=1.0, p_elastic_global=1.0,
                            p_elastic_organ=1.0)
        out = sample_augmentation(record, cfg, seeding.rng(2))
        assert records_equal(out, record)

    def test_shapes_and_flags_invariant(self):
        record = sphere_record()
        cfg = AugmentConfig(tier=Tier.ADDITIONAL)
        for i in range(10):
            out = sample_augmentation(record, cfg, seeding.rng(i))
            assert out.image.shape == record.image.shape
            assert out.image.spacing == record.image.spacing
            assert out.labels.available == record.labels.available
            for organ in ORGANS:
                assert set(np.unique(out.labels.masks[organ])) <= {0, 1}

    def test_uncertainty_transforms_with_labels(self):
        record = sphere_record()
        record.uncertainty = (record.labels.masks[OrganId.BLADDER] == 0).astype(np.float32)
        cfg = AugmentConfig(tier=Tier.ADDITIONAL, p_brightness_contrast=0,
                            p_organ_mask=0, p_elastic_global=0, p_elastic_organ=0,
                            p_rotate=1.0, p_flip=1.0)
        out = sample_augmentation(record, cfg, seeding.rng(3))
        # wherever the bladder mask says 1, the transported uncertainty is 0
        inside = out.labels.masks[OrganId.BLADDER] > 0
        assert np.all(out.uncertainty[inside] == 0.0)
