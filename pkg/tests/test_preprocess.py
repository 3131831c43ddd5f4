import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ugss.core_data import IntensityUnit, OrganId, ORGANS, Volume, records_equal
from ugss.errors import ValidationError
from ugss.preprocess import (
    RawLabelEntry,
    preprocess_record,
    resample,
    resolve_overlap,
    standardize_labels,
    window_hu,
)

from conftest import make_record


def entry(name, shape=(4, 4, 4), fill=1):
    mask = np.full(shape, fill, dtype=np.uint8)
    return RawLabelEntry(name, mask)


class TestStandardizeLabels:
    @pytest.mark.parametrize("name", ["bowel", "bowel bag", "Bowel bag", "bowel_bag", "Bowel_bag"])
    def test_bowel_aliases(self, name):
        labels = standardize_labels([entry(name)])
        assert labels.available[OrganId.BOWEL_BAG]

    def test_left_right_hips_merged(self):
        left = np.zeros((4, 4, 4), dtype=np.uint8)
        right = np.zeros((4, 4, 4), dtype=np.uint8)
        left[0, 0, 0] = 1
        right[3, 3, 3] = 1
        labels = standardize_labels([RawLabelEntry("hip_l", left), RawLabelEntry("HIP_R", right)])
        assert labels.available[OrganId.HIPS]
        assert labels.masks[OrganId.HIPS].sum() == 2
        assert labels.masks[OrganId.HIPS][0, 0, 0] == 1
        assert labels.masks[OrganId.HIPS][3, 3, 3] == 1

    def test_unmatched_dropped_with_warning(self, caplog):
        with caplog.at_level("WARNING"):
            labels = standardize_labels([entry("femur")])
        assert not any(labels.available[o] for o in ORGANS)
        assert "unmatched: femur" in caplog.text

    def test_duplicates_or_combined(self):
        a = np.zeros((4, 4, 4), dtype=np.uint8)
        b = np.zeros((4, 4, 4), dtype=np.uint8)
        a[0, 0, 0] = 1
        b[1, 1, 1] = 1
        labels = standardize_labels([RawLabelEntry("Bladder", a), RawLabelEntry("bladder", b)])
        assert labels.masks[OrganId.BLADDER].sum() == 2

    def test_conflicting_shapes(self):
        with pytest.raises(ValidationError, match="conflicts"):
            standardize_labels([entry("bladder"), entry("rectum", shape=(5, 4, 4))])


class TestResolveOverlap:
    def test_disjoint_unchanged(self, record):
        out = resolve_overlap(record.labels)
        for organ in ORGANS:
            assert np.array_equal(out.masks[organ], record.labels.masks[organ])

    def test_bladder_inside_bowel_subtracted(self, record):
        record.labels.masks[OrganId.BOWEL_BAG][:] = 0
        record.labels.masks[OrganId.BOWEL_BAG][0:5, 0:5, 0:5] = 1
        record.labels.masks[OrganId.BLADDER][:] = 0
        record.labels.masks[OrganId.BLADDER][1:4, 1:4, 1:4] = 1  # 27-voxel cube inside
        before = record.labels.masks[OrganId.BOWEL_BAG].sum()
        out = resolve_overlap(record.labels)
        assert out.masks[OrganId.BOWEL_BAG].sum() == before - 27
        assert np.array_equal(out.masks[OrganId.BLADDER], record.labels.masks[OrganId.BLADDER])

    def test_unavailable_bladder_contributes_nothing(self, record):
        record.labels.masks[OrganId.BOWEL_BAG][:] = 1
        record.labels.masks[OrganId.BLADDER][:] = 0
        record.labels.available[OrganId.BLADDER] = False
        record.labels.source[OrganId.BLADDER] = "NONE"
        record.labels.masks[OrganId.RECTUM][:] = 0
        out = resolve_overlap(record.labels)
        assert out.masks[OrganId.BOWEL_BAG].sum() == record.labels.masks[OrganId.BOWEL_BAG].sum()

    def test_never_increases_counts(self, record):
        out = resolve_overlap(record.labels)
        for organ in ORGANS:
            assert out.masks[organ].sum() <= record.labels.masks[organ].sum()


class TestResample:
    def test_identity(self):
        vol = Volume(np.random.default_rng(0).normal(size=(6, 5, 4)).astype(np.float32),
                     (2.5, 2.5, 2.5))
        out = resample(vol, (2.5, 2.5, 2.5))
        assert np.array_equal(out.data, vol.data)

    def test_shape_arithmetic(self):
        vol = Volume(np.zeros((8, 8, 8), dtype=np.float32), (5.0, 5.0, 5.0))
        out = resample(vol, (2.5, 2.5, 2.5))
        assert out.shape == (16, 16, 16)
        assert out.spacing == (2.5, 2.5, 2.5)

    def test_midpoint_interpolation_value(self):
        # 1D ramp [0, 1] at 2 mm; at 1 mm the interior samples sit a quarter
        # voxel either side of the two input centers: 0.25 and 0.75
        data = np.zeros((1, 1, 2), dtype=np.float32)
        data[0, 0, 1] = 1.0
        vol = Volume(data, (2.0, 2.0, 2.0))
        out = resample(vol, (2.0, 2.0, 1.0))
        assert out.shape == (1, 1, 4)
        np.testing.assert_allclose(out.data[0, 0], [0.0, 0.25, 0.75, 1.0], atol=1e-6)
        # and the exact midpoint between centers interpolates to 0.5
        half = resample(Volume(data, (1.0, 1.0, 1.0)), (1.0, 1.0, 0.5))
        assert half.data[0, 0, 1] == pytest.approx(0.25)
        assert (0.5 * (half.data[0, 0, 1] + half.data[0, 0, 2])) == pytest.approx(0.5)

    def test_nearest_keeps_masks_binary(self):
        rng = np.random.default_rng(1)
        mask = (rng.random((6, 6, 6)) < 0.4).astype(np.uint8)
        vol = Volume(mask.astype(np.float32), (4.0, 4.0, 4.0))
        out = resample(vol, (2.5, 2.5, 2.5), "nearest")
        assert set(np.unique(out.data)) <= {0.0, 1.0}

    def test_bad_target(self):
        vol = Volume(np.zeros((4, 4, 4), dtype=np.float32), (2.5, 2.5, 2.5))
        with pytest.raises(ValidationError):
            resample(vol, (0.0, 2.5, 2.5))


class TestWindowHu:
    def test_center_maps_to_half(self):
        vol = Volume(np.full((2, 2, 2), 40.0, dtype=np.float32), (1, 1, 1))
        out = window_hu(vol)
        assert np.all(out.data == 0.5)
        assert out.unit == IntensityUnit.NORMALIZED

    def test_bounds(self):
        vol = Volume(np.array([[[-160.0, 240.0]]], dtype=np.float32), (1, 1, 1))
        out = window_hu(vol)
        np.testing.assert_allclose(out.data[0, 0], [0.0, 1.0])

    def test_clamped(self):
        vol = Volume(np.array([[[-1000.0, 3000.0]]], dtype=np.float32), (1, 1, 1))
        out = window_hu(vol)
        np.testing.assert_allclose(out.data[0, 0], [0.0, 1.0])

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(-2000, 2000), min_size=2, max_size=8))
    def test_monotone_and_in_unit_interval(self, values):
        arr = np.array(values, dtype=np.float32).reshape(1, 1, -1)
        out = window_hu(Volume(arr, (1, 1, 1))).data[0, 0]
        assert np.all((out >= 0.0) & (out <= 1.0))
        order = np.argsort(arr[0, 0], kind="stable")
        assert np.all(np.diff(out[order]) >= -1e-7)

    def test_requires_hu(self):
        vol = Volume(np.zeros((2, 2, 2), dtype=np.float32), (1, 1, 1),
                     IntensityUnit.NORMALIZED)
        with pytest.raises(ValidationError):
            window_hu(vol)

    def test_bad_width(self):
        vol = Volume(np.zeros((2, 2, 2), dtype=np.float32), (1, 1, 1))
        with pytest.raises(ValidationError):
            window_hu(vol, width=0.0)


class TestPreprocessRecord:
    def test_idempotent(self):
        record = make_record(spacing=(5.0, 5.0, 5.0))
        once = preprocess_record(record)
        twice = preprocess_record(once)
        assert records_equal(once, twice)

    def test_resamples_and_windows(self):
        record = make_record(shape=(8, 8, 8), spacing=(5.0, 5.0, 5.0))
        out = preprocess_record(record)
        assert out.image.shape == (16, 16, 16)
        assert out.image.unit == IntensityUnit.NORMALIZED
        assert out.image.spacing == (2.5, 2.5, 2.5)
        for organ in ORGANS:
            assert out.labels.masks[organ].shape == (16, 16, 16)
            assert set(np.unique(out.labels.masks[organ])) <= {0, 1}
        # disjointness preserved through nearest-neighbor resampling
        triple = [OrganId.BLADDER, OrganId.RECTUM, OrganId.BOWEL_BAG]
        total = sum((out.labels.masks[o] > 0).astype(int) for o in triple)
        assert total.max() <= 1

    def test_single_organ_record_survives(self):
        record = make_record()
        for organ in ORGANS:
            if organ != OrganId.HIPS:
                record.labels.masks[organ][:] = 0
                record.labels.available[organ] = False
                record.labels.source[organ] = "NONE"
        out = preprocess_record(record)
        assert out.labels.available_organs() == [OrganId.HIPS]

    def test_overlap_removed(self):
        record = make_record()
        record.labels.masks[OrganId.BOWEL_BAG][:] = 0
        record.labels.masks[OrganId.BOWEL_BAG][0:4, 0:4, 0:4] = 1
        record.labels.masks[OrganId.BLADDER][:] = 0
        record.labels.masks[OrganId.BLADDER][0:2, 0:2, 0:2] = 1
        out = preprocess_record(record)
        overlap = (out.labels.masks[OrganId.BOWEL_BAG] > 0) & (out.labels.masks[OrganId.BLADDER] > 0)
        assert overlap.sum() == 0
