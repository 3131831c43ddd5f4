import json

import numpy as np
import pytest

from ugss import core_data
from ugss.core_data import (
    IntensityUnit,
    LabelSource,
    OrganId,
    ORGANS,
    ScanRecord,
    Volume,
    masks_from_class_map,
    read_container,
    records_equal,
    to_class_map,
    validate_record,
    write_container,
)
from ugss.errors import ChecksumError, FormatError, ValidationError

from conftest import make_record


class TestContainerRoundTrip:
    def test_round_trip_identity(self, record, tmp_path):
        write_container(record, tmp_path / "rec")
        back = read_container(tmp_path / "rec")
        assert records_equal(record, back)

    def test_round_trip_with_uncertainty_and_meta(self, tmp_path):
        record = make_record(with_uncertainty=True)
        record.meta["note"] = "x"
        write_container(record, tmp_path / "rec")
        back = read_container(tmp_path / "rec")
        assert records_equal(record, back)
        assert np.array_equal(back.uncertainty, record.uncertainty)

    def test_unavailable_organ_round_trips_as_zeros(self, record, tmp_path):
        record.labels.masks[OrganId.RECTUM][:] = 0
        record.labels.available[OrganId.RECTUM] = False
        record.labels.source[OrganId.RECTUM] = LabelSource.NONE
        write_container(record, tmp_path / "rec")
        assert not (tmp_path / "rec" / "label_rectum.raw").exists()
        back = read_container(tmp_path / "rec")
        assert records_equal(record, back)

    def test_two_writes_byte_identical(self, record, tmp_path):
        write_container(record, tmp_path / "a")
        write_container(record, tmp_path / "b")
        for name in (p.name for p in (tmp_path / "a").iterdir()):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_corrupted_byte_fails_checksum(self, record, tmp_path):
        path = write_container(record, tmp_path / "rec")
        raw = path / "image.raw"
        buf = bytearray(raw.read_bytes())
        buf[13] ^= 0xFF
        raw.write_bytes(bytes(buf))
        with pytest.raises(ChecksumError):
            read_container(path)

    def test_shape_mismatch_detected(self, record, tmp_path):
        path = write_container(record, tmp_path / "rec")
        meta = json.loads((path / "meta.json").read_text())
        meta["shape"] = [7, 8, 8]
        (path / "meta.json").write_text(json.dumps(meta))
        with pytest.raises(FormatError, match="shape"):
            read_container(path)

    def test_unknown_dtype_descriptor(self, record, tmp_path):
        path = write_container(record, tmp_path / "rec")
        meta = json.loads((path / "meta.json").read_text())
        meta["image_dtype"] = "<f8"
        (path / "meta.json").write_text(json.dumps(meta))
        with pytest.raises(FormatError, match="dtype"):
            read_container(path)

    def test_invalid_record_refused(self, record, tmp_path):
        record.labels.masks[OrganId.BLADDER][:] = record.labels.masks[OrganId.BOWEL_BAG]
        with pytest.raises(ValidationError, match="disjointness"):
            write_container(record, tmp_path / "rec")


class TestValidateRecord:
    def test_valid_record(self, record):
        assert validate_record(record).ok

    def test_disjointness_violation_counted(self, record):
        record.labels.masks[OrganId.BLADDER][1:3, 1:3, 1:3] = 1  # 8-voxel overlap with bowel
        # keep the bladder's own cube too; only the overlap is counted
        report = validate_record(record)
        names = [v.invariant for v in report.violations]
        assert "disjointness" in names
        v = next(v for v in report.violations if v.invariant == "disjointness")
        assert v.count == 8

    def test_availability_consistency(self, record):
        record.labels.available[OrganId.BLADDER] = False
        record.labels.source[OrganId.BLADDER] = LabelSource.NONE
        report = validate_record(record)
        assert any(v.invariant == "availability consistency" for v in report.violations)

    def test_normalized_range_checked(self):
        record = make_record(unit=IntensityUnit.NORMALIZED)
        record.image.data[0, 0, 0] = 1.5
        report = validate_record(record)
        assert any(v.invariant == "intensity range" for v in report.violations)

    def test_bad_spacing(self, record):
        record.image.spacing = (2.5, -1.0, 2.5)
        report = validate_record(record)
        assert any(v.invariant == "spacing" for v in report.violations)

    def test_negative_uncertainty(self):
        record = make_record(with_uncertainty=True)
        record.uncertainty[0, 0, 0] = -0.5
        report = validate_record(record)
        assert any(v.invariant == "uncertainty range" for v in report.violations)


class TestClassMap:
    def test_collapse_expand_preserves_masks(self, record):
        cmap = to_class_map(record.labels)
        masks = masks_from_class_map(cmap)
        for organ in ORGANS:
            assert np.array_equal(masks[organ], record.labels.masks[organ])

    def test_background_is_zero(self, record):
        cmap = to_class_map(record.labels)
        organ_union = np.zeros(record.image.shape, dtype=bool)
        for organ in ORGANS:
            organ_union |= record.labels.masks[organ] > 0
        assert np.all(cmap[~organ_union] == 0)

    def test_unavailable_organ_not_painted(self, record):
        record.labels.masks[OrganId.HIPS][:] = 0
        record.labels.available[OrganId.HIPS] = False
        record.labels.source[OrganId.HIPS] = LabelSource.NONE
        cmap = to_class_map(record.labels)
        assert not np.any(cmap == int(OrganId.HIPS))


class TestManifest:
    def test_save_load(self, tmp_path, record):
        p1 = write_container(record, tmp_path / "r1")
        rec2 = make_record(seed=1)
        p2 = write_container(rec2, tmp_path / "r2")
        manifest = core_data.DatasetManifest(records=[
            core_data.ManifestEntry("rec_0", p1),
            core_data.ManifestEntry("rec_1", p2),
        ])
        core_data.save_manifest(manifest, tmp_path / "manifest.json")
        back = core_data.load_manifest(tmp_path / "manifest.json")
        assert back.ids() == ["rec_0", "rec_1"]
        assert records_equal(core_data.load_records(back)[1], rec2)

    def test_duplicate_ids_rejected(self, tmp_path):
        with pytest.raises(ValidationError):
            core_data.DatasetManifest(records=[
                core_data.ManifestEntry("a", tmp_path),
                core_data.ManifestEntry("a", tmp_path),
            ])

    def test_split_by_availability(self, tmp_path, record):
        partial = make_record(seed=1)
        partial.labels.masks[OrganId.BOWEL_BAG][:] = 0
        partial.labels.available[OrganId.BOWEL_BAG] = False
        partial.labels.source[OrganId.BOWEL_BAG] = LabelSource.NONE
        p1 = write_container(record, tmp_path / "full")
        p2 = write_container(partial, tmp_path / "part")
        manifest = core_data.DatasetManifest(records=[
            core_data.ManifestEntry(record.id, p1),
            core_data.ManifestEntry(partial.id, p2),
        ])
        full_m, part_m = core_data.split_by_availability(manifest)
        assert full_m.ids() == [record.id]
        assert part_m.ids() == [partial.id]


class TestMaskRle:
    def test_rle_round_trip_random(self):
        rng = np.random.default_rng(3)
        for _ in range(10):
            mask = (rng.random((6, 7, 5)) < 0.3).astype(np.uint8)
            back = core_data.decode_mask_rle(core_data.encode_mask_rle(mask))
            assert np.array_equal(mask, back)

    def test_ground_truth_round_trip(self, record):
        gt = {o: record.labels.masks[o].copy() for o in ORGANS}
        core_data.set_ground_truth(record, gt)
        back = core_data.get_ground_truth(record)
        for organ in ORGANS:
            assert np.array_equal(back[organ], gt[organ])

    def test_transform_ground_truth_crop(self, record):
        gt = {o: record.labels.masks[o].copy() for o in ORGANS}
        core_data.set_ground_truth(record, gt)
        core_data.transform_ground_truth(record, lambda m: m[:4])
        back = core_data.get_ground_truth(record)
        for organ in ORGANS:
            assert np.array_equal(back[organ], gt[organ][:4])
