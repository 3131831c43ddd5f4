import numpy as np
import pytest

from ugss import autoclean, core_data, phantom
from ugss.autoclean import (
    CleaningThresholds,
    apply_cleaning,
    clean_dataset,
    compute_extent_histograms,
    desk_thresholds,
    hip_cranial_landmark,
)
from ugss.core_data import LabelSource, OrganId, ORGANS, records_equal
from ugss.errors import ConfigError, LandmarkError
from ugss.phantom import PhantomConfig, generate_dataset, generate_phantom

from conftest import make_record


def tall_record(depth=60, hips_top=20, bowel_range=(22, 40), spacing=2.5):
    """A record with hips ending at ``hips_top`` and bowel spanning ``bowel_range``."""
    record = make_record(shape=(depth, 8, 8), spacing=(spacing, 2.5, 2.5))
    for organ in ORGANS:
        record.labels.masks[organ][:] = 0
    record.labels.masks[OrganId.HIPS][10:hips_top + 1, 2:4, 2:4] = 1
    record.labels.masks[OrganId.BOWEL_BAG][bowel_range[0]:bowel_range[1] + 1, 5:7, 5:7] = 1
    record.labels.masks[OrganId.BLADDER][12:14, 5:7, 2:4] = 1
    record.labels.masks[OrganId.RECTUM][2:6, 6:8, 4:6] = 1
    return record


class TestLandmark:
    def test_landmark_is_top_slice(self):
        record = tall_record(hips_top=20)
        assert hip_cranial_landmark(record.labels) == 20

    def test_single_voxel(self):
        record = tall_record()
        record.labels.masks[OrganId.HIPS][:] = 0
        record.labels.masks[OrganId.HIPS][5, 0, 0] = 1
        assert hip_cranial_landmark(record.labels) == 5

    def test_missing_hips(self):
        record = tall_record()
        record.labels.available[OrganId.HIPS] = False
        record.labels.masks[OrganId.HIPS][:] = 0
        record.labels.source[OrganId.HIPS] = LabelSource.NONE
        with pytest.raises(LandmarkError):
            hip_cranial_landmark(record.labels)


class TestThresholds:
    def test_ordering_enforced(self):
        with pytest.raises(ConfigError):
            CleaningThresholds(10.0, 20.0, 0.0)

    def test_negative_crop_rejected(self):
        with pytest.raises(ConfigError):
            CleaningThresholds(-5.0, -10.0, -20.0)

    def test_desk_defaults_ordered(self):
        t = desk_thresholds(64, 2.5)
        assert t.crop_above_mm >= t.delete_bowel_above_mm >= t.discard_below_mm


class TestExtentHistograms:
    def test_single_scan_distance(self, tmp_path):
        record = tall_record(depth=61, hips_top=20)
        path = core_data.write_container(record, tmp_path / record.id)
        manifest = core_data.DatasetManifest(
            records=[core_data.ManifestEntry(record.id, path)])
        scan_h, bowel_h = compute_extent_histograms(manifest, bin_width_mm=10.0)
        # distance (60 - 20) * 2.5 = 100 mm falls in exactly one bin
        assert scan_h.counts.sum() == 1
        idx = np.nonzero(scan_h.counts)[0][0]
        assert scan_h.bin_edges[idx] <= 100.0 <= scan_h.bin_edges[idx + 1]
        assert bowel_h.counts.sum() == 1

    def test_scan_without_bowel_contributes_scan_only(self, tmp_path):
        record = tall_record()
        record.labels.masks[OrganId.BOWEL_BAG][:] = 0
        record.labels.available[OrganId.BOWEL_BAG] = False
        record.labels.source[OrganId.BOWEL_BAG] = LabelSource.NONE
        path = core_data.write_container(record, tmp_path / record.id)
        manifest = core_data.DatasetManifest(
            records=[core_data.ManifestEntry(record.id, path)])
        scan_h, bowel_h = compute_extent_histograms(manifest)
        assert scan_h.counts.sum() == 1
        assert bowel_h.counts.sum() == 0

    def test_duplicate_scans_double_counts(self, tmp_path):
        r1 = tall_record()
        r2 = tall_record()
        r2.id = "rec_copy"
        p1 = core_data.write_container(r1, tmp_path / r1.id)
        p2 = core_data.write_container(r2, tmp_path / r2.id)
        manifest = core_data.DatasetManifest(records=[
            core_data.ManifestEntry(r1.id, p1), core_data.ManifestEntry(r2.id, p2)])
        scan_h, _ = compute_extent_histograms(manifest)
        assert scan_h.counts.sum() == 2
        assert scan_h.counts.max() == 2

    def test_csv_export(self, tmp_path):
        record = tall_record()
        path = core_data.write_container(record, tmp_path / record.id)
        manifest = core_data.DatasetManifest(
            records=[core_data.ManifestEntry(record.id, path)])
        scan_h, _ = compute_extent_histograms(manifest, bin_width_mm=5.0)
        csv = scan_h.to_csv(tmp_path / "scan.csv")
        lines = csv.read_text().strip().splitlines()
        assert lines[0] == "bin_left_mm,count"
        assert len(lines) == len(scan_h.counts) + 1


class TestApplyCleaning:
    def test_below_thresholds_unchanged(self):
        record = tall_record(depth=60, hips_top=20, bowel_range=(22, 40))
        # crop cutoff at z=20+120/2.5=68 > 59, delete cutoff z=60, discard at z=24
        t = CleaningThresholds(300.0, 100.0, 10.0)
        outcome = apply_cleaning(record, t)
        assert outcome.kept
        assert records_equal(outcome.record, record) or (
            outcome.record.meta.get(autoclean.CLEANING_LOG_KEY) == "[]")
        assert outcome.slices_cropped == 0
        assert outcome.bowel_voxels_deleted == 0

    def test_crop_removes_only_above_cutoff(self):
        record = tall_record(depth=60, hips_top=20)
        t = CleaningThresholds(50.0, 25.0, 0.0)  # crop above z = 20 + 20 = 40
        outcome = apply_cleaning(record, t)
        assert outcome.kept
        assert outcome.record.image.shape[0] == 41
        assert outcome.slices_cropped == 19
        gt = core_data.get_ground_truth(outcome.record)
        assert gt is None  # make_record has no ground truth attached

    def test_delete_counts_constructed_overhang(self):
        # bowel extends 50 mm (20 slices) above landmark; delete above 25 mm
        record = tall_record(depth=60, hips_top=20, bowel_range=(22, 40))
        t = CleaningThresholds(300.0, 25.0, 0.0)  # delete cutoff z = 30
        overhang = record.labels.masks[OrganId.BOWEL_BAG][31:].sum()
        assert overhang > 0
        outcome = apply_cleaning(record, t)
        assert outcome.kept
        assert outcome.bowel_voxels_deleted == overhang
        assert outcome.record.labels.masks[OrganId.BOWEL_BAG][31:].sum() == 0
        # image and other masks bit-identical on kept slices
        assert np.array_equal(outcome.record.image.data, record.image.data)
        for organ in (OrganId.BLADDER, OrganId.HIPS, OrganId.RECTUM):
            assert np.array_equal(outcome.record.labels.masks[organ],
                                  record.labels.masks[organ])

    def test_discard_when_bowel_below_window(self):
        record = tall_record(depth=60, hips_top=20, bowel_range=(5, 16))  # top 10 mm below lm
        t = CleaningThresholds(300.0, 100.0, 0.0)
        outcome = apply_cleaning(record, t)
        assert not outcome.kept
        assert outcome.reason == "bowel bag below pelvic window"

    def test_no_discard_when_bowel_unavailable(self):
        record = tall_record()
        record.labels.masks[OrganId.BOWEL_BAG][:] = 0
        record.labels.available[OrganId.BOWEL_BAG] = False
        record.labels.source[OrganId.BOWEL_BAG] = LabelSource.NONE
        t = CleaningThresholds(300.0, 100.0, 0.0)
        outcome = apply_cleaning(record, t)
        assert outcome.kept

    def test_idempotent(self):
        record = tall_record(depth=60, hips_top=20, bowel_range=(22, 40))
        t = CleaningThresholds(50.0, 25.0, 0.0)
        once = apply_cleaning(record, t)
        twice = apply_cleaning(once.record, t)
        assert twice.kept
        assert records_equal(once.record, twice.record)

    def test_never_crops_at_or_below_landmark(self):
        # bowel reaches down to the landmark so the all-zero thresholds keep it
        record = tall_record(depth=60, hips_top=20, bowel_range=(5, 40))
        record.labels.masks[OrganId.BOWEL_BAG][:, 2:4, 2:4] = 0  # avoid hip overlap
        t = CleaningThresholds(0.0, 0.0, 0.0)
        outcome = apply_cleaning(record, t)
        assert outcome.kept
        assert outcome.record.image.shape[0] == 21  # crop down to the landmark, not past
        assert hip_cranial_landmark(outcome.record.labels) == 20


class TestCleanDataset:
    def _noisy_manifest(self, tmp_path, n=30, seed=7):
        cfg = PhantomConfig(
            shape=(32, 32, 32), seed=seed,
            availability_probs={o: 1.0 for o in ORGANS},
            cranial_extent_jitter=8,
            bowel_overannotation_prob=0.4,
            noise_sigma=5.0)
        return cfg, generate_dataset(cfg, n, tmp_path / "noisy")

    def test_infinite_thresholds_nothing_changes(self, tmp_path):
        _, manifest = self._noisy_manifest(tmp_path, n=8)
        t = CleaningThresholds(1e9, 1e9, -1e9)
        cleaned, report = clean_dataset(manifest, t, tmp_path / "clean")
        assert report.kept == 8
        assert report.discarded == 0
        assert report.modified == 0
        for entry, orig in zip(cleaned.records, manifest.records):
            assert records_equal(core_data.read_container(entry.path),
                                 core_data.read_container(orig.path))

    def test_noisy_phantoms_detected(self, tmp_path):
        cfg, manifest = self._noisy_manifest(tmp_path, n=40, seed=13)
        t = desk_thresholds(32, 2.5)
        cleaned, report = clean_dataset(manifest, t, tmp_path / "clean")
        injected = 0
        for entry in manifest.records:
            info = phantom.noise_info(core_data.read_container(entry.path))
            if info["chest_slices"] > 0 or info["bowel_overannotation_slices"] > 0:
                injected += 1
        touched = report.modified + report.discarded
        # every touched record should correspond to injected noise, within
        # the slack of geometry jitter around the fixed thresholds
        assert touched >= injected - 6
        assert touched <= injected + 6

    def test_cleaning_shrinks_bowel_overannotation(self, tmp_path):
        # with chest headroom the injected overhangs extend well above the
        # deletion line, so most of the wrong voxels are removed in aggregate
        cfg = PhantomConfig(shape=(32, 32, 32), seed=3,
                            availability_probs={o: 1.0 for o in ORGANS},
                            cranial_extent_jitter=8,
                            bowel_overannotation_prob=1.0, noise_sigma=0.0)
        injected = restored = 0
        for idx in range(10):
            record = generate_phantom(cfg, idx)
            gt = core_data.get_ground_truth(record)
            extra = int(record.labels.masks[OrganId.BOWEL_BAG].sum()) - int(gt[OrganId.BOWEL_BAG].sum())
            outcome = apply_cleaning(record, desk_thresholds(32, 2.5))
            assert outcome.kept
            gt_after = core_data.get_ground_truth(outcome.record)[OrganId.BOWEL_BAG]
            extra_after = (int(outcome.record.labels.masks[OrganId.BOWEL_BAG].sum())
                           - int(gt_after.sum()))
            # ground-truth bowel voxels are never deleted
            assert np.all(outcome.record.labels.masks[OrganId.BOWEL_BAG] >= gt_after)
            injected += extra
            restored += extra - extra_after
        assert injected > 0
        assert restored >= 0.5 * injected

    def test_idempotent_on_dataset(self, tmp_path):
        _, manifest = self._noisy_manifest(tmp_path, n=10, seed=5)
        t = desk_thresholds(32, 2.5)
        cleaned1, _ = clean_dataset(manifest, t, tmp_path / "c1")
        cleaned2, report2 = clean_dataset(cleaned1, t, tmp_path / "c2")
        assert report2.discarded == 0
        assert report2.modified == 0
        for e1, e2 in zip(cleaned1.records, cleaned2.records):
            assert records_equal(core_data.read_container(e1.path),
                                 core_data.read_container(e2.path))

    def test_records_without_hips_pass_through(self, tmp_path):
        record = tall_record()
        record.labels.masks[OrganId.HIPS][:] = 0
        record.labels.available[OrganId.HIPS] = False
        record.labels.source[OrganId.HIPS] = LabelSource.NONE
        path = core_data.write_container(record, tmp_path / record.id)
        manifest = core_data.DatasetManifest(
            records=[core_data.ManifestEntry(record.id, path)])
        cleaned, report = clean_dataset(manifest, CleaningThresholds(50.0, 25.0, 0.0),
                                        tmp_path / "clean")
        assert report.skipped_no_landmark == 1
        assert report.kept == 1
        assert records_equal(core_data.read_container(cleaned.records[0].path), record)
