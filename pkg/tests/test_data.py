"""Preprocessing, manifests, splitting, and phantom synthesis."""

import numpy as np
import pytest

import nlran.data as D
from nlran.errors import DataError, ShapeError


def vol(shape=(8, 6, 6), label="Normal", scan_id="s0", **kw):
    rng = np.random.default_rng(0)
    return D.Volume(rng.uniform(0, 255, shape), label, scan_id, **kw)


class TestVolume:
    def test_label_index_order(self):
        assert [D.Volume(np.zeros((1, 1, 1)), lb, "x").label_index
                for lb in ("CP", "NCP", "Normal")] == [0, 1, 2]

    def test_rejects_bad_rank(self):
        with pytest.raises(ShapeError):
            D.Volume(np.zeros((4, 4)), "CP", "x")

    def test_rejects_out_of_range(self):
        with pytest.raises(DataError):
            D.Volume(np.full((2, 2, 2), 300.0), "CP", "x")

    def test_rejects_unknown_label(self):
        with pytest.raises(DataError):
            D.Volume(np.zeros((2, 2, 2)), "covid", "x")

    def test_rejects_nonbinary_mask(self):
        with pytest.raises(DataError):
            vol(mask=np.full((8, 6, 6), 0.5))

    def test_rejects_mismatched_mask_shape(self):
        with pytest.raises(ShapeError):
            vol(mask=np.zeros((2, 2, 2)))


class TestResample:
    def test_identity_when_equal(self):
        v = vol(shape=(4, 4, 4))
        assert D.resample_slices(v, 4) is v

    def test_thinning_indices(self):
        # 128 -> 64 picks slices 0, 2, 4, ..., 126
        v = vol(shape=(128, 2, 2))
        out = D.resample_slices(v, 64)
        np.testing.assert_array_equal(out.voxels, v.voxels[np.arange(0, 128, 2)])

    def test_duplication_indices(self):
        # 32 -> 64 duplicates each slice: floor(i * 32 / 64)
        v = vol(shape=(32, 2, 2))
        out = D.resample_slices(v, 64)
        np.testing.assert_array_equal(out.voxels, v.voxels[np.arange(64) // 2])

    def test_non_integer_ratio(self):
        v = vol(shape=(10, 2, 2))
        out = D.resample_slices(v, 4)
        np.testing.assert_array_equal(out.voxels, v.voxels[[0, 2, 5, 7]])

    def test_masks_follow(self):
        v = vol(shape=(8, 2, 2), lesion=np.ones((8, 2, 2)))
        out = D.resample_slices(v, 4)
        assert out.lesion.shape == (4, 2, 2)

    def test_empty_volume_rejected(self):
        v = vol(shape=(2, 2, 2))
        v.voxels = v.voxels[:0]
        with pytest.raises(DataError):
            D.resample_slices(v, 4)


class TestCenterCrop:
    def test_offsets_floor_centered(self):
        v = vol(shape=(2, 7, 9))
        out = D.center_crop(v, (4, 4))
        # top = (7-4)//2 = 1, left = (9-4)//2 = 2
        np.testing.assert_array_equal(out.voxels, v.voxels[:, 1:5, 2:6])

    def test_exact_fit(self):
        v = vol(shape=(2, 4, 4))
        out = D.center_crop(v, (4, 4))
        np.testing.assert_array_equal(out.voxels, v.voxels)

    def test_undersized_rejected(self):
        with pytest.raises(DataError):
            D.center_crop(vol(shape=(2, 3, 8)), (4, 4))


class TestMaskAndPipeline:
    def test_apply_mask_zeroes_outside(self):
        m = np.zeros((8, 6, 6))
        m[:, :3] = 1
        v = vol(mask=m)
        out = D.apply_mask(v)
        assert (out.voxels[:, 3:] == 0).all()
        np.testing.assert_array_equal(out.voxels[:, :3], v.voxels[:, :3])

    def test_apply_mask_requires_mask(self):
        with pytest.raises(DataError):
            D.apply_mask(vol())

    def test_preprocess_shape(self):
        v = vol(shape=(20, 10, 12), mask=np.ones((20, 10, 12)))
        out = D.preprocess(v, target_slices=8, crop=(6, 6))
        assert out.voxels.shape == (8, 6, 6)


class TestManifest:
    def test_round_trip(self, tmp_path):
        vols = D.generate_phantoms(D.PhantomSpec(shape=(4, 8, 8), count_per_class=1))
        D.write_dataset(vols, tmp_path)
        records = D.load_manifest(tmp_path / "manifest.jsonl")
        assert len(records) == 3
        loaded = D.load_volume(records[0], tmp_path)
        np.testing.assert_array_equal(loaded.voxels, vols[0].voxels)
        assert loaded.label == vols[0].label

    def test_missing_key_rejected(self, tmp_path):
        p = tmp_path / "m.jsonl"
        p.write_text('{"id": "a", "label": "CP"}\n')
        with pytest.raises(DataError, match="path"):
            D.load_manifest(p)

    def test_duplicate_id_rejected(self, tmp_path):
        p = tmp_path / "m.jsonl"
        line = '{"id": "a", "path": "a.nlt", "label": "CP"}\n'
        p.write_text(line + line)
        with pytest.raises(DataError, match="duplicate"):
            D.load_manifest(p, check_files=False)

    def test_missing_file_rejected(self, tmp_path):
        p = tmp_path / "m.jsonl"
        p.write_text('{"id": "a", "path": "a.nlt", "label": "CP"}\n')
        with pytest.raises(DataError, match="missing file"):
            D.load_manifest(p)

    def test_bad_json_rejected(self, tmp_path):
        p = tmp_path / "m.jsonl"
        p.write_text("not json\n")
        with pytest.raises(DataError, match="bad JSON"):
            D.load_manifest(p)


class TestSplit:
    def test_ten_per_class_gives_8_1_1(self):
        records = [
            {"id": f"{lb}{i}", "label": lb}
            for lb in D.LABELS
            for i in range(10)
        ]
        out = D.split(records, seed=0)
        for lb in D.LABELS:
            counts = {
                s: sum(1 for r in out if r["label"] == lb and r["split"] == s)
                for s in ("train", "val", "test")
            }
            assert counts == {"train": 8, "val": 1, "test": 1}

    def test_largest_remainder_at_paper_counts(self):
        # 1482 + 1519 + 1078 = 4079 scans -> 3263 / 408 / 408 overall
        sizes = {"CP": 1482, "NCP": 1519, "Normal": 1078}
        records = [
            {"id": f"{lb}{i}", "label": lb} for lb, n in sizes.items() for i in range(n)
        ]
        out = D.split(records, seed=1)
        totals = {s: sum(1 for r in out if r["split"] == s) for s in ("train", "val", "test")}
        assert totals == {"train": 3263, "val": 408, "test": 408}

    def test_partition_preserves_multiset(self):
        records = [{"id": str(i), "label": D.LABELS[i % 3]} for i in range(31)]
        out = D.split(records, seed=3)
        assert sorted(r["id"] for r in out) == sorted(r["id"] for r in records)

    def test_deterministic_per_seed(self):
        records = [{"id": str(i), "label": D.LABELS[i % 3]} for i in range(30)]
        a = D.split(records, seed=5)
        b = D.split(records, seed=5)
        assert a == b
        c = D.split(records, seed=6)
        assert {r["id"]: r["split"] for r in a} != {r["id"]: r["split"] for r in c}

    def test_too_few_records_rejected(self):
        with pytest.raises(DataError):
            D.split([{"id": "a", "label": "CP"}], seed=0)

    def test_nonpositive_ratio_rejected(self):
        records = [{"id": str(i), "label": "CP"} for i in range(10)]
        with pytest.raises(ValueError):
            D.split(records, ratios=(8, 0, 2))


class TestPhantoms:
    def test_balanced_and_labelled(self):
        vols = D.generate_phantoms(D.PhantomSpec(shape=(6, 12, 12), count_per_class=2))
        assert len(vols) == 6
        assert sorted(v.label for v in vols) == ["CP", "CP", "NCP", "NCP", "Normal", "Normal"]

    def test_deterministic_per_seed(self):
        spec = D.PhantomSpec(shape=(6, 12, 12), count_per_class=2, seed=9)
        a = D.generate_phantoms(spec)
        b = D.generate_phantoms(spec)
        for va, vb in zip(a, b):
            np.testing.assert_array_equal(va.voxels, vb.voxels)
            np.testing.assert_array_equal(va.lesion, vb.lesion)

    def test_values_in_range(self):
        for v in D.generate_phantoms(D.PhantomSpec(shape=(6, 12, 12), count_per_class=2)):
            assert v.voxels.min() >= 0.0 and v.voxels.max() <= 255.0

    def test_lesion_masks_match_class(self):
        vols = D.generate_phantoms(D.PhantomSpec(count_per_class=3, seed=2))
        for v in vols:
            if v.label == "Normal":
                assert v.lesion.sum() == 0
            else:
                assert v.lesion.sum() > 0

    def test_lesions_brighter_than_background(self):
        # Lesion voxels should be brighter on average; that contrast is the
        # classifiable signal.
        vols = D.generate_phantoms(D.PhantomSpec(count_per_class=5, seed=3))
        for v in vols:
            if v.label == "Normal":
                continue
            inside = v.voxels[v.lesion > 0].mean()
            outside = v.voxels[v.lesion == 0].mean()
            assert inside > outside + 10.0

    def test_infeasible_shape_rejected(self):
        with pytest.raises(DataError):
            D.PhantomSpec(shape=(2, 8, 8))
