import json

import cv2
import numpy as np
import pytest

from mimicseg.data_io import (CacheConfig, CtVolume, SyntheticSpec, build_cache, cache_records, channel_stats,
                              discover_volumes, ellipse_mask, file_checksum, load_volume, make_synthetic,
                              read_cache_meta, read_record, resize_pair, save_volume, split_subjects,
                              synthetic_slice)
from mimicseg.errors import ConfigurationError, IngestionError, StaleCacheError


def _volume(rng, sid="a", depth=3, size=16):
    vox = rng.uniform(-1000, 400, size=(depth, size, size)).astype(np.float32)
    mask = np.zeros(vox.shape, dtype=np.uint8)
    mask[1, 4:8, 4:8] = 1
    return CtVolume(vox, (2.5, 0.7, 0.8), sid, mask)


class TestVolumes:
    @pytest.mark.parametrize("fmt", ["nii", "npy"])
    def test_roundtrip(self, tmp_path, rng, fmt):
        vol = _volume(rng)
        path = save_volume(vol, tmp_path, fmt=fmt)
        back = load_volume(path, require_mask=True)
        np.testing.assert_array_equal(back.voxels, vol.voxels)
        np.testing.assert_array_equal(back.mask, vol.mask)
        assert back.subject_id == "a"
        if fmt == "nii":
            np.testing.assert_allclose(back.spacing, vol.spacing, rtol=1e-6)

    def test_png_directory(self, tmp_path, rng):
        for name in ("s1", "s1_mask"):
            (tmp_path / name).mkdir()
        for k in range(2):
            cv2.imwrite(str(tmp_path / "s1" / f"{k:03d}.png"), rng.integers(0, 255, (8, 8), dtype=np.uint8))
            cv2.imwrite(str(tmp_path / "s1_mask" / f"{k:03d}.png"), np.full((8, 8), 255 * k, dtype=np.uint8))
        vol = load_volume(tmp_path / "s1", require_mask=True)
        assert vol.voxels.shape == (2, 8, 8) and vol.mask[1].all() and not vol.mask[0].any()
        assert discover_volumes(tmp_path) == [tmp_path / "s1"]

    def test_missing_and_corrupt(self, tmp_path):
        with pytest.raises(IngestionError):
            load_volume(tmp_path / "nope.nii")
        bad = tmp_path / "bad.nii"
        bad.write_bytes(b"not a nifti file")
        with pytest.raises(IngestionError):
            load_volume(bad)

    def test_mask_required(self, tmp_path, rng):
        np.save(tmp_path / "x.npy", rng.normal(size=(2, 4, 4)))
        with pytest.raises(IngestionError):
            load_volume(tmp_path / "x.npy", require_mask=True)

    def test_shape_validation(self, rng):
        with pytest.raises(IngestionError):
            CtVolume(np.zeros((4, 4)))
        with pytest.raises(IngestionError):
            CtVolume(np.zeros((2, 4, 4)), mask=np.zeros((2, 4, 5)))
        with pytest.raises(IngestionError):
            CtVolume(np.zeros((2, 4, 4)), spacing=(1, 0, 1))


class TestSynthetic:
    def test_ellipse_area(self):
        m = ellipse_mask((200, 200), (100, 100), (40, 20), 0.3)
        assert m.sum() == pytest.approx(np.pi * 40 * 20, rel=0.01)

    def test_slice_mask_matches_geometry(self):
        spec = SyntheticSpec(lesion_count_range=(1, 1), image_size=64)
        _, mask, lesions = synthetic_slice(np.random.default_rng(3), spec)
        (les,) = lesions
        np.testing.assert_array_equal(mask, ellipse_mask((64, 64), les["center"], les["axes"], les["angle"]))

    def test_deterministic(self, tmp_path):
        spec = SyntheticSpec(n_subjects=2, slices_per_subject=2, image_size=16)
        a = make_synthetic(spec, tmp_path / "a")
        b = make_synthetic(spec, tmp_path / "b")
        for name in ("subj000.nii", "subj001_mask.nii", "manifest.json"):
            assert file_checksum(a / name) == file_checksum(b / name)

    def test_invalid_spec(self):
        with pytest.raises(ConfigurationError):
            SyntheticSpec(lesion_count_range=(3, 1))


class TestSplits:
    def test_partition_and_determinism(self):
        ids = [f"s{i}" for i in range(20)]
        a = split_subjects(ids, seed=4)
        assert sorted(a["train"] + a["val"] + a["test"]) == sorted(ids)
        assert [len(a[k]) for k in ("train", "val", "test")] == [14, 2, 4]
        assert a == split_subjects(list(reversed(ids)), seed=4)

    def test_small_sets_fill_every_split(self):
        out = split_subjects(["a", "b", "c"])
        assert all(len(v) == 1 for v in out.values())

    def test_resize_pair_keeps_mask_binary(self, rng):
        img, m = resize_pair(rng.random((20, 20)), (rng.random((20, 20)) > 0.5).astype(np.uint8), 32)
        assert img.shape == m.shape == (32, 32)
        assert set(np.unique(m)) <= {0, 1}


class TestCache:
    def test_layout(self, tiny_cache):
        meta = read_cache_meta(tiny_cache)
        assert meta["patch_size"] == 4 and meta["fn_mode"] == "per_cube"
        for split in ("train", "val", "test"):
            assert len(cache_records(tiny_cache, split)) == meta["record_counts"][split]
        rec = read_record(cache_records(tiny_cache, "test")[0])
        assert rec["image"].shape == (32, 32) and rec["cube"].shape == (16, 8, 8)
        assert 0.0 <= rec["image"].min() and rec["image"].max() <= 1.0
        assert 0.0 <= rec["cube"].min() and rec["cube"].max() <= 1.0

    def test_train_split_has_no_empty_slices(self, tiny_cache):
        for p in cache_records(tiny_cache, "train"):
            assert read_record(p)["mask"].any()

    def test_record_names_keep_source_index(self, tiny_cache, tiny_dataset):
        meta = read_cache_meta(tiny_cache)
        geometry = json.loads((tiny_dataset / "manifest.json").read_text())["geometry"]
        for p in cache_records(tiny_cache, "train"):
            sid, idx = p.stem.split("__")
            assert sid in meta["splits"]["train"]
            assert geometry[sid][int(idx)], "train record points at a lesion-free source slice"

    def test_reuse_and_stale(self, tiny_dataset, tmp_path):
        cfg = CacheConfig(patch_size=4, image_size=32)
        out = build_cache(tiny_dataset, tmp_path / "c", cfg)
        stamp = (out / "meta.json").stat().st_mtime_ns
        assert build_cache(tiny_dataset, out, cfg) == out
        assert (out / "meta.json").stat().st_mtime_ns == stamp
        with pytest.raises(StaleCacheError):
            build_cache(tiny_dataset, out, CacheConfig(patch_size=8, image_size=32))
        build_cache(tiny_dataset, out, CacheConfig(patch_size=8, image_size=32), overwrite=True)
        rec = read_record(cache_records(out, "test")[0])
        assert rec["cube"].shape == (64, 4, 4)
        assert all(read_record(p)["cube"].shape[0] == 64 for s in ("train", "val", "test")
                   for p in cache_records(out, s))

    def test_global_fn_stats(self, tiny_dataset, tmp_path):
        out = build_cache(tiny_dataset, tmp_path / "g", CacheConfig(patch_size=4, image_size=32, fn_mode="global"))
        lo, hi = channel_stats(out)
        assert lo.shape == hi.shape == (16,) and (hi >= lo).all()

    def test_from_volumes_and_errors(self, tmp_path, rng):
        vols = [_volume(rng, f"v{i}") for i in range(3)]
        out = build_cache(vols, tmp_path / "v", CacheConfig(patch_size=4, image_size=16))
        assert sum(read_cache_meta(out)["record_counts"].values()) >= 3
        with pytest.raises(IngestionError):
            build_cache([], tmp_path / "e", CacheConfig())
        with pytest.raises(IngestionError):
            read_cache_meta(tmp_path / "missing")

    @pytest.mark.parametrize("kw", [{"patch_size": 3}, {"fn_mode": "batch"}, {"channel_order": "spiral"},
                                    {"image_size": 30, "patch_size": 8}])
    def test_invalid_config(self, kw):
        with pytest.raises(ConfigurationError):
            CacheConfig(**kw)
