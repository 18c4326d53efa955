import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dagan.data import (AugmentConfig, BiTemporalSample, Transform, apply_transform, augment,
                        load_dataset, make_synthetic_dataset, mask_from_png, read_manifest,
                        sample_transform, save_dataset, split_dataset, stitch, tile_pairs,
                        write_manifest)


def pair(size, sid="src", rng=None, mask=None):
    rng = rng or np.random.default_rng(0)
    return BiTemporalSample(rng.random((3, size, size), dtype=np.float32),
                            rng.random((3, size, size), dtype=np.float32),
                            np.zeros((size, size), np.uint8) if mask is None else mask, id=sid)


class TestTiling:
    def test_full_scene_tiling(self):
        tiles = tile_pairs([pair(1024)], 256)
        assert len(tiles) == 16
        assert all(t.mask.shape == (256, 256) for t in tiles)
        assert [t.id for t in tiles[:5]] == ["src_0_0", "src_0_1", "src_0_2", "src_0_3", "src_1_0"]
        assert all(t.source_id == "src" for t in tiles)

    def test_identity_tile(self):
        p = pair(256)
        (t,) = tile_pairs([p], 256)
        assert np.array_equal(t.image_t1, p.image_t1) and np.array_equal(t.mask, p.mask)

    def test_quadrant_mask(self):
        mask = np.zeros((512, 512), np.uint8)
        mask[:256, :256] = 1
        tiles = {t.id: t for t in tile_pairs([pair(512, mask=mask)], 256)}
        assert tiles["src_0_0"].mask.all()
        for k in ("src_0_1", "src_1_0", "src_1_1"):
            assert not tiles[k].mask.any()

    def test_errors(self):
        with pytest.raises(ValueError, match="does not divide"):
            tile_pairs([pair(100)], 64)
        bad = pair(64)
        bad.image_t2 = bad.image_t2[:, :32]
        with pytest.raises(ValueError):
            tile_pairs([bad], 32)

    @settings(max_examples=20, deadline=None)
    @given(st.sampled_from([(64, 16), (64, 32), (96, 32), (128, 64)]), st.integers(0, 1000))
    def test_stitch_roundtrip(self, sizes, seed):
        size, tile = sizes
        rng = np.random.default_rng(seed)
        src = pair(size, "a_b", rng, mask=rng.integers(0, 2, (size, size)).astype(np.uint8))
        tiles = tile_pairs([src], tile)
        for key in ("image_t1", "image_t2", "mask"):
            assert np.array_equal(stitch(tiles, key)["a_b"], getattr(src, key))


class TestSplit:
    def test_70_10_20_ratio(self):
        parts = split_dataset([pair(8, f"s{i}") for i in range(10)], (0.7, 0.1, 0.2))
        assert [len(m) for m in parts] == [7, 1, 2]
        assert [m.split for m in parts] == ["train", "val", "test"]

    def test_single_source_train(self):
        train, val, test = split_dataset([pair(8)], (1, 0, 0))
        assert (len(train), len(val), len(test)) == (1, 0, 0)

    def test_deterministic(self):
        pairs = [pair(8, f"s{i}") for i in range(20)]
        a = split_dataset(pairs, (0.5, 0.25, 0.25), seed=7)
        b = split_dataset(list(reversed(pairs)), (0.5, 0.25, 0.25), seed=7)
        assert [m.source_ids for m in a] == [m.source_ids for m in b]

    def test_tiles_never_straddle(self):
        tiles = tile_pairs([pair(64, f"s{i}") for i in range(6)], 32)
        parts = split_dataset(tiles, (0.5, 0.25, 0.25), seed=3)
        ids = [m.source_ids for m in parts]
        assert not (ids[0] & ids[1] or ids[0] & ids[2] or ids[1] & ids[2])
        assert sum(len(m) for m in parts) == len(tiles)

    def test_too_few_sources(self):
        with pytest.raises(ValueError):
            split_dataset([pair(8, "a"), pair(8, "b")], (0.7, 0.1, 0.2))

    @settings(max_examples=50, deadline=None)
    @given(st.integers(3, 60), st.tuples(st.floats(0.05, 1), st.floats(0.05, 1), st.floats(0.05, 1)))
    def test_sizes_near_ratio(self, n, ratios):
        parts = split_dataset([pair(2, f"s{i}") for i in range(n)], ratios)
        r = np.array(ratios) / sum(ratios)
        sizes = np.array([len(m) for m in parts])
        assert sizes.sum() == n
        assert np.all(np.abs(sizes - n * r) <= 1 + 1e-9)


class TestAugment:
    def test_double_hflip(self):
        s = pair(16, rng=np.random.default_rng(2))
        t = Transform((0, 0, 16, 16), hflip=True)
        twice = apply_transform(apply_transform(s, t), t)
        assert np.array_equal(twice.image_t1, s.image_t1) and np.array_equal(twice.mask, s.mask)

    def test_flip_pixel_coordinates(self):
        mask = np.zeros((8, 12), np.uint8)
        mask[3, 2] = 1
        s = BiTemporalSample(np.zeros((3, 8, 12), np.float32), np.zeros((3, 8, 12), np.float32), mask, "m")
        out = apply_transform(s, Transform((0, 0, 8, 12), hflip=True))
        assert list(zip(*np.nonzero(out.mask))) == [(3, 12 - 1 - 2)]

    def test_full_crop_identity(self):
        s = pair(16)
        out = apply_transform(s, Transform((0, 0, 16, 16)))
        assert np.array_equal(out.image_t2, s.image_t2)

    def test_same_geometry_everywhere(self, rng):
        # encode the same pattern in T1, T2 and the mask; any shared transform keeps them aligned
        pattern = (rng.random((32, 32)) > 0.5).astype(np.uint8)
        img = np.repeat(pattern[None].astype(np.float32), 3, axis=0)
        s = BiTemporalSample(img, img.copy(), pattern, "p")
        cfg = AugmentConfig(crop_scale=(0.5, 1.0))
        for _ in range(20):
            out, t = augment(s, cfg, rng, return_transform=True)
            assert np.array_equal(out.mask, apply_transform(s, t).mask)
            assert np.array_equal(out.image_t1[0] >= 0.5, out.mask.astype(bool)) or t.crop[2:] != (32, 32)
            assert np.array_equal(out.image_t1, out.image_t2)
            out.validate()

    def test_transform_bounds(self, rng):
        for _ in range(50):
            top, left, h, w = sample_transform((20, 30), AugmentConfig(), rng).crop
            assert 0 <= top <= 20 - h and 0 <= left <= 30 - w and h >= 16 and w >= 24

    def test_bad_config(self):
        with pytest.raises(ValueError):
            AugmentConfig(crop_scale=(0.0, 1.0))


class TestSynthetic:
    def test_both_classes(self):
        samples = make_synthetic_dataset(16, 64, seed=0)
        assert len(samples) == 16
        for s in samples:
            s.validate()
            assert 0 < s.mask.sum() < s.mask.size

    def test_deterministic(self):
        a = make_synthetic_dataset(4, 32, seed=5)
        b = make_synthetic_dataset(4, 32, seed=5)
        for x, y in zip(a, b):
            assert np.array_equal(x.image_t1, y.image_t1) and np.array_equal(x.mask, y.mask)

    def test_no_change(self):
        (s,) = make_synthetic_dataset(1, 32, seed=1, changes=(0, 0))
        assert not s.mask.any()
        assert np.array_equal(s.image_t1, s.image_t2)

    def test_mask_marks_differences(self):
        for s in make_synthetic_dataset(8, 64, seed=3):
            differs = np.any(s.image_t1 != s.image_t2, axis=0)
            assert not differs[s.mask == 0].any()

    def test_rejects_small(self):
        with pytest.raises(ValueError):
            make_synthetic_dataset(1, 8)


def test_disk_roundtrip(tmp_path):
    samples = make_synthetic_dataset(3, 32, seed=2)
    save_dataset(samples, tmp_path)
    loaded = load_dataset(tmp_path)
    assert [s.id for s in loaded] == [s.id for s in samples]
    for a, b in zip(samples, loaded):
        assert np.array_equal(a.mask, b.mask)
        assert np.abs(a.image_t1 - b.image_t1).max() <= 0.5 / 255 + 1e-6
    parts = split_dataset(loaded, (1, 1, 1))
    write_manifest(tmp_path / "manifest.jsonl", parts, root=tmp_path)
    records = [json.loads(line) for line in (tmp_path / "manifest.jsonl").read_text().splitlines()]
    assert {r["split"] for r in records} == {"train", "val", "test"}
    assert set(records[0]) == {"id", "source", "split", "t1", "t2", "label"}
    groups = read_manifest(tmp_path / "manifest.jsonl")
    assert sum(len(g) for g in groups.values()) == 3


def test_mask_threshold():
    assert mask_from_png(np.array([[0, 127], [128, 255]], np.uint8)).tolist() == [[0, 0], [1, 1]]
