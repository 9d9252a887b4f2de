import numpy as np
import pytest

import pairglow.data as D
from pairglow.errors import ConfigError, FormatError, UsageError


def boundary_oracle(inst):
    """Literal 4-neighbor rule, pixel by pixel."""
    h, w = inst.shape
    out = np.zeros((h, w), dtype=np.uint8)
    for i in range(h):
        for j in range(w):
            for di, dj in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                ni, nj = i + di, j + dj
                if 0 <= ni < h and 0 <= nj < w and inst[ni, nj] != inst[i, j]:
                    out[i, j] = 1
    return out


class TestSceneGeneration:
    def test_same_seed_bitwise_identical(self):
        a = D.generate_scene(42, 32)
        b = D.generate_scene(42, 32)
        assert np.array_equal(a.seg, b.seg)
        assert np.array_equal(a.photo, b.photo)
        assert np.array_equal(a.instance_ids, b.instance_ids)

    def test_every_seg_pixel_in_palette(self):
        s = D.generate_scene(7, 32)
        pixels = s.seg.reshape(3, -1).T
        palette = {tuple(c) for c in D.PALETTE}
        assert {tuple(p) for p in pixels} <= palette

    def test_shapes_agree(self):
        s = D.generate_scene(3, 16)
        assert s.seg.shape == s.photo.shape == (3, 16, 16)
        assert s.instance_ids.shape == (16, 16)
        assert np.all(s.instance_ids >= 0)

    def test_different_seeds_differ(self):
        photos = {D.generate_scene(seed, 16).photo.tobytes() for seed in range(100)}
        assert len(photos) == 100

    def test_too_small_rejected(self):
        with pytest.raises(ConfigError):
            D.generate_scene(0, 4)


class TestBoundaryMap:
    def test_uniform_grid_all_zero(self):
        assert not D.boundary_map(np.full((6, 6), 3)).any()

    def test_half_split_hand_case(self):
        inst = np.zeros((4, 4), dtype=int)
        inst[:, 2:] = 1
        b = D.boundary_map(inst)
        assert np.array_equal(b[:, 0], [0, 0, 0, 0])
        assert np.array_equal(b[:, 1], [1, 1, 1, 1])
        assert np.array_equal(b[:, 2], [1, 1, 1, 1])
        assert np.array_equal(b[:, 3], [0, 0, 0, 0])

    def test_single_interior_pixel(self):
        inst = np.zeros((5, 5), dtype=int)
        inst[2, 2] = 9
        b = D.boundary_map(inst)
        want = np.zeros((5, 5), dtype=np.uint8)
        want[2, 2] = 1
        want[1, 2] = want[3, 2] = want[2, 1] = want[2, 3] = 1
        assert np.array_equal(b, want)

    def test_agrees_with_oracle_on_random_grids(self, rng):
        for _ in range(100):
            inst = rng.integers(0, 5, size=(8, 8))
            assert np.array_equal(D.boundary_map(inst), boundary_oracle(inst))

    def test_relabeling_invariance(self, rng):
        inst = rng.integers(0, 6, size=(12, 12))
        perm = rng.permutation(100)  # bijection on id space
        assert np.array_equal(D.boundary_map(inst), D.boundary_map(perm[inst]))


class TestDownsample:
    def test_all_ones(self):
        m = np.ones((8, 8))
        assert np.all(D.downsample_boundary(m, 4, "bilinear") == 1.0)
        assert np.all(D.downsample_boundary(m, 4, "binary") == 1)

    def test_checkerboard_block(self):
        m = np.array([[0, 1], [1, 0]], dtype=np.uint8)
        assert D.downsample_boundary(m, 2, "bilinear")[0, 0] == 0.5
        assert D.downsample_boundary(m, 2, "binary")[0, 0] == 1

    def test_output_dims(self):
        m = np.zeros((16, 8))
        assert D.downsample_boundary(m, 4).shape == (4, 2)

    def test_non_dividing_factor_rejected(self):
        with pytest.raises(UsageError):
            D.downsample_boundary(np.zeros((6, 6)), 4)
        with pytest.raises(UsageError):
            D.downsample_boundary(np.zeros((8, 8)), 3)


class TestDequantize:
    def test_zero_bin_bounds(self, rng):
        img = np.zeros((3, 4, 4), dtype=np.uint8)
        y = D.dequantize(img, rng)
        assert np.all(y >= -0.5) and np.all(y < -0.5 + 1 / 256)

    def test_quantize_roundtrip_all_values(self, rng):
        img = np.arange(256, dtype=np.uint8).reshape(1, 16, 16)
        assert np.array_equal(D.quantize(D.dequantize(img, rng)), img)

    def test_seeded_reproducible(self):
        img = np.full((3, 8, 8), 100, dtype=np.uint8)
        a = D.dequantize(img, np.random.default_rng(5))
        b = D.dequantize(img, np.random.default_rng(5))
        assert np.array_equal(a, b)

    def test_histogram_preserved(self, rng):
        img = rng.integers(0, 256, size=(3, 32, 32)).astype(np.uint8)
        back = D.quantize(D.dequantize(img, rng))
        assert np.array_equal(np.bincount(img.ravel(), minlength=256),
                              np.bincount(back.ravel(), minlength=256))

    def test_center_variant_deterministic(self):
        img = np.array([[[0, 255]]], dtype=np.uint8)
        y = D.dequantize_center(img)
        assert np.allclose(y, [[[0.5 / 256 - 0.5, 255.5 / 256 - 0.5]]])


class TestPixmapCodec:
    def test_roundtrip_bitwise(self, tmp_path, rng):
        img = rng.integers(0, 256, size=(3, 5, 7)).astype(np.uint8)
        p = tmp_path / "img.ppm"
        D.write_image(p, img)
        assert np.array_equal(D.read_image(p), img)

    def test_minimal_header_parses(self, tmp_path):
        p = tmp_path / "min.ppm"
        p.write_bytes(b"P6\n2 1\n255\n" + bytes([1, 2, 3, 4, 5, 6]))
        img = D.read_image(p)
        assert img.shape == (3, 1, 2)
        assert np.array_equal(img[:, 0, 0], [1, 2, 3])

    def test_comments_and_whitespace_tolerated(self, tmp_path):
        p = tmp_path / "c.ppm"
        p.write_bytes(b"P6\n# a comment\n 1 1 \n255\n\x09\x08\x07")
        assert np.array_equal(D.read_image(p)[:, 0, 0], [9, 8, 7])

    def test_truncated_rejected(self, tmp_path):
        p = tmp_path / "t.ppm"
        p.write_bytes(b"P6\n4 4\n255\n" + b"\x00" * 10)
        with pytest.raises(FormatError):
            D.read_image(p)

    def test_bad_magic_and_maxval(self, tmp_path):
        p = tmp_path / "bad.ppm"
        p.write_bytes(b"P3\n1 1\n255\n")
        with pytest.raises(FormatError):
            D.read_image(p)
        p.write_bytes(b"P6\n1 1\n65535\n\x00\x00\x00\x00\x00\x00")
        with pytest.raises(FormatError):
            D.read_image(p)

    def test_instance_map_roundtrip(self, tmp_path, rng):
        ids = rng.integers(0, 40000, size=(6, 4)).astype(np.int32)
        p = tmp_path / "inst.pgm"
        D.write_instance_map(p, ids)
        assert np.array_equal(D.read_instance_map(p), ids)


class TestDatasetLayout:
    def test_save_load_roundtrip(self, tmp_path):
        s = D.generate_scene(11, 16)
        D.save_pair(tmp_path, 0, s)
        back = D.load_pair(tmp_path, 0)
        assert np.array_equal(back.seg, s.seg)
        assert np.array_equal(back.photo, s.photo)
        assert np.array_equal(back.instance_ids, s.instance_ids)

    def test_generate_dataset_and_iterate(self, tmp_path):
        D.generate_dataset(tmp_path, 4, 16, seed=9)
        ds = D.PairDataset(tmp_path)
        assert len(ds) == 4
        assert ds[2].photo.shape == (3, 16, 16)

    def test_expected_filenames(self, tmp_path):
        D.generate_dataset(tmp_path, 1, 16, seed=0)
        assert (tmp_path / "pairs" / "00000_seg.ppm").exists()
        assert (tmp_path / "pairs" / "00000_photo.ppm").exists()
        assert (tmp_path / "pairs" / "00000_inst.pgm").exists()
