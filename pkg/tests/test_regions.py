import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from mdse.regions import (
    MaskError,
    RegionMaskSet,
    apply_masks,
    load_masks,
    otsu_threshold,
    propose_fallback,
    save_mask,
)


def blob_image(size, boxes, level=0.9):
    img = np.zeros((size, size, 3))
    for r0, r1, c0, c1 in boxes:
        img[r0:r1, c0:c1] = level
    return img


class TestLoadMasks:
    def test_empty_directory(self, tmp_path):
        ms = load_masks(tmp_path, "img")
        assert len(ms) == 0 and ms.source == "ingested"

    def test_filename_order(self, tmp_path):
        a = np.zeros((4, 4), bool)
        a[0, 0] = True
        b = np.zeros((4, 4), bool)
        b[3, 3] = True
        save_mask(b, tmp_path / "img_mask_b.png")
        save_mask(a, tmp_path / "img_mask_a.png")
        save_mask(a, tmp_path / "other_mask_a.png")
        ms = load_masks(tmp_path, "img", (4, 4))
        assert len(ms) == 2
        assert np.array_equal(ms.masks[0], a) and np.array_equal(ms.masks[1], b)

    def test_wrong_size_names_file(self, tmp_path):
        save_mask(np.ones((3, 5), bool), tmp_path / "img_mask_0.png")
        with pytest.raises(MaskError, match="img_mask_0.png"):
            load_masks(tmp_path, "img", (4, 4))

    def test_missing_directory(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_masks(tmp_path / "nope", "img")


class TestFallback:
    def test_single_blob_8x8(self):
        img = blob_image(8, [(2, 5, 3, 6)])
        ms = propose_fallback(img, k=3)
        assert ms.source == "fallback" and len(ms) == 1
        expect = np.zeros((8, 8), bool)
        expect[2:5, 3:6] = True
        assert np.array_equal(ms.masks[0], expect)

    def test_constant_image(self):
        assert len(propose_fallback(np.full((8, 8, 3), 0.4), k=2)) == 0

    def test_tie_broken_by_scan_order(self):
        img = blob_image(10, [(6, 8, 1, 3), (1, 3, 6, 8)])
        ms = propose_fallback(img, k=1)
        assert ms.masks[0][1, 6] and not ms.masks[0][6, 1]

    def test_largest_first_and_k_limit(self):
        img = blob_image(12, [(0, 2, 0, 2), (5, 10, 5, 10), (0, 3, 8, 11)])
        ms = propose_fallback(img, k=2)
        assert [int(m.sum()) for m in ms.masks] == [25, 9]

    def test_diagonal_pixels_are_separate_components(self):
        img = np.zeros((4, 4, 3))
        img[0, 0] = img[1, 1] = 1.0
        assert len(propose_fallback(img, k=5)) == 2

    def test_k_must_be_positive(self):
        with pytest.raises(ValueError):
            propose_fallback(np.zeros((4, 4, 3)), 0)

    def test_deterministic(self, rng):
        img = rng.random((16, 16, 3))
        a, b = propose_fallback(img, 4), propose_fallback(img.copy(), 4)
        assert all(np.array_equal(x, y) for x, y in zip(a.masks, b.masks))

    def test_otsu_separates_two_levels(self):
        v = np.array([0.1] * 50 + [0.8] * 50)
        t = otsu_threshold(v)
        assert 0.1 <= t < 0.8


class TestApplyMasks:
    def test_all_ones_identity(self, rng):
        img = rng.random((6, 6, 3))
        (out,) = apply_masks(img, RegionMaskSet([np.ones((6, 6), bool)]))
        assert np.array_equal(out, img)

    def test_all_zeros_rejected(self):
        with pytest.raises(MaskError):
            RegionMaskSet([np.zeros((4, 4), bool)])

    def test_checkerboard_pixel_count(self, rng):
        img = 0.1 + rng.random((8, 8, 3))
        board = (np.add.outer(np.arange(8), np.arange(8)) % 2).astype(bool)
        (out,) = apply_masks(img, RegionMaskSet([board]))
        assert int(np.count_nonzero(out.any(axis=-1))) == 32
        assert np.array_equal(out[board], img[board])

    def test_size_mismatch(self, rng):
        with pytest.raises(MaskError):
            apply_masks(rng.random((4, 4, 3)), RegionMaskSet([np.ones((5, 5), bool)]))

    @settings(max_examples=40, deadline=None)
    @given(arrays(np.float64, (6, 6, 3), elements=st.floats(0, 1)), arrays(np.bool_, (6, 6)))
    def test_nonzero_only_on_foreground(self, img, mask):
        if not mask.any():
            return
        (out,) = apply_masks(img, RegionMaskSet([mask]))
        assert not np.any(out[~mask])
