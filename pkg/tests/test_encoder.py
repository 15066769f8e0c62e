import numpy as np
import pytest

from mdse import tensor as T
from mdse.encoder import LARGE_VIT, VisionEncoder, VitConfig, dual_encode, encode, fuse, patchify
from mdse.regions import RegionMaskSet
from mdse.tensor import Tensor

from conftest import max_rel_error, numeric_gradient


@pytest.fixture(scope="module")
def encoder():
    return VisionEncoder(VitConfig(), seed=3)


def test_desk_shape(encoder, rng):
    out = encode(rng.random((32, 32, 3)), encoder)
    assert out.shape == (17, 64)
    assert np.all(np.isfinite(out.data))


def test_full_scale_token_bookkeeping():
    assert LARGE_VIT.num_tokens == 257 and LARGE_VIT.dim == 1024


def test_config_validation():
    with pytest.raises(ValueError):
        VitConfig(image_size=30, patch_size=8)
    with pytest.raises(ValueError):
        VitConfig(dim=65, heads=4)


def test_wrong_image_size(encoder):
    with pytest.raises(ValueError):
        encode(np.zeros((16, 16, 3)), encoder)


def test_zero_weights_zero_image_is_finite():
    enc = VisionEncoder(VitConfig(), seed=0)
    for _, p in enc.named_parameters():
        p.data[...] = 0.0
    out = encode(np.zeros((32, 32, 3)), enc)
    assert out.shape == (17, 64) and np.all(np.isfinite(out.data))


def test_patchify_raster_order():
    img = np.arange(4 * 4 * 3, dtype=float).reshape(1, 4, 4, 3)
    p = patchify(img, 2)
    assert p.shape == (1, 4, 12)
    assert np.array_equal(p[0, 1], img[0, 0:2, 2:4].reshape(-1))


def test_encoder_frozen_by_default(encoder):
    assert all(not p.requires_grad for _, p in encoder.named_parameters())


def test_gradient_through_encoder_matches_fd(rng):
    cfg = VitConfig(image_size=8, patch_size=4, depth=1, dim=8, heads=2)
    enc = VisionEncoder(cfg, seed=1)
    img = Tensor(rng.random((1, 8, 8, 3)), requires_grad=True)
    head = Tensor(rng.normal(size=(5, 8)))
    f = lambda: T.sum(T.mul(enc(img)[0], head))
    T.backward(f())
    assert max_rel_error(img.grad, numeric_gradient(f, img), floor=1e-7) < 1e-4


class TestDualEncode:
    def test_all_ones_mask_gives_identical_pathways(self, encoder, rng):
        img = rng.random((32, 32, 3))
        e_g, e_s = dual_encode(img, RegionMaskSet([np.ones((32, 32), bool)]), encoder)
        assert np.array_equal(e_g.data, e_s.data)

    def test_empty_masks_zero_region_pathway(self, encoder, rng):
        img = rng.random((32, 32, 3))
        e_g, e_s = dual_encode(img, RegionMaskSet([]), encoder)
        assert np.all(e_s.data == 0)
        w = Tensor(rng.normal(size=(64, 128)))
        expect = e_g.data @ w.data[:, :64].T
        assert np.allclose(fuse(e_g, e_s, w).data, expect, atol=1e-12)

    def test_two_masks_mean_pooled(self, encoder, rng):
        img = rng.random((32, 32, 3))
        m1 = np.zeros((32, 32), bool)
        m1[:16] = True
        m2 = np.zeros((32, 32), bool)
        m2[:, 10:] = True
        _, e_s = dual_encode(img, RegionMaskSet([m1, m2]), encoder)
        a = encode(img * m1[..., None], encoder).data
        b = encode(img * m2[..., None], encoder).data
        assert np.max(np.abs(e_s.data - (a + b) / 2)) <= 1e-12
        _, swapped = dual_encode(img, RegionMaskSet([m2, m1]), encoder)
        assert np.max(np.abs(swapped.data - e_s.data)) <= 1e-12

    def test_max_pooling_switch(self, encoder, rng):
        img = rng.random((32, 32, 3))
        m1 = np.zeros((32, 32), bool)
        m1[5:20, 5:20] = True
        m2 = ~m1
        _, e_s = dual_encode(img, RegionMaskSet([m1, m2]), encoder, pooling="max")
        a = encode(img * m1[..., None], encoder).data
        b = encode(img * m2[..., None], encoder).data
        assert np.allclose(e_s.data, np.maximum(a, b), atol=1e-12)


class TestFuse:
    def test_select_global(self, rng):
        e_g, e_s = Tensor(rng.normal(size=(17, 8))), Tensor(rng.normal(size=(17, 8)))
        w = Tensor(np.hstack([np.eye(8), np.zeros((8, 8))]))
        assert np.array_equal(fuse(e_g, e_s, w).data, e_g.data)

    def test_zero_weight(self, rng):
        e = Tensor(rng.normal(size=(17, 8)))
        assert np.all(fuse(e, e, Tensor(np.zeros((4, 16)))).data == 0)

    def test_half_half_on_identical_inputs(self, rng):
        e = Tensor(rng.normal(size=(17, 8)))
        w = Tensor(np.hstack([0.5 * np.eye(8), 0.5 * np.eye(8)]))
        assert np.allclose(fuse(e, e, w).data, e.data, atol=1e-15)

    def test_random_matches_manual(self, rng):
        e_g, e_s = Tensor(rng.normal(size=(2, 17, 8))), Tensor(rng.normal(size=(2, 17, 8)))
        w = Tensor(rng.normal(size=(6, 16)))
        manual = np.concatenate([e_g.data, e_s.data], axis=-1) @ w.data.T
        assert np.allclose(fuse(e_g, e_s, w).data, manual, atol=1e-12)

    def test_shape_mismatch(self, rng):
        with pytest.raises(T.ShapeError):
            fuse(Tensor(np.zeros((17, 8))), Tensor(np.zeros((16, 8))), Tensor(np.zeros((4, 16))))
