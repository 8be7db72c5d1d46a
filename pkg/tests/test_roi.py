import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from icmaux import autodiff as ad
from icmaux.codec import CodecModel, bit_allocation_map
from icmaux.metrics import encode_latents
from icmaux.roi import RoiConfig, RoiConfigError, apply_qf, mask_to_latent, roi_transform
from icmaux.task import make_batch


def test_background_mask_gives_empty_roi():
    assert not mask_to_latent(np.zeros((64, 64), int)).any()


def test_single_pixel_gives_one_cell():
    m = np.zeros((64, 64), int)
    m[37, 12] = 2
    lat = mask_to_latent(m)
    assert lat.sum() == 1 and lat[4, 1] == 1


def test_soft_mask_threshold():
    m = np.zeros((16, 16))
    m[0, 0] = 0.49
    m[9, 9] = 0.51
    np.testing.assert_array_equal(mask_to_latent(m), [[0, 0], [0, 1]])


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.0, 0.2))
def test_mask_matches_blockwise_any(seed, density):
    rng = np.random.default_rng(seed)
    m = (rng.uniform(size=(32, 48)) < density).astype(int)
    lat = mask_to_latent(m)
    for i in range(4):
        for j in range(6):
            assert lat[i, j] == m[8 * i:8 * i + 8, 8 * j:8 * j + 8].any()


def test_mask_shape_error():
    with pytest.raises(ad.ShapeError):
        mask_to_latent(np.zeros((60, 64), int))


def test_qf_near_one_is_identity():
    y = np.random.default_rng(0).normal(size=(4, 3, 3)).astype(np.float32)
    np.testing.assert_allclose(apply_qf(y, np.zeros((3, 3)), 1 + 1e-9), y, rtol=1e-7)


def test_all_roi_is_identity():
    y = np.random.default_rng(1).normal(size=(4, 3, 3)).astype(np.float32)
    np.testing.assert_array_equal(apply_qf(y, np.ones((3, 3)), 1.4), y)


def test_background_divided_and_roi_untouched():
    y = np.full((2, 2, 2), 7.0)
    m = np.array([[1, 0], [0, 0]])
    out = apply_qf(y, m, 1.4)
    assert np.all(out[:, 0, 0] == 7.0)
    np.testing.assert_allclose(out[:, 1, 1], 5.0)
    assert y[0, 1, 1] == 7.0  # input not modified


def test_qf_validation():
    with pytest.raises(RoiConfigError):
        apply_qf(np.zeros((1, 2, 2)), np.zeros((2, 2)), 1.0)
    with pytest.raises(RoiConfigError):
        RoiConfig(qf=0.9)
    with pytest.raises(RoiConfigError):
        RoiConfig(mask_source="saliency")
    with pytest.raises(ad.ShapeError):
        apply_qf(np.zeros((1, 2, 2)), np.zeros((3, 3)), 1.4)


def test_transform_none_source():
    assert roi_transform(np.zeros((1, 64, 64), int), RoiConfig(mask_source="none")) is None


def test_background_bits_never_increase_with_centered_prior():
    # with the prior centred on zero, bit cost is monotone in |v|, so shrinking
    # background values cannot add bits there
    codec = CodecModel()
    batch = make_batch(11, range(6))
    masks = [mask_to_latent(s) for s in batch.seg]
    plain = encode_latents(codec, batch.x)
    shrunk = encode_latents(codec, batch.x, transform=roi_transform(batch.seg, RoiConfig(qf=1.4)))
    for m, a, b in zip(masks, plain, shrunk):
        ba, bb = bit_allocation_map(a, codec.entropy), bit_allocation_map(b, codec.entropy)
        assert np.all(bb[m == 0] <= ba[m == 0] + 1e-9)
        np.testing.assert_array_equal(ba[m == 1], bb[m == 1])
