import numpy as np
import pytest

from sarreg.bspline import random_elastic_deformation
from sarreg.errors import ContractViolation
from sarreg.image import DisplacementField, Image, SegMask
from sarreg.warp import invert_field, warp

from conftest import smooth_random_image
from oracles import bilinear_warp_oracle


def test_zero_field_is_identity_both_modes():
    img = smooth_random_image((16, 20), seed=3)
    zero = DisplacementField.zero(img.shape)
    for mode in ("bilinear", "nearest"):
        out = warp(img, zero, mode)
        assert np.array_equal(out.pixels, img.pixels)


def test_integer_column_shift_with_border_clamp():
    ramp = Image(np.tile(np.linspace(0, 1, 16), (16, 1)))
    field = DisplacementField(np.broadcast_to(np.array([0.0, 3.0]), (16, 16, 2)).copy())
    out = warp(ramp, field, "bilinear")
    expected = np.empty_like(ramp.pixels)
    for c in range(16):
        expected[:, c] = ramp.pixels[:, min(c + 3, 15)]
    assert np.allclose(out.pixels, expected, atol=1e-12)


def test_bilinear_matches_scalar_oracle():
    rng = np.random.default_rng(7)
    for trial in range(5):
        img = Image(rng.random((32, 32)))
        field = DisplacementField(rng.uniform(-2, 2, (32, 32, 2)))
        out = warp(img, field, "bilinear")
        ref = bilinear_warp_oracle(img.pixels, field.vectors)
        assert np.abs(out.pixels - np.clip(ref, 0, 1)).max() < 1e-6


def test_mask_warp_stays_binary_and_requires_nearest():
    rng = np.random.default_rng(11)
    mask = SegMask((rng.random((24, 24)) > 0.6).astype(np.uint8))
    field = DisplacementField(rng.uniform(-3, 3, (24, 24, 2)))
    out = warp(mask, field, "nearest")
    assert isinstance(out, SegMask)
    assert set(np.unique(out.pixels)) <= {0, 1}
    with pytest.raises(ContractViolation):
        warp(mask, field, "bilinear")


def test_shape_mismatch_rejected():
    img = smooth_random_image((16, 16), seed=0)
    field = DisplacementField.zero((16, 18))
    with pytest.raises(ContractViolation):
        warp(img, field)


def test_small_field_approximately_invertible():
    img = smooth_random_image((48, 48), seed=5)
    field = random_elastic_deformation((48, 48), spacing=12, min_disp=0.0,
                                       max_disp=1.0, seed=2)
    assert field.max_abs() <= 1.0 + 1e-9
    back = warp(warp(img, field), DisplacementField(-field.vectors))
    inner = (slice(4, -4), slice(4, -4))
    err = np.abs(back.pixels[inner] - img.pixels[inner]).mean()
    assert err < 0.02


def test_fixed_point_inversion_tightens_round_trip():
    img = smooth_random_image((48, 48), seed=9)
    field = random_elastic_deformation((48, 48), spacing=12, min_disp=0.0,
                                       max_disp=4.0, seed=3)
    inv = invert_field(field)
    back = warp(warp(img, field), inv)
    naive = warp(warp(img, field), DisplacementField(-field.vectors))
    inner = (slice(5, -5), slice(5, -5))
    err_inv = np.abs(back.pixels[inner] - img.pixels[inner]).mean()
    err_neg = np.abs(naive.pixels[inner] - img.pixels[inner]).mean()
    assert err_inv < err_neg
    assert err_inv < 0.01
