import numpy as np
import pytest

from sarreg.affine import affine_align, _moments
from sarreg.errors import DegenerateInput
from sarreg.image import Image


def _ellipse_image(shape, center, axes, angle_deg=0.0, value=0.9):
    """Soft-edged ellipse; anisotropic so orientation is well defined."""
    rr, cc = np.meshgrid(np.arange(shape[0], dtype=float),
                         np.arange(shape[1], dtype=float), indexing="ij")
    th = np.deg2rad(angle_deg)
    dr = rr - center[0]
    dc = cc - center[1]
    u = np.cos(th) * dr + np.sin(th) * dc
    v = -np.sin(th) * dr + np.cos(th) * dc
    d = (u / axes[0]) ** 2 + (v / axes[1]) ** 2
    px = value / (1.0 + np.exp((d - 1.0) * 8.0))
    return Image(px)


def test_identity_input_gives_identity_transform():
    img = _ellipse_image((64, 64), (32, 30), (18, 9))
    t, aligned = affine_align(img, img)
    assert np.abs(t.matrix - np.eye(2)).max() < 1e-6
    assert np.abs(t.offset).max() < 1e-6
    assert np.abs(aligned.pixels - img.pixels).max() < 1e-6


def test_translation_recovered():
    ref = _ellipse_image((64, 64), (32, 32), (16, 8))
    flt = _ellipse_image((64, 64), (37, 29), (16, 8))  # ref shifted by (5, -3)
    t, aligned = affine_align(flt, ref)
    assert np.abs(t.offset - np.array([-5.0, 3.0])).max() < 0.5
    c_ref, _ = _moments(ref.pixels)
    c_out, _ = _moments(aligned.pixels)
    assert np.abs(c_out - c_ref).max() < 0.5


def test_rotation_matches_second_moments():
    ref = _ellipse_image((96, 96), (48, 48), (28, 12))
    flt = _ellipse_image((96, 96), (48, 48), (28, 12), angle_deg=10.0)
    _, aligned = affine_align(flt, ref)
    _, m_ref = _moments(ref.pixels)
    _, m_out = _moments(aligned.pixels)
    rel = np.abs(m_out - m_ref) / np.abs(m_ref).max()
    assert rel.max() < 0.05


def test_zero_intensity_is_degenerate():
    blank = Image(np.zeros((16, 16)))
    other = _ellipse_image((16, 16), (8, 8), (4, 3))
    with pytest.raises(DegenerateInput):
        affine_align(blank, other)
    with pytest.raises(DegenerateInput):
        affine_align(other, blank)
