"""Compiled core vs pure-numpy fallback: same results, selectable at import."""

import numpy as np
import pytest

from sarreg import kernels
from sarreg.kernels import numpy_backend

needs_ext = pytest.mark.skipif(kernels.BACKEND != "cython",
                               reason="compiled extension not built")


@needs_ext
def test_warp_backends_bit_identical():
    rng = np.random.default_rng(0)
    for _ in range(5):
        img = rng.random((33, 47))
        field = rng.uniform(-6, 6, (33, 47, 2))
        a = kernels._impl.warp_bilinear(img, field)
        b = numpy_backend.warp_bilinear(img, field)
        assert np.array_equal(np.asarray(a), b)
        an = kernels._impl.warp_nearest(img, field)
        bn = numpy_backend.warp_nearest(img, field)
        assert np.array_equal(np.asarray(an), bn)


@needs_ext
def test_bspline_backends_bit_identical():
    rng = np.random.default_rng(1)
    for spacing in (3, 8, 16):
        h, w = 41, 29
        gh = (h - 1) // spacing + 4
        gw = (w - 1) // spacing + 4
        coeffs = rng.normal(0, 10, (gh, gw, 2))
        a = kernels._impl.bspline_dense(coeffs, spacing, h, w)
        b = numpy_backend.bspline_dense(coeffs, spacing, h, w)
        assert np.array_equal(np.asarray(a), b)


@needs_ext
def test_nearest_distance_backends_agree():
    rng = np.random.default_rng(2)
    src = rng.uniform(0, 30, (40, 2))
    dst = rng.uniform(0, 30, (25, 2))
    a = np.asarray(kernels._impl.nearest_distances(src, dst))
    b = numpy_backend.nearest_distances(src, dst)
    assert np.allclose(a, b, rtol=0, atol=1e-12)


def test_backend_reports_a_valid_name():
    assert kernels.BACKEND in ("cython", "numpy")
