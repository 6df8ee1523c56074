"""Hot-kernel backend selection.

The compiled extension is preferred when importable; the pure-numpy fallback
is always available. Set SARREG_NO_EXT=1 to force the fallback. `BACKEND`
reports which one is active.
"""

from __future__ import annotations

import importlib
import os

import numpy as np

from . import numpy_backend

_impl = numpy_backend
BACKEND = "numpy"
if os.environ.get("SARREG_NO_EXT", "") != "1":
    try:
        _impl = importlib.import_module("sarreg.kernels._core")
        BACKEND = "cython"
    except ImportError:
        pass


def _f64(arr, ndim):
    out = np.ascontiguousarray(arr, dtype=np.float64)
    if out.ndim != ndim:
        raise ValueError(f"expected {ndim}D array, got {out.ndim}D")
    return out


def warp_bilinear(img, field):
    return np.asarray(_impl.warp_bilinear(_f64(img, 2), _f64(field, 3)))


def warp_nearest(img, field):
    return np.asarray(_impl.warp_nearest(_f64(img, 2), _f64(field, 3)))


def bspline_dense(coeffs, spacing, h, w):
    return np.asarray(_impl.bspline_dense(_f64(coeffs, 3), int(spacing), int(h), int(w)))


def nearest_distances(src, dst):
    return np.asarray(_impl.nearest_distances(_f64(src, 2), _f64(dst, 2)))
