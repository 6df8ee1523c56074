"""Backward warping of images, masks and fields by dense displacement fields."""

from __future__ import annotations

import numpy as np

from . import kernels
from .errors import require
from .image import DisplacementField, Image, SegMask, same_shape


def warp(image, field: DisplacementField, mode: str = "bilinear"):
    """Resample: output(p) = input(p + field(p)), clamping samples to the border.

    Images accept bilinear or nearest interpolation; masks must use nearest
    (so the result stays binary) and come back as SegMask.
    """
    require(mode in ("bilinear", "nearest"), f"unknown mode {mode!r}")
    if isinstance(image, SegMask):
        require(mode == "nearest", "SegMask warping requires nearest mode")
        same_shape(image, field)
        out = kernels.warp_nearest(image.pixels.astype(np.float64), field.vectors)
        return SegMask(out.astype(np.uint8))
    require(isinstance(image, Image), "warp expects an Image or SegMask")
    same_shape(image, field)
    if mode == "nearest":
        out = kernels.warp_nearest(image.pixels, field.vectors)
    else:
        out = kernels.warp_bilinear(image.pixels, field.vectors)
        # bilinear mixing of in-range values can dip out of [0,1] by rounding only
        out = np.clip(out, 0.0, 1.0)
    return Image(out)


def sample_field(field: DisplacementField, at: DisplacementField) -> np.ndarray:
    """Bilinearly sample `field` at positions p + at(p); returns raw (H, W, 2)."""
    same_shape(field, at)
    chans = [kernels.warp_bilinear(np.ascontiguousarray(field.vectors[:, :, k]), at.vectors)
             for k in (0, 1)]
    return np.stack(chans, axis=-1)


def invert_field(field: DisplacementField, iters: int = 20) -> DisplacementField:
    """Fixed-point displacement inversion: find g with g(p) + f(p + g(p)) = 0.

    Converges for the smooth, moderately sized fields produced by the
    B-spline synthesiser; it is not a diffeomorphism guarantee.
    """
    inv = DisplacementField(-field.vectors)
    for _ in range(iters):
        inv = DisplacementField(-sample_field(field, inv))
    return inv
