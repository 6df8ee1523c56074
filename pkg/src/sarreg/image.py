"""Core raster types: intensity images, binary masks, dense displacement fields.

Conventions used everywhere in this package:
  * images are 2D float64 arrays with intensities in [0, 1]
  * masks are 2D uint8 arrays with values in {0, 1} and the shape of their image
  * displacement fields are (H, W, 2) float64 arrays of (drow, dcol) pixel offsets
    under the backward-warping convention output(p) = input(p + field(p))
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from PIL import Image as PILImage

from .errors import ContractViolation, require

MIN_SIDE = 8


@dataclass(frozen=True)
class Image:
    """Single-channel 2D intensity grid with values in [0, 1]."""

    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float64)
        require(px.ndim == 2, f"image must be 2D, got shape {px.shape}")
        require(px.shape[0] >= MIN_SIDE and px.shape[1] >= MIN_SIDE,
                f"image sides must be >= {MIN_SIDE}, got {px.shape}")
        require(bool(np.isfinite(px).all()), "image contains non-finite values")
        require(bool((px >= 0.0).all() and (px <= 1.0).all()),
                "image intensities must lie in [0, 1]")
        px.setflags(write=False)
        object.__setattr__(self, "pixels", px)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.pixels.shape


@dataclass(frozen=True)
class SegMask:
    """Binary mask aligned with a parent image."""

    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels)
        require(px.ndim == 2, f"mask must be 2D, got shape {px.shape}")
        vals = np.unique(px)
        require(bool(np.isin(vals, (0, 1)).all()), "mask values must be in {0, 1}")
        px = px.astype(np.uint8)
        px.setflags(write=False)
        object.__setattr__(self, "pixels", px)

    @property
    def shape(self) -> tuple[int, int]:
        return self.pixels.shape

    def is_empty(self) -> bool:
        return not bool(self.pixels.any())

    def area(self) -> int:
        return int(self.pixels.sum())


@dataclass(frozen=True)
class DisplacementField:
    """Per-pixel (drow, dcol) displacement in pixel units."""

    vectors: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.vectors, dtype=np.float64)
        require(v.ndim == 3 and v.shape[2] == 2,
                f"field must have shape (H, W, 2), got {v.shape}")
        require(bool(np.isfinite(v).all()), "field contains non-finite values")
        v.setflags(write=False)
        object.__setattr__(self, "vectors", v)

    @property
    def shape(self) -> tuple[int, int]:
        return self.vectors.shape[:2]

    def max_abs(self) -> float:
        return float(np.abs(self.vectors).max())

    @staticmethod
    def zero(shape: tuple[int, int]) -> "DisplacementField":
        return DisplacementField(np.zeros((shape[0], shape[1], 2)))


@dataclass(frozen=True)
class AffineTransform:
    """Forward 2D affine map p_ref = matrix @ p_flt + offset (row/col coordinates)."""

    matrix: np.ndarray
    offset: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64).reshape(2, 2)
        t = np.asarray(self.offset, dtype=np.float64).reshape(2)
        require(abs(float(np.linalg.det(m))) > 1e-8, "affine matrix is singular")
        m.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "matrix", m)
        object.__setattr__(self, "offset", t)

    @staticmethod
    def identity() -> "AffineTransform":
        return AffineTransform(np.eye(2), np.zeros(2))

    def inverse(self) -> "AffineTransform":
        inv = np.linalg.inv(self.matrix)
        return AffineTransform(inv, -inv @ self.offset)

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Map an (N, 2) array of (row, col) points."""
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.matrix.T + self.offset


def same_shape(a, b) -> None:
    require(a.shape == b.shape, f"shape mismatch: {a.shape} vs {b.shape}")


def load_image(path) -> Image:
    """Load a lossless 8- or 16-bit single-channel raster file."""
    with PILImage.open(path) as im:
        if im.mode == "I;16":
            arr = np.asarray(im, dtype=np.uint16).astype(np.float64) / 65535.0
        elif im.mode in ("L", "P"):
            arr = np.asarray(im.convert("L"), dtype=np.uint8).astype(np.float64) / 255.0
        elif im.mode == "I":
            arr = np.asarray(im, dtype=np.int32).astype(np.float64) / 65535.0
        else:
            raise ContractViolation(f"unsupported raster mode {im.mode!r} in {path}")
    return Image(np.clip(arr, 0.0, 1.0))


def save_image(img: Image, path, bits: int = 16) -> None:
    """Save as a lossless single-channel PNG (8 or 16 bits)."""
    require(bits in (8, 16), "bits must be 8 or 16")
    if bits == 16:
        arr = np.round(img.pixels * 65535.0).astype(np.uint16)
        PILImage.fromarray(arr).save(path)
    else:
        arr = np.round(img.pixels * 255.0).astype(np.uint8)
        PILImage.fromarray(arr, mode="L").save(path)
