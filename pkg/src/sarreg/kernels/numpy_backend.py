"""Pure-numpy implementations of the hot kernels.

These are the fallback used when the compiled extension is unavailable; the
compiled core must produce the same values (same formulas, same accumulation
order), which the test suite checks whenever both backends are importable.
"""

from __future__ import annotations

import numpy as np


def warp_bilinear(img: np.ndarray, field: np.ndarray) -> np.ndarray:
    """Backward bilinear warp: out(p) = img(p + field(p)), clamped to the border."""
    h, w = img.shape
    rr, cc = np.meshgrid(np.arange(h, dtype=np.float64),
                         np.arange(w, dtype=np.float64), indexing="ij")
    ys = np.clip(rr + field[:, :, 0], 0.0, h - 1.0)
    xs = np.clip(cc + field[:, :, 1], 0.0, w - 1.0)
    y0 = np.floor(ys)
    x0 = np.floor(xs)
    u = ys - y0
    v = xs - x0
    y0i = y0.astype(np.intp)
    x0i = x0.astype(np.intp)
    y1i = np.minimum(y0i + 1, h - 1)
    x1i = np.minimum(x0i + 1, w - 1)
    return ((1.0 - u) * (1.0 - v) * img[y0i, x0i]
            + (1.0 - u) * v * img[y0i, x1i]
            + u * (1.0 - v) * img[y1i, x0i]
            + u * v * img[y1i, x1i])


def warp_nearest(img: np.ndarray, field: np.ndarray) -> np.ndarray:
    """Backward nearest-neighbour warp with border clamping (ties round up)."""
    h, w = img.shape
    rr, cc = np.meshgrid(np.arange(h, dtype=np.float64),
                         np.arange(w, dtype=np.float64), indexing="ij")
    ys = np.clip(rr + field[:, :, 0], 0.0, h - 1.0)
    xs = np.clip(cc + field[:, :, 1], 0.0, w - 1.0)
    yi = np.minimum(np.floor(ys + 0.5), h - 1.0).astype(np.intp)
    xi = np.minimum(np.floor(xs + 0.5), w - 1.0).astype(np.intp)
    return img[yi, xi]


def _cubic_weights(t: np.ndarray) -> np.ndarray:
    """Cubic B-spline basis values B0..B3 at fractional offsets t in [0, 1)."""
    t2 = t * t
    t3 = t2 * t
    w = np.empty(t.shape + (4,), dtype=np.float64)
    w[..., 0] = (1.0 - t) * (1.0 - t) * (1.0 - t) / 6.0
    w[..., 1] = (3.0 * t3 - 6.0 * t2 + 4.0) / 6.0
    w[..., 2] = (-3.0 * t3 + 3.0 * t2 + 3.0 * t + 1.0) / 6.0
    w[..., 3] = t3 / 6.0
    return w


def bspline_dense(coeffs: np.ndarray, spacing: int, h: int, w: int) -> np.ndarray:
    """Expand control-point displacements to a dense (h, w, 2) field.

    Control point with array index k sits at pixel (k - 1) * spacing, so a
    grid of floor((n - 1) / spacing) + 4 points covers n pixels.
    """
    ty = np.arange(h, dtype=np.float64) / spacing
    tx = np.arange(w, dtype=np.float64) / spacing
    iy = np.floor(ty).astype(np.intp)
    ix = np.floor(tx).astype(np.intp)
    wy = _cubic_weights(ty - iy)
    wx = _cubic_weights(tx - ix)
    out = np.zeros((h, w, 2), dtype=np.float64)
    for l in range(4):
        cy = coeffs[iy + l]
        for m in range(4):
            wv = wy[:, l][:, None] * wx[:, m][None, :]
            out += wv[:, :, None] * cy[:, ix + m]
    return out


def nearest_distances(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Per-point Euclidean distance from each src point to the closest dst point."""
    out = np.empty(len(src), dtype=np.float64)
    # chunked to bound the (chunk, Ndst) temporary
    step = max(1, int(4e6) // max(1, len(dst)))
    for start in range(0, len(src), step):
        block = src[start:start + step]
        d2 = ((block[:, None, :] - dst[None, :, :]) ** 2).sum(axis=2)
        out[start:start + step] = np.sqrt(d2.min(axis=1))
    return out
