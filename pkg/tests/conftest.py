import numpy as np
import pytest

from sarreg.image import Image, SegMask


def smooth_random_image(shape, seed, kernel=5):
    """Random image smoothed by repeated box filtering, rescaled to [0, 1]."""
    rng = np.random.default_rng(seed)
    px = rng.random(shape)
    k = np.ones(kernel) / kernel
    for _ in range(3):
        px = np.apply_along_axis(lambda m: np.convolve(m, k, mode="same"), 0, px)
        px = np.apply_along_axis(lambda m: np.convolve(m, k, mode="same"), 1, px)
    px = px - px.min()
    ptp = px.max()
    return Image(px / ptp if ptp > 0 else px)


def disk_mask(shape, center, radius):
    rr, cc = np.meshgrid(np.arange(shape[0]), np.arange(shape[1]), indexing="ij")
    return SegMask(((rr - center[0]) ** 2 + (cc - center[1]) ** 2 <= radius ** 2).astype(np.uint8))


def rect_mask(shape, r0, c0, r1, c1):
    m = np.zeros(shape, dtype=np.uint8)
    m[r0:r1, c0:c1] = 1
    return SegMask(m)


def random_blob_mask(shape, seed):
    """Random non-empty blob: a few overlapping disks."""
    rng = np.random.default_rng(seed)
    m = np.zeros(shape, dtype=np.uint8)
    h, w = shape
    for _ in range(rng.integers(1, 4)):
        r = rng.integers(h // 4, 3 * h // 4)
        c = rng.integers(w // 4, 3 * w // 4)
        rad = rng.integers(2, max(3, h // 5))
        rr, cc = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
        m |= ((rr - r) ** 2 + (cc - c) ** 2 <= rad ** 2).astype(np.uint8)
    return SegMask(m)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
