"""Evaluation metrics: NMI, SSIM, Dice, 95% Hausdorff, mean contour distance,
normalized field MSE. All of these are plain (non-differentiable) numpy math;
the differentiable loss surrogates live in sarreg.losses.
"""

from __future__ import annotations

import io
import csv
from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import DegenerateInput, require
from .image import DisplacementField, Image, SegMask, same_shape

SSIM_WINDOW = 8
SSIM_STRIDE = 4
SSIM_K1 = 0.01
SSIM_K2 = 0.03

METRIC_CSV_HEADER = ["case_id", "dice", "hd95", "mad", "nmi", "ssim", "runtime_s"]


@dataclass(frozen=True)
class MetricReport:
    """One evaluated registration case; distances are px times the configured spacing."""

    dice: float
    hd95: float
    mad: float
    nmi: float
    ssim: float
    runtime_s: float

    def __post_init__(self):
        require(0.0 <= self.dice <= 1.0, "dice out of [0,1]")
        require(self.hd95 >= 0.0, "hd95 negative")
        require(self.mad >= 0.0, "mad negative")

    def csv_row(self, case_id: str) -> str:
        buf = io.StringIO()
        csv.writer(buf).writerow(
            [case_id, self.dice, self.hd95, self.mad, self.nmi, self.ssim, self.runtime_s])
        return buf.getvalue().strip("\r\n")


def quantize(px: np.ndarray, bins: int) -> np.ndarray:
    idx = np.floor(px * bins).astype(np.intp)
    return np.minimum(idx, bins - 1)


def nmi(a: Image, b: Image, bins: int = 64) -> float:
    """Normalized mutual information (H(A)+H(B))/H(A,B), rescaled from [1,2] to [0,1]."""
    same_shape(a, b)
    require(bins > 0, "bins must be positive")
    qa = quantize(a.pixels, bins).ravel()
    qb = quantize(b.pixels, bins).ravel()
    joint = np.bincount(qa * bins + qb, minlength=bins * bins).astype(np.float64)
    joint /= joint.sum()
    pa = joint.reshape(bins, bins).sum(axis=1)
    pb = joint.reshape(bins, bins).sum(axis=0)

    def entropy(p):
        nz = p[p > 0]
        return float(-(nz * np.log(nz)).sum())

    h_ab = entropy(joint)
    if h_ab == 0.0:
        # both images constant after quantization
        return 1.0 if qa[0] == qb[0] else 0.0
    value = (entropy(pa) + entropy(pb)) / h_ab
    return float(value - 1.0)


def _window_view(px: np.ndarray) -> np.ndarray:
    wins = np.lib.stride_tricks.sliding_window_view(px, (SSIM_WINDOW, SSIM_WINDOW))
    return wins[::SSIM_STRIDE, ::SSIM_STRIDE]


def ssim(a: Image, b: Image) -> float:
    """Mean local SSIM over 8x8 windows with stride 4 (uniform window, L = 1)."""
    same_shape(a, b)
    require(min(a.shape) >= SSIM_WINDOW, f"both dims must be >= {SSIM_WINDOW}")
    wa = _window_view(a.pixels)
    wb = _window_view(b.pixels)
    mu_a = wa.mean(axis=(-2, -1))
    mu_b = wb.mean(axis=(-2, -1))
    var_a = wa.var(axis=(-2, -1))
    var_b = wb.var(axis=(-2, -1))
    cov = (wa * wb).mean(axis=(-2, -1)) - mu_a * mu_b
    c1 = SSIM_K1 ** 2
    c2 = SSIM_K2 ** 2
    num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return float((num / den).mean())


def dice(m1: SegMask, m2: SegMask) -> float:
    """Overlap 2|A n B| / (|A| + |B|); two empty masks count as perfect (1.0)."""
    same_shape(m1, m2)
    s = m1.area() + m2.area()
    if s == 0:
        return 1.0
    inter = int((m1.pixels & m2.pixels).sum())
    return 2.0 * inter / s


def boundary_points(mask: SegMask) -> np.ndarray:
    """(N, 2) coordinates of mask pixels with a 4-neighbour outside the mask."""
    m = mask.pixels.astype(bool)
    padded = np.pad(m, 1)
    interior = (padded[:-2, 1:-1] & padded[2:, 1:-1]
                & padded[1:-1, :-2] & padded[1:-1, 2:])
    edge = m & ~interior
    return np.argwhere(edge).astype(np.float64)


def _boundary_dists(m1: SegMask, m2: SegMask):
    if m1.is_empty() or m2.is_empty():
        raise DegenerateInput("boundary distances need two non-empty masks")
    b1 = boundary_points(m1)
    b2 = boundary_points(m2)
    return kernels.nearest_distances(b1, b2), kernels.nearest_distances(b2, b1)


def hausdorff95(m1: SegMask, m2: SegMask) -> float:
    """95th percentile (linear interpolation) of the pooled symmetric
    boundary-to-boundary nearest distances."""
    same_shape(m1, m2)
    d12, d21 = _boundary_dists(m1, m2)
    return float(np.percentile(np.concatenate([d12, d21]), 95.0))


def mad(m1: SegMask, m2: SegMask) -> float:
    """Symmetric mean of nearest boundary distances."""
    same_shape(m1, m2)
    d12, d21 = _boundary_dists(m1, m2)
    return 0.5 * (float(d12.mean()) + float(d21.mean()))


def mse_norm(f1: DisplacementField, f2: DisplacementField, d_max: float = 20.0) -> float:
    """Mean squared component difference scaled by (2*d_max)^2, clamped to [0,1]."""
    same_shape(f1, f2)
    require(d_max > 0, "d_max must be positive")
    value = float(((f1.vectors - f2.vectors) ** 2).mean()) / (2.0 * d_max) ** 2
    return float(np.clip(value, 0.0, 1.0))


def evaluate_registration(trans: Image, ref: Image,
                          seg_trans: SegMask, seg_ref: SegMask,
                          spacing_mm: float = 1.0,
                          runtime_s: float = 0.0) -> MetricReport:
    """Bundle the per-case metric table; spacing converts px distances to mm."""
    return MetricReport(
        dice=dice(seg_trans, seg_ref),
        hd95=hausdorff95(seg_trans, seg_ref) * spacing_mm,
        mad=mad(seg_trans, seg_ref) * spacing_mm,
        nmi=nmi(ref, trans),
        ssim=ssim(ref, trans),
        runtime_s=runtime_s,
    )
