"""Cubic B-spline free-form deformation and the random field synthesiser."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import require
from .image import DisplacementField

DEFAULT_SPACING = 16
DEFAULT_MIN_DISP = 1.0
DEFAULT_MAX_DISP = 20.0


def grid_shape_for(shape: tuple[int, int], spacing: int) -> tuple[int, int]:
    """Control-grid size covering `shape`: image extent plus a 3-point cubic border."""
    h, w = shape
    return ((h - 1) // spacing + 4, (w - 1) // spacing + 4)


@dataclass(frozen=True)
class BSplineGrid:
    """Uniform control grid of 2-vector displacements, knot spacing in pixels."""

    spacing: int
    coefficients: np.ndarray

    def __post_init__(self):
        require(int(self.spacing) >= 2, "spacing must be >= 2 px")
        c = np.asarray(self.coefficients, dtype=np.float64)
        require(c.ndim == 3 and c.shape[2] == 2,
                f"coefficients must be (Gh, Gw, 2), got {c.shape}")
        require(bool(np.isfinite(c).all()), "coefficients contain non-finite values")
        c.setflags(write=False)
        object.__setattr__(self, "spacing", int(self.spacing))
        object.__setattr__(self, "coefficients", c)

    def covers(self, shape: tuple[int, int]) -> bool:
        gh, gw = grid_shape_for(shape, self.spacing)
        return self.coefficients.shape[0] >= gh and self.coefficients.shape[1] >= gw


def bspline_to_dense(grid: BSplineGrid, shape: tuple[int, int]) -> DisplacementField:
    """Tensor-product cubic expansion of the control grid to a dense field."""
    require(grid.covers(shape),
            f"grid {grid.coefficients.shape[:2]} does not cover shape {shape} "
            f"at spacing {grid.spacing} (need {grid_shape_for(shape, grid.spacing)})")
    out = kernels.bspline_dense(grid.coefficients, grid.spacing, shape[0], shape[1])
    return DisplacementField(out)


def random_bspline_grid(shape: tuple[int, int],
                        spacing: int = DEFAULT_SPACING,
                        min_disp: float = DEFAULT_MIN_DISP,
                        max_disp: float = DEFAULT_MAX_DISP,
                        seed: int = 0) -> BSplineGrid:
    """Control grid whose coefficients have per-component magnitude drawn
    uniformly from [min_disp, max_disp] with a random sign."""
    require(max_disp >= min_disp >= 0.0, "need max_disp >= min_disp >= 0")
    rng = np.random.default_rng(seed)
    gh, gw = grid_shape_for(shape, spacing)
    mag = rng.uniform(min_disp, max_disp, size=(gh, gw, 2))
    sign = np.where(rng.random(size=(gh, gw, 2)) < 0.5, -1.0, 1.0)
    return BSplineGrid(spacing, mag * sign)


def random_elastic_deformation(shape: tuple[int, int],
                               spacing: int = DEFAULT_SPACING,
                               min_disp: float = DEFAULT_MIN_DISP,
                               max_disp: float = DEFAULT_MAX_DISP,
                               seed: int = 0) -> DisplacementField:
    """Dense random smooth field; deterministic for a fixed seed."""
    grid = random_bspline_grid(shape, spacing, min_disp, max_disp, seed)
    return bspline_to_dense(grid, shape)
