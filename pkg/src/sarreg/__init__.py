"""Segmentation-augmented adversarial image registration toolkit."""

__version__ = "0.1.0"

from .image import AffineTransform, DisplacementField, Image, SegMask  # noqa: F401
