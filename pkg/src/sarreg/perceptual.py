"""Fixed multi-scale convolutional feature extractor and the feature-space
distance used by the content loss.

The layer pattern follows the classic 16-layer image-classification stack
(conv widths 64,64 / 128,128 / 256,256 / 512x3 / 512x3 with 2x2 max-pools
between blocks), totalling 3968 feature maps at full scale. Weights are
deterministic from a seed when no pretrained tensors are supplied; a loading
hook accepts real weights in the SART tensor format (one rank-4 file per
conv layer).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .errors import require
from .image import Image
from .tensorfile import read_tensor

FULL_WIDTHS = (64, 64, 128, 128, 256, 256, 512, 512, 512, 512, 512, 512)
POOL_AFTER = (2, 4, 6, 9)  # 1-based conv indices followed by a 2x2 max-pool


@dataclass(frozen=True)
class ExtractorConfig:
    widths: tuple[int, ...] = FULL_WIDTHS
    pool_after: tuple[int, ...] = POOL_AFTER
    seed: int = 0

    def __post_init__(self):
        require(len(self.widths) >= 1, "need at least one conv layer")
        require(all(w >= 1 for w in self.widths), "widths must be positive")
        require(all(1 <= p <= len(self.widths) for p in self.pool_after),
                "pool positions must index conv layers")

    @property
    def total_maps(self) -> int:
        return int(sum(self.widths))

    @property
    def pool_stages(self) -> int:
        return len(self.pool_after)

    @staticmethod
    def full_scale(seed: int = 0) -> "ExtractorConfig":
        return ExtractorConfig(seed=seed)

    @staticmethod
    def desk_scale(factor: int = 8, seed: int = 0) -> "ExtractorConfig":
        require(all(w % factor == 0 for w in FULL_WIDTHS), "factor must divide widths")
        return ExtractorConfig(widths=tuple(w // factor for w in FULL_WIDTHS), seed=seed)

    @staticmethod
    def tiny(seed: int = 0) -> "ExtractorConfig":
        """Two convs, one pool; handy for 8x8 gradient-check inputs."""
        return ExtractorConfig(widths=(4, 8), pool_after=(1,), seed=seed)


@dataclass(frozen=True)
class FeatureStack:
    """Per-layer groups of feature maps, each map min-max normalized to [0, 1]."""

    maps: tuple[torch.Tensor, ...]          # each (C_l, h_l, w_l)
    layer_widths: tuple[int, ...]

    def __post_init__(self):
        require(len(self.maps) == len(self.layer_widths), "layer count mismatch")
        for m, wdt in zip(self.maps, self.layer_widths):
            require(m.shape[0] == wdt, "map group width mismatch")

    @property
    def total_maps(self) -> int:
        return int(sum(self.layer_widths))


def normalize_maps(x: torch.Tensor) -> torch.Tensor:
    """Min-max normalize each map of (B, C, H, W) to [0, 1]; constant maps -> zeros."""
    lo = x.amin(dim=(-2, -1), keepdim=True)
    hi = x.amax(dim=(-2, -1), keepdim=True)
    span = hi - lo
    safe = torch.where(span > 0, span, torch.ones_like(span))
    out = (x - lo) / safe
    return torch.where(span > 0, out, torch.zeros_like(out))


class FeatureExtractor(nn.Module):
    """Non-trainable conv stack; weights seeded He-normal unless loaded."""

    def __init__(self, config: ExtractorConfig, dtype: torch.dtype = torch.float32):
        super().__init__()
        self.config = config
        gen = torch.Generator().manual_seed(config.seed)
        layers = []
        in_ch = 1
        for i, width in enumerate(config.widths, start=1):
            conv = nn.Conv2d(in_ch, width, 3, padding=1)
            std = math.sqrt(2.0 / (in_ch * 9))
            with torch.no_grad():
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen) * std)
                conv.bias.zero_()
            layers.append(conv)
            in_ch = width
        self.convs = nn.ModuleList(layers)
        self.to(dtype)
        for p in self.parameters():
            p.requires_grad_(False)

    def load_pretrained(self, weight_dir) -> None:
        """Load conv weights from SART files conv00.sart, conv01.sart, ..."""
        weight_dir = Path(weight_dir)
        with torch.no_grad():
            for i, conv in enumerate(self.convs):
                arr = read_tensor(weight_dir / f"conv{i:02d}.sart")
                require(tuple(arr.shape) == tuple(conv.weight.shape),
                        f"layer {i} weight shape {arr.shape} != {tuple(conv.weight.shape)}")
                conv.weight.copy_(torch.from_numpy(arr).to(conv.weight.dtype))
                bias_path = weight_dir / f"conv{i:02d}_bias.sart"
                if bias_path.exists():
                    conv.bias.copy_(torch.from_numpy(read_tensor(bias_path)).to(conv.bias.dtype))

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        """x: (B, 1, H, W) with H, W divisible by 2^pool_stages.
        Returns one normalized (B, C_l, h_l, w_l) tensor per conv layer."""
        div = 2 ** self.config.pool_stages
        require(x.shape[-2] % div == 0 and x.shape[-1] % div == 0,
                f"input dims {tuple(x.shape[-2:])} must be divisible by {div}")
        pool_set = set(self.config.pool_after)
        out = []
        for i, conv in enumerate(self.convs, start=1):
            x = torch.relu(conv(x))
            out.append(normalize_maps(x))
            if i in pool_set:
                x = torch.max_pool2d(x, 2)
        return out


def extract_features(img: Image, extractor: FeatureExtractor) -> FeatureStack:
    """Run the fixed stack on one image; maps come back per layer, normalized."""
    dtype = next(extractor.parameters()).dtype
    x = torch.from_numpy(np.array(img.pixels)).to(dtype)[None, None]
    with torch.no_grad():
        maps = extractor(x)
    return FeatureStack(maps=tuple(m[0] for m in maps),
                        layer_widths=tuple(extractor.config.widths))


def feature_distance_t(maps_a: list[torch.Tensor], maps_b: list[torch.Tensor]) -> torch.Tensor:
    """Mean over all maps of the per-map mean squared difference (torch graph)."""
    require(len(maps_a) == len(maps_b), "feature stacks differ in layer count")
    per_map = []
    for ma, mb in zip(maps_a, maps_b):
        require(ma.shape == mb.shape, "feature stacks differ in map shapes")
        # per-map MSE: average spatial dims, keep the (batch x) map axes
        per_map.append(((ma - mb) ** 2).mean(dim=(-2, -1)).reshape(-1))
    return torch.cat(per_map).mean()


def vgg_distance(a: FeatureStack, b: FeatureStack) -> float:
    """Feature-space distance between two extracted stacks."""
    require(a.layer_widths == b.layer_widths, "mismatched extractor configs")
    return float(feature_distance_t(list(a.maps), list(b.maps)))
