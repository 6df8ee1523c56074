"""Generator/discriminator pair, fused-map segmentation and Otsu thresholding.

The generator predicts a bounded dense displacement field from a (floating,
reference) pair; the registered image is always produced by differentiably
warping the floating image with that field, so the image and field outputs
cannot contradict. A second generator of the same architecture maps the
registered domain back (cycle direction). The discriminator folds images,
masks and fields into one probability via channel concatenation.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .errors import require
from .image import DisplacementField, Image, SegMask, same_shape
from .perceptual import normalize_maps
from .warp import warp

LEAKY_SLOPE = 0.2
PROB_EPS = 1e-7


# ---------------------------------------------------------------------------
# differentiable warping (must match sarreg.warp semantics)

def warp_bilinear_t(img: torch.Tensor, field: torch.Tensor) -> torch.Tensor:
    """Backward bilinear warp. img (B, C, H, W), field (B, H, W, 2) in pixels."""
    b, c, h, w = img.shape
    rr = torch.arange(h, dtype=img.dtype, device=img.device).view(1, h, 1)
    cc = torch.arange(w, dtype=img.dtype, device=img.device).view(1, 1, w)
    ys = (rr + field[..., 0]).clamp(0.0, h - 1.0)
    xs = (cc + field[..., 1]).clamp(0.0, w - 1.0)
    y0 = ys.floor()
    x0 = xs.floor()
    u = (ys - y0).unsqueeze(1)
    v = (xs - x0).unsqueeze(1)
    y0l = y0.long()
    x0l = x0.long()
    y1l = (y0l + 1).clamp(max=h - 1)
    x1l = (x0l + 1).clamp(max=w - 1)
    flat = img.reshape(b, c, h * w)

    def gather(yi, xi):
        idx = (yi * w + xi).reshape(b, 1, h * w).expand(b, c, h * w)
        return flat.gather(2, idx).reshape(b, c, h, w)

    return ((1 - u) * (1 - v) * gather(y0l, x0l)
            + (1 - u) * v * gather(y0l, x1l)
            + u * (1 - v) * gather(y1l, x0l)
            + u * v * gather(y1l, x1l))


def warp_nearest_t(img: torch.Tensor, field: torch.Tensor) -> torch.Tensor:
    """Backward nearest warp (ties round up); not differentiable in the field."""
    b, c, h, w = img.shape
    rr = torch.arange(h, dtype=field.dtype, device=img.device).view(1, h, 1)
    cc = torch.arange(w, dtype=field.dtype, device=img.device).view(1, 1, w)
    ys = (rr + field[..., 0]).clamp(0.0, h - 1.0)
    xs = (cc + field[..., 1]).clamp(0.0, w - 1.0)
    yi = (ys + 0.5).floor().long().clamp(max=h - 1)
    xi = (xs + 0.5).floor().long().clamp(max=w - 1)
    idx = (yi * w + xi).reshape(b, 1, h * w).expand(b, c, h * w)
    return img.reshape(b, c, h * w).gather(2, idx).reshape(b, c, h, w)


# ---------------------------------------------------------------------------
# configs

@dataclass(frozen=True)
class GeneratorConfig:
    n_res_blocks: int = 6
    width: int = 64
    kernel: int = 3
    field_scale: float = 20.0
    field_head_stride: int = 1  # >1: predict the field on a coarser grid and
    #                             bilinearly upsample (smooth by construction)

    def __post_init__(self):
        require(self.width >= 8, "width must be >= 8")
        require(self.n_res_blocks >= 1, "need at least one residual block")
        require(self.kernel % 2 == 1, "kernel must be odd")
        require(self.field_scale > 0, "field_scale must be positive")
        require(self.field_head_stride in (1, 2, 4), "stride must be 1, 2 or 4")

    @property
    def n_conv_layers(self) -> int:
        return 1 + 2 * self.n_res_blocks


@dataclass(frozen=True)
class DiscriminatorConfig:
    n_conv: int = 8
    base_width: int = 64
    max_width: int = 512
    dense_units: int = 512

    def __post_init__(self):
        require(self.n_conv >= 2, "need at least two conv layers")
        require(self.base_width >= 4 and self.max_width >= self.base_width,
                "widths must satisfy 4 <= base <= max")
        require(self.dense_units >= 1, "dense_units must be positive")

    def widths(self) -> list[int]:
        return [min(self.base_width * 2 ** (i // 2), self.max_width)
                for i in range(self.n_conv)]


# ---------------------------------------------------------------------------
# modules

class ResidualBlock(nn.Module):
    def __init__(self, width: int, kernel: int):
        super().__init__()
        pad = kernel // 2
        self.conv1 = nn.Conv2d(width, width, kernel, padding=pad)
        self.bn1 = nn.BatchNorm2d(width)
        self.conv2 = nn.Conv2d(width, width, kernel, padding=pad)
        self.bn2 = nn.BatchNorm2d(width)

    def forward(self, x):
        mid = torch.relu(self.bn1(self.conv1(x)))
        out = torch.relu(x + self.bn2(self.conv2(mid)))
        return out, mid


class Generator(nn.Module):
    """Residual trunk over the concatenated pair; zero-initialized field head,
    so a fresh generator is exactly the identity registration."""

    def __init__(self, config: GeneratorConfig, dtype: torch.dtype = torch.float32):
        super().__init__()
        self.config = config
        pad = config.kernel // 2
        self.stem = nn.Conv2d(2, config.width, config.kernel, padding=pad)
        self.stem_bn = nn.BatchNorm2d(config.width)
        self.blocks = nn.ModuleList(
            ResidualBlock(config.width, config.kernel) for _ in range(config.n_res_blocks))
        self.field_head = nn.Conv2d(config.width, 2, config.kernel, padding=pad)
        nn.init.zeros_(self.field_head.weight)
        nn.init.zeros_(self.field_head.bias)
        n_fuse = config.n_conv_layers
        self.fusion_weights = nn.Parameter(torch.full((n_fuse,), 1.0 / n_fuse))
        self.to(dtype)

    def trunk(self, pair: torch.Tensor):
        require(pair.shape[-2] % 4 == 0 and pair.shape[-1] % 4 == 0,
                "input dims must be divisible by 4")
        x = torch.relu(self.stem_bn(self.stem(pair)))
        conv_maps = [x]
        for block in self.blocks:
            x, mid = block(x)
            conv_maps.append(mid)
            conv_maps.append(x)
        return x, conv_maps

    def forward(self, flt: torch.Tensor, ref: torch.Tensor):
        """Returns (trans, def_recv) with def_recv (B, H, W, 2), |def_recv| <= field_scale."""
        require(flt.shape == ref.shape, "floating/reference shape mismatch")
        feat, _ = self.trunk(torch.cat([flt, ref], dim=1))
        stride = self.config.field_head_stride
        if stride > 1:
            feat = torch.nn.functional.avg_pool2d(feat, stride)
        bounded = self.config.field_scale * torch.tanh(self.field_head(feat))
        if stride > 1:
            # bilinear upsampling preserves the tanh bound (convex combinations)
            bounded = torch.nn.functional.interpolate(
                bounded, size=flt.shape[-2:], mode="bilinear", align_corners=False)
        def_recv = bounded.permute(0, 2, 3, 1)
        trans = warp_bilinear_t(flt, def_recv)
        return trans, def_recv

    def forward_single(self, img: torch.Tensor):
        """Single-image pass (image duplicated into both input channels)."""
        return self.forward(img, img)

    def soft_fused_map(self, img: torch.Tensor) -> torch.Tensor:
        """Weighted fusion of channel-averaged trunk maps, min-max normalized.
        Differentiable; (B, 1, H, W) in [0, 1]."""
        _, conv_maps = self.trunk(torch.cat([img, img], dim=1))
        fused = None
        for wgt, m in zip(self.fusion_weights, conv_maps):
            piece = wgt * normalize_maps(m.mean(dim=1, keepdim=True))
            fused = piece if fused is None else fused + piece
        if fused.shape[-2:] != img.shape[-2:]:
            fused = nn.functional.interpolate(fused, size=img.shape[-2:],
                                              mode="bilinear", align_corners=False)
        return normalize_maps(fused)


class Discriminator(nn.Module):
    """Eight conv layers doubling 64 -> 512, leaky ReLU, strided halving when
    the width doubles, then two dense layers and a sigmoid probability."""

    IN_CHANNELS = 8  # trans, ref, seg_trans, seg_ref, def_recv (2), def_app (2)

    def __init__(self, config: DiscriminatorConfig, dtype: torch.dtype = torch.float32):
        super().__init__()
        self.config = config
        widths = config.widths()
        convs = []
        in_ch = self.IN_CHANNELS
        for w_out in widths:
            stride = 2 if w_out > in_ch and in_ch != self.IN_CHANNELS else 1
            convs.append(nn.Conv2d(in_ch, w_out, 3, stride=stride, padding=1))
            in_ch = w_out
        self.convs = nn.ModuleList(convs)
        self.dense1 = nn.Linear(widths[-1], config.dense_units)
        self.dense2 = nn.Linear(config.dense_units, 1)
        self.to(dtype)

    def forward_logit(self, bundle: torch.Tensor) -> torch.Tensor:
        x = bundle
        for conv in self.convs:
            x = torch.nn.functional.leaky_relu(conv(x), LEAKY_SLOPE)
        x = x.mean(dim=(-2, -1))
        x = torch.nn.functional.leaky_relu(self.dense1(x), LEAKY_SLOPE)
        return self.dense2(x).squeeze(-1)

    def forward(self, bundle: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.forward_logit(bundle)).clamp(PROB_EPS, 1.0 - PROB_EPS)


def make_bundle(trans, ref, seg_trans, seg_ref, def_recv, def_app=None):
    """Channel concatenation consumed by the discriminator; absent applied
    field becomes zero channels."""
    fields = def_recv.permute(0, 3, 1, 2)
    if def_app is None:
        app = torch.zeros_like(fields)
    else:
        app = def_app.permute(0, 3, 1, 2)
    return torch.cat([trans, ref, seg_trans, seg_ref, fields, app], dim=1)


# ---------------------------------------------------------------------------
# parameter container

_COMPONENTS = ("g", "f", "d_ref", "d_flt")


class ModelParams:
    """Named parameter bundle for G, F and both discriminators.

    Freeze flags are per parameter tensor; `last_conv_layer` names the module
    prefix that stays trainable in transfer mode (the generator field head).
    """

    def __init__(self, g_config: GeneratorConfig = GeneratorConfig(),
                 d_config: DiscriminatorConfig = DiscriminatorConfig(),
                 seed: int = 0, dtype: torch.dtype = torch.float32):
        torch.manual_seed(seed)
        self.g_config = g_config
        self.d_config = d_config
        self.seed = seed
        self.g = Generator(g_config, dtype)
        self.f = Generator(g_config, dtype)
        self.d_ref = Discriminator(d_config, dtype)
        self.d_flt = Discriminator(d_config, dtype)
        self.last_conv_layer = "g.field_head"
        self.freeze = {name: False for name, _ in self.named_parameters()}

    def components(self) -> dict[str, nn.Module]:
        return {"g": self.g, "f": self.f, "d_ref": self.d_ref, "d_flt": self.d_flt}

    def named_parameters(self):
        for comp in _COMPONENTS:
            for name, p in self.components()[comp].named_parameters():
                yield f"{comp}.{name}", p

    def named_tensors(self):
        """Parameters plus buffers (batch-norm statistics), for checkpointing."""
        for comp in _COMPONENTS:
            for name, t in self.components()[comp].state_dict().items():
                yield f"{comp}.{name}", t

    def clone(self) -> "ModelParams":
        return copy.deepcopy(self)

    def freeze_all_but(self, layer_prefix: str) -> None:
        for name, p in self.named_parameters():
            frozen = not name.startswith(layer_prefix + ".")
            self.freeze[name] = frozen
            p.requires_grad_(not frozen)

    def trainable(self) -> list[torch.Tensor]:
        return [p for name, p in self.named_parameters() if not self.freeze[name]]

    def eval_mode(self) -> None:
        for m in self.components().values():
            m.eval()

    def train_mode(self) -> None:
        for m in self.components().values():
            m.train()


# ---------------------------------------------------------------------------
# segmentation by fused conv maps + Otsu

OTSU_BINS = 256


def _otsu_split(values: np.ndarray):
    """Histogram split index k* maximizing between-class variance, or None
    when fewer than two bins are occupied. Ties go to the lowest bin."""
    q = np.minimum((values * OTSU_BINS).astype(np.intp), OTSU_BINS - 1)
    hist = np.bincount(q.ravel(), minlength=OTSU_BINS).astype(np.float64)
    if np.count_nonzero(hist) < 2:
        return None
    idx = np.arange(OTSU_BINS)
    w0 = np.cumsum(hist)
    m0 = np.cumsum(hist * idx)
    total = w0[-1]
    total_m = m0[-1]
    w1 = total - w0
    valid = (w0 > 0) & (w1 > 0)
    mu0 = np.where(valid, m0 / np.maximum(w0, 1e-300), 0.0)
    mu1 = np.where(valid, (total_m - m0) / np.maximum(w1, 1e-300), 0.0)
    var = np.where(valid, w0 * w1 * (mu0 - mu1) ** 2, -1.0)
    return int(np.argmax(var))


def otsu_threshold(values: np.ndarray) -> SegMask:
    """Binarize a [0, 1] map at the between-class-variance-maximizing threshold.
    A constant map yields an empty mask."""
    values = np.asarray(values, dtype=np.float64)
    require(bool(np.isfinite(values).all()), "otsu input must be finite")
    require(values.ndim == 2, "otsu input must be 2D")
    k = _otsu_split(values)
    if k is None:
        return SegMask(np.zeros(values.shape, dtype=np.uint8))
    t_star = (k + 1) / OTSU_BINS
    return SegMask((values > t_star).astype(np.uint8))


def fused_segmentation(conv_maps, fusion_weights, out_shape=None) -> SegMask:
    """Weighted fusion of normalized channel-mean maps, then Otsu.

    conv_maps: sequence of (C, h, w) or (h, w) arrays/tensors; weights one
    scalar per map group. An all-constant fused map gives an empty mask.
    """
    require(len(conv_maps) >= 1, "need at least one map")
    require(len(conv_maps) == len(fusion_weights), "one weight per map group")
    tensors = []
    for m in conv_maps:
        t = torch.as_tensor(np.asarray(m, dtype=np.float64))
        if t.dim() == 2:
            t = t[None]
        require(t.dim() == 3, "maps must be (C, h, w) or (h, w)")
        tensors.append(t[None])  # (1, C, h, w)
    if out_shape is None:
        out_shape = max((tuple(t.shape[-2:]) for t in tensors),
                        key=lambda s: s[0] * s[1])
    fused = torch.zeros((1, 1) + tuple(out_shape), dtype=torch.float64)
    for wgt, t in zip(fusion_weights, tensors):
        piece = normalize_maps(t.mean(dim=1, keepdim=True))
        if tuple(piece.shape[-2:]) != tuple(out_shape):
            piece = nn.functional.interpolate(piece, size=tuple(out_shape),
                                              mode="bilinear", align_corners=False)
        fused = fused + float(wgt) * piece
    fused = normalize_maps(fused)[0, 0].numpy()
    return otsu_threshold(fused)


# ---------------------------------------------------------------------------
# numpy-facing forward ops

@dataclass(frozen=True)
class GeneratorOutput:
    trans: Image
    def_recv: DisplacementField
    seg_flt: SegMask
    seg_ref: SegMask
    seg_trans: SegMask


def to_tensor(img, dtype=torch.float32) -> torch.Tensor:
    arr = img.pixels if isinstance(img, (Image, SegMask)) else np.asarray(img)
    return torch.from_numpy(np.array(arr, dtype=np.float64)).to(dtype)[None, None]


def _to_image(t: torch.Tensor) -> Image:
    return Image(np.clip(t[0, 0].detach().cpu().numpy().astype(np.float64), 0.0, 1.0))


def generator_forward(params: ModelParams, flt: Image, ref: Image) -> GeneratorOutput:
    """Full registration forward pass: registered image, recovered field and
    the fused-map segmentations of both inputs."""
    same_shape(flt, ref)
    dtype = next(params.g.parameters()).dtype
    params.g.eval()
    with torch.no_grad():
        flt_t = to_tensor(flt, dtype)
        ref_t = to_tensor(ref, dtype)
        trans_t, def_recv_t = params.g(flt_t, ref_t)
        soft_flt = params.g.soft_fused_map(flt_t)
        soft_ref = params.g.soft_fused_map(ref_t)
    def_recv = DisplacementField(def_recv_t[0].cpu().numpy().astype(np.float64))
    seg_flt = otsu_threshold(soft_flt[0, 0].cpu().numpy().astype(np.float64))
    seg_ref = otsu_threshold(soft_ref[0, 0].cpu().numpy().astype(np.float64))
    seg_trans = warp(seg_flt, def_recv, "nearest")
    return GeneratorOutput(trans=_to_image(trans_t), def_recv=def_recv,
                           seg_flt=seg_flt, seg_ref=seg_ref, seg_trans=seg_trans)


def reverse_generator_forward(params: ModelParams, img: Image) -> Image:
    """Map a registered-domain image back through F (single forward pass)."""
    dtype = next(params.f.parameters()).dtype
    params.f.eval()
    with torch.no_grad():
        trans_t, _ = params.f.forward_single(to_tensor(img, dtype))
    return _to_image(trans_t)


def discriminator_forward(params: ModelParams, trans: Image, ref: Image,
                          seg_trans: SegMask, seg_ref: SegMask,
                          def_recv: DisplacementField,
                          def_app: DisplacementField | None = None,
                          which: str = "d_ref") -> float:
    """Probability that the assembled registration bundle looks real."""
    require(which in ("d_ref", "d_flt"), "which must be d_ref or d_flt")
    for other in (ref, seg_trans, seg_ref):
        same_shape(trans, other)
    same_shape(trans, def_recv)
    if def_app is not None:
        same_shape(def_recv, def_app)
    d = getattr(params, which)
    dtype = next(d.parameters()).dtype
    d.eval()
    with torch.no_grad():
        bundle = make_bundle(
            to_tensor(trans, dtype), to_tensor(ref, dtype),
            to_tensor(seg_trans, dtype), to_tensor(seg_ref, dtype),
            torch.from_numpy(np.array(def_recv.vectors)).to(dtype)[None],
            None if def_app is None else torch.from_numpy(np.array(def_app.vectors)).to(dtype)[None])
        prob = d(bundle)
    return float(prob[0])
