"""Training objectives: content loss, GAN losses, cycle consistency, the
segmentation/field-augmented adversarial total, and the full objective.

Everything here operates on torch tensors so gradients can flow to the
generator field head: images/masks as (B, 1, H, W), fields as (B, H, W, 2).
Sign conventions: every term is a penalty that decreases toward 0 at perfect
alignment (the similarity metrics enter as 1 - value, the Dice and field
terms as eps-clamped negated logs).
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import torch

from .errors import require
from .metrics import SSIM_K1, SSIM_K2, SSIM_STRIDE, SSIM_WINDOW
from .perceptual import FeatureExtractor, feature_distance_t

LOG_EPS = 1e-6
PROB_CLAMP = 1e-7
LAMBDA_CYC = 10.0

LOSS_CSV_HEADER = ["step", "content_nmi", "content_ssim", "content_vgg",
                   "adv_g", "adv_f", "adv_dice", "adv_field", "cycle",
                   "total", "wall_time_s"]


def _flatten(x: torch.Tensor) -> torch.Tensor:
    return x.reshape(x.shape[0], -1) if x.dim() > 1 else x.reshape(1, -1)


def soft_nmi(a: torch.Tensor, b: torch.Tensor, bins: int = 32,
             bandwidth: float | None = None) -> torch.Tensor:
    """Parzen-window (triangular kernel) NMI, rescaled from [1, 2] to [0, 1].

    Each pixel deposits a triangular mass (support +-bandwidth/2, so exactly
    one bin per image) around the nearest bin center; bin assignment matches
    hard binning while the deposited mass varies smoothly with the intensity,
    keeping the value differentiable and the joint diagonal for identical
    images (identity value 1.0; smoothing can push values slightly below the
    hard-binned metric elsewhere).
    """
    require(a.shape == b.shape, "shape mismatch")
    if bandwidth is None:
        bandwidth = 1.0 / bins
    half = bandwidth / 2.0
    va = _flatten(a)
    vb = _flatten(b)
    centers = (torch.arange(bins, dtype=a.dtype, device=a.device) + 0.5) / bins
    lo, hi = centers[0], centers[-1]

    def weights(v):
        vc = v.clamp(lo, hi).unsqueeze(-1)
        return torch.relu(1.0 - (vc - centers).abs() / half)

    wa = weights(va)
    wb = weights(vb)
    n = va.shape[1]
    joint = torch.einsum("npk,npl->nkl", wa, wb) / n
    mass = joint.sum(dim=(1, 2), keepdim=True).clamp_min(1e-12)
    joint = joint / mass
    pa = joint.sum(dim=2)
    pb = joint.sum(dim=1)

    def entropy(p):
        return -(p * torch.log(p.clamp_min(1e-12))).sum(dim=tuple(range(1, p.dim())))

    h_ab = entropy(joint)
    ratio = (entropy(pa) + entropy(pb)) / h_ab.clamp_min(1e-12)
    # both images constant: single joint cell, zero entropies; fall back to
    # the hard metric's degenerate rule (1 when the constants agree, else 0)
    same_cell = (pa.argmax(dim=1) == pb.argmax(dim=1)).to(ratio.dtype)
    value = torch.where(h_ab > 1e-9, ratio, 1.0 + same_cell)
    return (value - 1.0).mean()


def soft_dice(p: torch.Tensor, q: torch.Tensor, eps: float = LOG_EPS) -> torch.Tensor:
    """Differentiable Dice for soft masks in [0, 1]."""
    require(p.shape == q.shape, "shape mismatch")
    fp = _flatten(p)
    fq = _flatten(q)
    num = 2.0 * (fp * fq).sum(dim=1) + eps
    den = fp.sum(dim=1) + fq.sum(dim=1) + eps
    return (num / den).mean()


def ssim_t(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Torch twin of metrics.ssim: 8x8 windows, stride 4, uniform weighting."""
    require(a.shape == b.shape, "shape mismatch")
    require(min(a.shape[-2:]) >= SSIM_WINDOW, "dims smaller than the window")
    pool = lambda x: torch.nn.functional.avg_pool2d(x, SSIM_WINDOW, stride=SSIM_STRIDE)
    mu_a = pool(a)
    mu_b = pool(b)
    var_a = pool(a * a) - mu_a * mu_a
    var_b = pool(b * b) - mu_b * mu_b
    cov = pool(a * b) - mu_a * mu_b
    c1 = SSIM_K1 ** 2
    c2 = SSIM_K2 ** 2
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return (num / den).mean()


def mse_norm_t(f1: torch.Tensor, f2: torch.Tensor, d_max: float = 20.0) -> torch.Tensor:
    """Differentiable normalized field MSE in [0, 1] (fields (B, H, W, 2))."""
    require(f1.shape == f2.shape, "shape mismatch")
    return (((f1 - f2) ** 2).mean() / (2.0 * d_max) ** 2).clamp(0.0, 1.0)


def content_loss(ref: torch.Tensor, trans: torch.Tensor,
                 extractor: FeatureExtractor):
    """(1 - NMI) + (1 - SSIM) + feature distance; each term >= 0 and ~0 at
    perfect alignment. Returns (total, dict of the three components)."""
    require(ref.shape == trans.shape, "shape mismatch")
    term_nmi = 1.0 - soft_nmi(ref, trans).clamp(0.0, 1.0)
    term_ssim = 1.0 - ssim_t(ref, trans).clamp(-1.0, 1.0)
    term_vgg = feature_distance_t(extractor(ref), extractor(trans))
    total = term_nmi + term_ssim + term_vgg
    return total, {"nmi": term_nmi, "ssim": term_ssim, "vgg": term_vgg}


def generator_gan_term(d_fake: torch.Tensor) -> torch.Tensor:
    """Non-saturating generator objective -log D(fake)."""
    return -torch.log(torch.as_tensor(d_fake).clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)).mean()



def gan_loss(d_real: torch.Tensor, d_fake: torch.Tensor):
    """Binary-cross-entropy GAN terms with clamped probabilities.

    loss_d is minimized by the discriminator; loss_g is the non-saturating
    generator form -log D(fake).
    """
    dr = torch.as_tensor(d_real).clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
    df = torch.as_tensor(d_fake).clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
    loss_d = -(torch.log(dr) + torch.log(1.0 - df)).mean()
    loss_g = -torch.log(df).mean()
    return loss_d, loss_g


def cycle_loss(x: torch.Tensor, y: torch.Tensor, g_fn, f_fn,
               gx: torch.Tensor | None = None) -> torch.Tensor:
    """E|F(G(x)) - x| + E|G(F(y)) - y| with per-pixel means.

    g_fn(flt, ref) -> registered image; f_fn(img) -> reverse-mapped image.
    A precomputed G(x) can be passed to avoid a duplicate forward pass.
    """
    if gx is None:
        gx = g_fn(x, y)
    term1 = (f_fn(gx) - x).abs().mean()
    term2 = (g_fn(f_fn(y), y) - y).abs().mean()
    return term1 + term2


def adversarial_total(adv_g: torch.Tensor, adv_f: torch.Tensor,
                      seg_ref: torch.Tensor, seg_trans: torch.Tensor,
                      def_recv: torch.Tensor | None = None,
                      def_app: torch.Tensor | None = None,
                      d_max: float = 20.0):
    """GAN terms plus the segmentation and field penalties.

    dice term: -log(Dice) with the Dice eps-clamped into [eps, 1], so perfect
    overlap gives exactly 0 and disjoint masks give the large finite -log(eps).
    field term: -log(1 - MSE_norm), clamped the same way; present only when
    the applied field is supplied (training); exactly 0 otherwise (transfer).
    Returns (total, dice_term, field_term).
    """
    dice_term = -torch.log(soft_dice(seg_ref, seg_trans).clamp(LOG_EPS, 1.0))
    if def_app is not None:
        require(def_recv is not None, "field term needs the recovered field")
        field_term = -torch.log(
            (1.0 - mse_norm_t(def_app, def_recv, d_max)).clamp(LOG_EPS, 1.0))
    else:
        field_term = torch.zeros((), dtype=dice_term.dtype, device=dice_term.device)
    total = adv_g + adv_f + dice_term + field_term
    return total, dice_term, field_term


@dataclass(frozen=True)
class LossBreakdown:
    """Per-term generator objective; total follows the fixed decomposition."""

    content_nmi: float
    content_ssim: float
    content_vgg: float
    adv_g: float
    adv_f: float
    adv_dice: float
    adv_field: float
    cycle: float
    lambda_cyc: float = LAMBDA_CYC

    @property
    def total(self) -> float:
        return (self.adv_g + self.adv_f + self.adv_dice + self.adv_field
                + self.content_nmi + self.content_ssim + self.content_vgg
                + self.lambda_cyc * self.cycle)

    def finite(self) -> bool:
        import math
        vals = [self.content_nmi, self.content_ssim, self.content_vgg, self.adv_g,
                self.adv_f, self.adv_dice, self.adv_field, self.cycle, self.total]
        return all(math.isfinite(v) for v in vals)

    def csv_row(self, step: int, wall_time_s: float) -> str:
        buf = io.StringIO()
        csv.writer(buf).writerow(
            [step, self.content_nmi, self.content_ssim, self.content_vgg,
             self.adv_g, self.adv_f, self.adv_dice, self.adv_field,
             self.cycle, self.total, wall_time_s])
        return buf.getvalue().strip("\r\n")


def full_objective(*, ref: torch.Tensor, trans: torch.Tensor,
                   seg_ref: torch.Tensor, seg_trans: torch.Tensor,
                   adv_g: torch.Tensor, adv_f: torch.Tensor,
                   cycle: torch.Tensor, extractor: FeatureExtractor,
                   def_recv: torch.Tensor | None = None,
                   def_app: torch.Tensor | None = None,
                   d_max: float = 20.0,
                   lambda_cyc: float = LAMBDA_CYC):
    """Assemble the generator objective; returns (torch total, LossBreakdown)."""
    content_total, comps = content_loss(ref, trans, extractor)
    adv_tot, dice_term, field_term = adversarial_total(
        adv_g, adv_f, seg_ref, seg_trans, def_recv, def_app, d_max)
    total = adv_tot + content_total + lambda_cyc * cycle
    val = lambda t: float(t.detach()) if torch.is_tensor(t) else float(t)
    breakdown = LossBreakdown(
        content_nmi=val(comps["nmi"]), content_ssim=val(comps["ssim"]),
        content_vgg=val(comps["vgg"]), adv_g=val(adv_g), adv_f=val(adv_f),
        adv_dice=val(dice_term), adv_field=val(field_term),
        cycle=val(cycle), lambda_cyc=lambda_cyc)
    return total, breakdown
