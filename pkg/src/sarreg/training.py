"""Synthetic pair construction, patient-level splitting, generator
pre-initialization and the alternating adversarial training loop.

Field-direction note: pairs store `def_app`, the field that was applied to
create the floating image (backward-warp convention), and `def_reg`, its
fixed-point inverse. The registration-direction supervision everywhere
(pretraining, the Eq.-style field penalty, discriminator field channels) is
`def_reg`, because warping the floating image with the inverse of the applied
field is what recovers the reference.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .affine import affine_align
from .bspline import random_elastic_deformation
from .checkpoint import save_checkpoint
from .errors import ContractViolation, DegenerateInput, require
from .image import DisplacementField, Image, SegMask, same_shape
from .losses import (LOSS_CSV_HEADER, LossBreakdown, full_objective,
                     gan_loss, generator_gan_term)
from .metrics import dice
from .networks import ModelParams, make_bundle, warp_bilinear_t
from .perceptual import ExtractorConfig, FeatureExtractor
from .warp import invert_field, warp


@dataclass(frozen=True)
class TrainingPair:
    """One synthetic supervision pair; flt = warp(aligned partner, def_app)."""

    ref: Image
    ref_seg: SegMask
    flt: Image
    flt_seg: SegMask
    def_app: DisplacementField
    def_reg: DisplacementField          # fixed-point inverse of def_app
    aligned_ok: bool = True             # False -> affine fell back to identity


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    beta1: float = 0.93
    beta2: float = 0.999
    batch: int = 8
    g_steps: int = 1
    d_steps: int = 1
    max_iters: int = 2000
    seed: int = 0
    pretrain_iters: int = 0
    spacing: int = 16
    min_disp: float = 1.0
    max_disp: float = 20.0
    lambda_cyc: float = 10.0
    checkpoint_every: int = 500
    floats_per_base: int = 4
    extractor_widths: tuple[int, ...] = (8, 16, 32)
    extractor_pools: tuple[int, ...] = (1, 2)
    extractor_seed: int = 0

    def __post_init__(self):
        require(self.lr > 0, "lr must be positive")
        require(0.0 <= self.beta1 < 1.0, "beta1 must be in [0, 1)")
        require(self.batch >= 1, "batch must be >= 1")

    def extractor_config(self) -> ExtractorConfig:
        return ExtractorConfig(widths=tuple(self.extractor_widths),
                               pool_after=tuple(self.extractor_pools),
                               seed=self.extractor_seed)


def make_training_pair(base: Image, base_seg: SegMask,
                       partner: Image | None = None,
                       partner_seg: SegMask | None = None,
                       cfg: TrainConfig = TrainConfig(),
                       seed: int = 0) -> TrainingPair:
    """Affinely align the partner to the base, apply a random elastic field.

    Self-pairing (partner None or identical to base) skips alignment. A
    degenerate affine falls back to identity alignment with aligned_ok False.
    """
    same_shape(base, base_seg)
    aligned_ok = True
    if partner is None or partner is base:
        aligned, aligned_seg = base, base_seg
    else:
        require(partner_seg is not None, "a distinct partner needs partner_seg")
        same_shape(base, partner)
        try:
            transform, aligned = affine_align(partner, base)
            aligned_seg = _resample_mask(partner_seg, transform)
        except DegenerateInput:
            aligned, aligned_seg, aligned_ok = partner, partner_seg, False
    def_app = random_elastic_deformation(base.shape, cfg.spacing, cfg.min_disp,
                                         cfg.max_disp, seed)
    flt = warp(aligned, def_app, "bilinear")
    flt_seg = warp(aligned_seg, def_app, "nearest")
    return TrainingPair(ref=base, ref_seg=base_seg, flt=flt, flt_seg=flt_seg,
                        def_app=def_app, def_reg=invert_field(def_app),
                        aligned_ok=aligned_ok)


def _resample_mask(mask: SegMask, transform) -> SegMask:
    h, w = mask.shape
    inv = transform.inverse()
    rr, cc = np.meshgrid(np.arange(h, dtype=np.float64),
                         np.arange(w, dtype=np.float64), indexing="ij")
    pts = np.stack([rr.ravel(), cc.ravel()], axis=1)
    src = inv.apply(pts).reshape(h, w, 2)
    fld = DisplacementField(src - np.stack([rr, cc], axis=-1))
    return warp(mask, fld, "nearest")


def split_dataset(cases: list, seed: int = 0) -> dict[str, list]:
    """Patient-level 0.7/0.1/0.2 split; rounding remainder goes to train."""
    n = len(cases)
    require(n >= 1, "empty dataset")
    order = np.random.default_rng(seed).permutation(n)
    n_val = int(round(0.1 * n))
    n_test = int(round(0.2 * n))
    require(n_val + n_test <= n, "dataset too small for the configured split")
    shuffled = [cases[i] for i in order]
    n_train = n - n_val - n_test
    return {"train": shuffled[:n_train],
            "val": shuffled[n_train:n_train + n_val],
            "test": shuffled[n_train + n_val:]}


class _BatchSource:
    """Pairs stacked once into torch tensors; seeded batch sampling."""

    def __init__(self, pairs: list[TrainingPair], dtype=torch.float32):
        require(len(pairs) >= 1, "need at least one training pair")
        as_t = lambda arrs: torch.from_numpy(np.stack(arrs).astype(np.float32)).to(dtype)
        self.flt = as_t([p.flt.pixels for p in pairs]).unsqueeze(1)
        self.ref = as_t([p.ref.pixels for p in pairs]).unsqueeze(1)
        self.flt_seg = as_t([p.flt_seg.pixels for p in pairs]).unsqueeze(1)
        self.ref_seg = as_t([p.ref_seg.pixels for p in pairs]).unsqueeze(1)
        self.def_reg = as_t([p.def_reg.vectors for p in pairs])
        self.n = len(pairs)

    def batch(self, rng: np.random.Generator, size: int):
        idx = torch.from_numpy(rng.integers(0, self.n, size=min(size, self.n)))
        return (self.flt[idx], self.ref[idx], self.flt_seg[idx],
                self.ref_seg[idx], self.def_reg[idx])


def pretrain_generator(params: ModelParams, pairs: list[TrainingPair],
                       cfg: TrainConfig) -> ModelParams:
    """MSE warm-up: regress the registered image onto the reference and the
    recovered field onto the registration-direction target."""
    if cfg.pretrain_iters <= 0:
        return params
    dtype = next(params.g.parameters()).dtype
    source = _BatchSource(pairs, dtype)
    rng = np.random.default_rng(cfg.seed + 101)
    opt = torch.optim.Adam(params.g.parameters(), lr=cfg.lr,
                           betas=(cfg.beta1, cfg.beta2))
    params.g.train()
    for _ in range(cfg.pretrain_iters):
        flt, ref, _, _, def_reg = source.batch(rng, cfg.batch)
        trans, def_recv = params.g(flt, ref)
        loss = ((trans - ref) ** 2).mean() + ((def_recv - def_reg) ** 2).mean()
        if not torch.isfinite(loss):
            raise ContractViolation("pretraining loss became non-finite")
        opt.zero_grad()
        loss.backward()
        opt.step()
    params.g.eval()
    return params


def train(params: ModelParams, pairs: list[TrainingPair], cfg: TrainConfig,
          out_dir=None) -> tuple[ModelParams, list[LossBreakdown]]:
    """Alternating adversarial optimization of the full objective.

    Discriminators and generators are stepped by separate Adam optimizers,
    never in the same step. Fully seeded; a fixed seed and thread count give
    bit-identical checkpoints. Logs one LossBreakdown per iteration (CSV when
    out_dir is given) and checkpoints every checkpoint_every steps.
    """
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    dtype = next(params.g.parameters()).dtype
    source = _BatchSource(pairs, dtype)
    extractor = FeatureExtractor(cfg.extractor_config(), dtype=dtype)

    g_opt = torch.optim.Adam(
        list(params.g.parameters()) + list(params.f.parameters()),
        lr=cfg.lr, betas=(cfg.beta1, cfg.beta2))
    d_opt = torch.optim.Adam(
        list(params.d_ref.parameters()) + list(params.d_flt.parameters()),
        lr=cfg.lr, betas=(cfg.beta1, cfg.beta2))

    out_dir = Path(out_dir) if out_dir is not None else None
    log_rows: list[LossBreakdown] = []
    log_fh = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        log_fh = open(out_dir / "training_log.csv", "w")
        log_fh.write(",".join(LOSS_CSV_HEADER) + "\n")

    params.train_mode()
    t0 = time.perf_counter()
    try:
        for step in range(1, cfg.max_iters + 1):
            flt, ref, flt_seg, ref_seg, def_reg = source.batch(rng, cfg.batch)

            for _ in range(cfg.d_steps):
                _discriminator_step(params, d_opt, flt, ref, flt_seg, ref_seg, def_reg)

            for _ in range(cfg.g_steps):
                breakdown = _generator_step(params, g_opt, extractor, cfg,
                                            flt, ref, flt_seg, ref_seg, def_reg)
            if not breakdown.finite():
                raise ContractViolation(
                    f"non-finite loss at step {step}: {_offending(breakdown)}")
            log_rows.append(breakdown)
            if log_fh is not None:
                log_fh.write(breakdown.csv_row(step, time.perf_counter() - t0) + "\n")
            if out_dir is not None and cfg.checkpoint_every > 0 \
                    and step % cfg.checkpoint_every == 0:
                save_checkpoint(params, out_dir / f"checkpoint_{step:06d}")
    finally:
        if log_fh is not None:
            log_fh.close()
    params.eval_mode()
    if out_dir is not None:
        save_checkpoint(params, out_dir / "checkpoint_final")
    return params, log_rows


def _offending(breakdown: LossBreakdown) -> str:
    import math
    for name in ("content_nmi", "content_ssim", "content_vgg", "adv_g", "adv_f",
                 "adv_dice", "adv_field", "cycle"):
        if not math.isfinite(getattr(breakdown, name)):
            return name
    return "total"


def _discriminator_step(params, d_opt, flt, ref, flt_seg, ref_seg, def_reg):
    with torch.no_grad():
        trans, def_recv = params.g(flt, ref)
        seg_trans = warp_bilinear_t(flt_seg, def_recv)
        f_img, f_field = params.f.forward_single(ref)
    zeros = torch.zeros_like(def_reg)

    fake_y = make_bundle(trans, ref, seg_trans, ref_seg, def_recv, def_reg)
    real_y = make_bundle(ref, ref, ref_seg, ref_seg, def_reg, def_reg)
    loss_y, _ = gan_loss(params.d_ref(real_y), params.d_ref(fake_y))

    fake_x = make_bundle(f_img, flt, flt_seg, flt_seg, f_field, zeros)
    real_x = make_bundle(flt, flt, flt_seg, flt_seg, zeros, zeros)
    loss_x, _ = gan_loss(params.d_flt(real_x), params.d_flt(fake_x))

    d_opt.zero_grad()
    (loss_y + loss_x).backward()
    d_opt.step()


def _generator_step(params, g_opt, extractor, cfg,
                    flt, ref, flt_seg, ref_seg, def_reg) -> LossBreakdown:
    trans, def_recv = params.g(flt, ref)
    seg_trans = warp_bilinear_t(flt_seg, def_recv)
    zeros = torch.zeros_like(def_reg)

    fake_y = make_bundle(trans, ref, seg_trans, ref_seg, def_recv, def_reg)
    adv_g = generator_gan_term(params.d_ref(fake_y))
    f_img, f_field = params.f.forward_single(ref)
    fake_x = make_bundle(f_img, flt, flt_seg, flt_seg, f_field, zeros)
    adv_f = generator_gan_term(params.d_flt(fake_x))

    f_of_trans, _ = params.f.forward_single(trans)
    g_of_f, _ = params.g(f_img, ref)
    cycle = (f_of_trans - flt).abs().mean() + (g_of_f - ref).abs().mean()

    total, breakdown = full_objective(
        ref=ref, trans=trans, seg_ref=ref_seg, seg_trans=seg_trans,
        adv_g=adv_g, adv_f=adv_f, cycle=cycle, extractor=extractor,
        def_recv=def_recv, def_app=def_reg, d_max=cfg.max_disp,
        lambda_cyc=cfg.lambda_cyc)
    g_opt.zero_grad()
    total.backward()
    g_opt.step()
    return breakdown


def before_registration_dice(pair: TrainingPair) -> float:
    """Residual overlap after affine pre-alignment only."""
    return dice(pair.flt_seg, pair.ref_seg)
