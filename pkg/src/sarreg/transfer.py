"""Registration of new image pairs: frozen inference, and per-pair transfer
fine-tuning of only the generator's designated last convolution layer against
the truncated adversarial loss (no field term), with the 1% stopping rule.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .errors import require
from .image import DisplacementField, Image, SegMask, same_shape
from .losses import adversarial_total, generator_gan_term
from .metrics import METRIC_CSV_HEADER, MetricReport, evaluate_registration
from .networks import (ModelParams, make_bundle, otsu_threshold, to_tensor,
                       warp_bilinear_t)
from .tensorfile import write_tensor
from .warp import warp

STOP_EPS = 1e-12


@dataclass(frozen=True)
class FinetuneConfig:
    rel_tol: float = 0.01
    max_iters: int = 30
    min_iters: int = 1
    lr: float = 1e-3
    beta1: float = 0.93
    beta2: float = 0.999

    def __post_init__(self):
        require(0.0 < self.rel_tol < 1.0, "rel_tol must be in (0, 1)")
        require(self.max_iters >= self.min_iters >= 1,
                "need max_iters >= min_iters >= 1")


@dataclass(frozen=True)
class RegistrationResult:
    trans: Image
    def_recv: DisplacementField
    seg_trans: SegMask
    seg_ref: SegMask
    loss_trace: tuple[float, ...]
    iters_used: int
    runtime_s: float
    metrics: MetricReport | None = None
    degraded: bool = False
    finetuned_params: ModelParams | None = None  # for freeze-contract audits


def should_stop(trace: list[float], rel_tol: float, min_iters: int) -> bool:
    """1% rule: relative change between consecutive iterations below rel_tol."""
    if len(trace) < max(2, min_iters):
        return False
    prev, cur = trace[-2], trace[-1]
    return abs(cur - prev) / max(abs(prev), STOP_EPS) < rel_tol


def _soft_masks(params: ModelParams, flt_t, ref_t, masks):
    """Soft mask pair driving the Dice term: ground truth when supplied,
    otherwise the frozen trunk's fused maps."""
    if masks is not None:
        flt_mask, ref_mask = masks
        dtype = flt_t.dtype
        return to_tensor(flt_mask, dtype), to_tensor(ref_mask, dtype)
    with torch.no_grad():
        return params.g.soft_fused_map(flt_t), params.g.soft_fused_map(ref_t)


def _hard_masks(soft_flt, soft_ref, masks):
    if masks is not None:
        return masks[0], masks[1]
    to_np = lambda t: t[0, 0].detach().cpu().numpy().astype(np.float64)
    return otsu_threshold(to_np(soft_flt)), otsu_threshold(to_np(soft_ref))


def _result_from_state(trans_t, def_recv_t, seg_flt_hard, seg_ref_hard):
    trans = Image(np.clip(trans_t[0, 0].detach().cpu().numpy().astype(np.float64),
                          0.0, 1.0))
    def_recv = DisplacementField(def_recv_t[0].detach().cpu().numpy().astype(np.float64))
    seg_trans = warp(seg_flt_hard, def_recv, "nearest")
    return trans, def_recv, seg_trans


def register_frozen(trained: ModelParams, flt: Image, ref: Image,
                    masks: tuple[SegMask, SegMask] | None = None,
                    spacing_mm: float = 1.0) -> RegistrationResult:
    """Single forward pass through the trained generator (in-domain case)."""
    same_shape(flt, ref)
    t0 = time.perf_counter()
    dtype = next(trained.g.parameters()).dtype
    trained.eval_mode()
    flt_t = to_tensor(flt, dtype)
    ref_t = to_tensor(ref, dtype)
    with torch.no_grad():
        trans_t, def_recv_t = trained.g(flt_t, ref_t)
    soft_flt, soft_ref = _soft_masks(trained, flt_t, ref_t, masks)
    seg_flt_hard, seg_ref_hard = _hard_masks(soft_flt, soft_ref, masks)
    trans, def_recv, seg_trans = _result_from_state(trans_t, def_recv_t, seg_flt_hard,
                                                    seg_ref_hard)
    runtime = time.perf_counter() - t0
    metrics = None
    if masks is not None:
        metrics = evaluate_registration(trans, ref, seg_trans, seg_ref_hard,
                                        spacing_mm, runtime)
    return RegistrationResult(trans=trans, def_recv=def_recv, seg_trans=seg_trans,
                              seg_ref=seg_ref_hard, loss_trace=(), iters_used=0,
                              runtime_s=runtime, metrics=metrics)


def finetune_register(trained: ModelParams, flt: Image, ref: Image,
                      cfg: FinetuneConfig = FinetuneConfig(),
                      masks: tuple[SegMask, SegMask] | None = None,
                      spacing_mm: float = 1.0,
                      keep_params: bool = False) -> RegistrationResult:
    """Per-pair transfer registration.

    Operates on a deep copy; every layer except the designated last
    convolution layer of G is frozen. The per-iteration loss is the truncated
    adversarial objective (GAN terms + Dice term, no field term). Stops when
    the relative loss change drops below rel_tol or at max_iters; returns the
    best-loss iterate. A non-finite loss stops early and flags the result.
    """
    same_shape(flt, ref)
    t0 = time.perf_counter()
    work = trained.clone()
    work.eval_mode()
    work.freeze_all_but(work.last_conv_layer)
    trainable = work.trainable()
    require(len(trainable) > 0, "designated layer has no parameters")
    opt = torch.optim.Adam(trainable, lr=cfg.lr, betas=(cfg.beta1, cfg.beta2))

    dtype = next(work.g.parameters()).dtype
    flt_t = to_tensor(flt, dtype)
    ref_t = to_tensor(ref, dtype)
    soft_flt, soft_ref = _soft_masks(work, flt_t, ref_t, masks)
    seg_flt_hard, seg_ref_hard = _hard_masks(soft_flt, soft_ref, masks)

    # the reverse-direction term is constant under a frozen F; computed once
    with torch.no_grad():
        f_img, f_field = work.f.forward_single(ref_t)
        fake_x = make_bundle(f_img, flt_t, soft_flt, soft_flt, f_field, None)
        adv_f = generator_gan_term(work.d_flt(fake_x))

    trace: list[float] = []
    best = None
    degraded = False
    for it in range(1, cfg.max_iters + 1):
        trans_t, def_recv_t = work.g(flt_t, ref_t)
        seg_trans_soft = warp_bilinear_t(soft_flt, def_recv_t)
        fake_y = make_bundle(trans_t, ref_t, seg_trans_soft, soft_ref,
                             def_recv_t, None)
        adv_g = generator_gan_term(work.d_ref(fake_y))
        total, _, field_term = adversarial_total(adv_g, adv_f, soft_ref,
                                                 seg_trans_soft)
        assert float(field_term) == 0.0  # structurally absent in transfer
        loss_val = float(total.detach())
        if not np.isfinite(loss_val):
            degraded = True
            break
        trace.append(loss_val)
        if best is None or loss_val < best[0]:
            best = (loss_val, trans_t.detach(), def_recv_t.detach())
        if should_stop(trace, cfg.rel_tol, cfg.min_iters) or it == cfg.max_iters:
            break
        opt.zero_grad()
        total.backward()
        opt.step()

    if best is None:  # first forward already non-finite
        with torch.no_grad():
            trans_t, def_recv_t = trained.g(flt_t, ref_t)
        best = (float("nan"), trans_t, def_recv_t)
        degraded = True

    trans, def_recv, seg_trans = _result_from_state(best[1], best[2],
                                                    seg_flt_hard, seg_ref_hard)
    runtime = time.perf_counter() - t0
    metrics = None
    if masks is not None:
        metrics = evaluate_registration(trans, ref, seg_trans, seg_ref_hard,
                                        spacing_mm, runtime)
    return RegistrationResult(trans=trans, def_recv=def_recv, seg_trans=seg_trans,
                              seg_ref=seg_ref_hard, loss_trace=tuple(trace),
                              iters_used=len(trace), runtime_s=runtime,
                              metrics=metrics, degraded=degraded,
                              finetuned_params=work if keep_params else None)


def save_result(result: RegistrationResult, out_dir, ref: Image,
                case_id: str = "case") -> None:
    """Result directory: registered image, field tensor, masks, loss trace,
    metrics row and a contour overlay figure."""
    from .image import save_image

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_image(result.trans, out_dir / "trans.png")
    write_tensor(out_dir / "def_recv.sart",
                 result.def_recv.vectors.astype(np.float32))
    write_tensor(out_dir / "seg_trans.sart", result.seg_trans.pixels)
    write_tensor(out_dir / "seg_ref.sart", result.seg_ref.pixels)
    with open(out_dir / "loss_trace.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iteration", "loss"])
        for i, v in enumerate(result.loss_trace, start=1):
            writer.writerow([i, v])
    if result.metrics is not None:
        with open(out_dir / "metrics.csv", "w") as fh:
            fh.write(",".join(METRIC_CSV_HEADER) + "\n")
            fh.write(result.metrics.csv_row(case_id) + "\n")
    save_overlay(ref, result.seg_ref, result.seg_trans, out_dir / "overlay.png")


def save_overlay(ref: Image, seg_ref: SegMask, seg_warped: SegMask, path) -> None:
    """Reference image with the reference contour (red) and the warped
    floating contour (green)."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(4, 4))
    ax.imshow(ref.pixels, cmap="gray", vmin=0, vmax=1)
    if seg_ref.pixels.any():
        ax.contour(seg_ref.pixels, levels=[0.5], colors="red", linewidths=1.2)
    if seg_warped.pixels.any():
        ax.contour(seg_warped.pixels, levels=[0.5], colors="lime", linewidths=1.2)
    ax.set_axis_off()
    fig.tight_layout(pad=0)
    fig.savefig(path, dpi=120)
    plt.close(fig)
