"""Cross-module invariants pinned by the contracts."""

import numpy as np
import torch

from sarreg.networks import (Discriminator, DiscriminatorConfig, GeneratorConfig,
                             ModelParams, generator_forward, to_tensor,
                             warp_bilinear_t)
from sarreg.training import TrainConfig, _BatchSource, _discriminator_step, \
    _generator_step, make_training_pair
from sarreg.perceptual import FeatureExtractor

from conftest import disk_mask, smooth_random_image

TINY_G = GeneratorConfig(n_res_blocks=1, width=8, field_scale=8.0)
TINY_D = DiscriminatorConfig(n_conv=4, base_width=8, max_width=32, dense_units=16)


def test_single_pathway_trans_is_bitwise_warp_of_field():
    """The registered image is derived from the recovered field by the same
    warp for any parameter setting, so the two outputs cannot contradict."""
    params = ModelParams(TINY_G, TINY_D, seed=2)
    with torch.no_grad():
        params.g.field_head.weight.normal_(0, 0.6)
        params.g.field_head.bias.normal_(0, 0.2)
    flt = smooth_random_image((16, 16), seed=3)
    out = generator_forward(params, flt, smooth_random_image((16, 16), seed=4))
    flt_t = to_tensor(flt, torch.float32)
    field_t = torch.from_numpy(out.def_recv.vectors.copy()).to(torch.float32)[None]
    recomputed = warp_bilinear_t(flt_t, field_t)[0, 0].numpy().astype(np.float64)
    assert np.array_equal(out.trans.pixels, np.clip(recomputed, 0.0, 1.0))


def test_discriminator_monotone_in_final_preactivation():
    torch.manual_seed(7)
    d = Discriminator(TINY_D)
    d.eval()
    bundle = torch.rand(8, Discriminator.IN_CHANNELS, 16, 16)
    with torch.no_grad():
        logits = d.forward_logit(bundle)
        probs = d(bundle)
    order_logits = torch.argsort(logits)
    order_probs = torch.argsort(probs)
    assert torch.equal(order_logits, order_probs)


def _training_setup():
    cfg = TrainConfig(batch=2, max_iters=1, seed=5, max_disp=6.0,
                      extractor_widths=(4,), extractor_pools=(1,))
    pairs = [make_training_pair(smooth_random_image((16, 16), seed=s),
                                disk_mask((16, 16), (8, 8), 5), cfg=cfg, seed=s)
             for s in range(3)]
    params = ModelParams(TINY_G, TINY_D, seed=6)
    params.train_mode()
    source = _BatchSource(pairs, torch.float32)
    rng = np.random.default_rng(0)
    batch = source.batch(rng, cfg.batch)
    extractor = FeatureExtractor(cfg.extractor_config())
    return params, cfg, batch, extractor


def test_discriminator_step_never_touches_generator_parameters():
    # trainable parameters only: batch-norm running stats legitimately update
    # whenever the generators run forward in train mode
    params, cfg, batch, _ = _training_setup()
    d_opt = torch.optim.Adam(list(params.d_ref.parameters())
                             + list(params.d_flt.parameters()), lr=1e-2)
    g_before = {k: v.clone() for k, v in params.g.named_parameters()}
    f_before = {k: v.clone() for k, v in params.f.named_parameters()}
    _discriminator_step(params, d_opt, *batch)
    for k, v in params.g.named_parameters():
        assert torch.equal(g_before[k], v), k
    for k, v in params.f.named_parameters():
        assert torch.equal(f_before[k], v), k


def test_generator_step_never_touches_discriminators():
    params, cfg, batch, extractor = _training_setup()
    g_opt = torch.optim.Adam(list(params.g.parameters())
                             + list(params.f.parameters()), lr=1e-2)
    d_before = {f"r.{k}": v.clone() for k, v in params.d_ref.state_dict().items()}
    d_before.update({f"f.{k}": v.clone() for k, v in params.d_flt.state_dict().items()})
    _generator_step(params, g_opt, extractor, cfg, *batch)
    for k, v in params.d_ref.state_dict().items():
        assert torch.equal(d_before[f"r.{k}"], v), k
    for k, v in params.d_flt.state_dict().items():
        assert torch.equal(d_before[f"f.{k}"], v), k
    # ... while the generator field head did move
    assert params.g.field_head.weight.abs().sum() > 0
