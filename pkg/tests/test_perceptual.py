import numpy as np
import pytest
import torch

from sarreg.errors import ContractViolation
from sarreg.image import Image
from sarreg.perceptual import (ExtractorConfig, FeatureExtractor,
                               extract_features, vgg_distance)
from sarreg.tensorfile import write_tensor

from conftest import smooth_random_image


def test_full_scale_map_count_is_3968():
    cfg = ExtractorConfig.full_scale()
    assert cfg.total_maps == 64 * 2 + 128 * 2 + 256 * 2 + 512 * 3 + 512 * 3 == 3968
    extractor = FeatureExtractor(cfg)
    stack = extract_features(smooth_random_image((16, 16), seed=0), extractor)
    assert stack.total_maps == 3968
    assert len(stack.maps) == len(cfg.widths)


def test_desk_scale_map_count():
    cfg = ExtractorConfig.desk_scale(factor=8)
    assert cfg.total_maps == 3968 // 8 == 496


def test_constant_zero_image_normalizes_to_zeros():
    cfg = ExtractorConfig.desk_scale(factor=8)
    extractor = FeatureExtractor(cfg)
    stack = extract_features(Image(np.zeros((16, 16))), extractor)
    for m in stack.maps:
        assert torch.isfinite(m).all()
        assert float(m.min()) >= 0.0 and float(m.max()) <= 1.0


def test_maps_normalized_to_unit_interval():
    cfg = ExtractorConfig(widths=(8, 16), pool_after=(1,), seed=3)
    stack = extract_features(smooth_random_image((24, 24), seed=2),
                             FeatureExtractor(cfg))
    for m in stack.maps:
        assert float(m.min()) >= 0.0
        assert float(m.max()) <= 1.0


def test_extraction_deterministic_for_seed():
    cfg = ExtractorConfig(widths=(8, 8), pool_after=(1,), seed=11)
    img = smooth_random_image((16, 16), seed=5)
    s1 = extract_features(img, FeatureExtractor(cfg))
    s2 = extract_features(img, FeatureExtractor(cfg))
    for a, b in zip(s1.maps, s2.maps):
        assert torch.equal(a, b)


def test_indivisible_dims_rejected():
    cfg = ExtractorConfig(widths=(8, 8), pool_after=(1, 2), seed=0)  # needs /4
    extractor = FeatureExtractor(cfg)
    img = smooth_random_image((18, 18), seed=0)
    with pytest.raises(ContractViolation):
        extract_features(img, extractor)


def test_distance_zero_iff_identical_and_symmetric():
    cfg = ExtractorConfig(widths=(8, 16), pool_after=(1,), seed=1)
    extractor = FeatureExtractor(cfg)
    a = extract_features(smooth_random_image((16, 16), seed=1), extractor)
    b = extract_features(smooth_random_image((16, 16), seed=2), extractor)
    assert vgg_distance(a, a) == 0.0
    d_ab = vgg_distance(a, b)
    assert d_ab > 0.0
    assert d_ab == pytest.approx(vgg_distance(b, a), rel=1e-12)


def test_distance_matches_per_map_loop_oracle():
    cfg = ExtractorConfig(widths=(4, 8, 8), pool_after=(2,), seed=7)
    extractor = FeatureExtractor(cfg)
    a = extract_features(smooth_random_image((16, 16), seed=3), extractor)
    b = extract_features(smooth_random_image((16, 16), seed=4), extractor)
    per_map = []
    for ma, mb in zip(a.maps, b.maps):
        for c in range(ma.shape[0]):
            diff = ma[c].numpy().astype(np.float64) - mb[c].numpy().astype(np.float64)
            per_map.append((diff ** 2).mean())
    assert vgg_distance(a, b) == pytest.approx(float(np.mean(per_map)), abs=1e-5)


def test_config_mismatch_rejected():
    e1 = FeatureExtractor(ExtractorConfig(widths=(8, 8), pool_after=(1,), seed=0))
    e2 = FeatureExtractor(ExtractorConfig(widths=(8, 16), pool_after=(1,), seed=0))
    img = smooth_random_image((16, 16), seed=9)
    a = extract_features(img, e1)
    b = extract_features(img, e2)
    with pytest.raises(ContractViolation):
        vgg_distance(a, b)


def test_pretrained_weight_loading_round_trip(tmp_path):
    cfg = ExtractorConfig(widths=(4, 8), pool_after=(1,), seed=21)
    src = FeatureExtractor(cfg)
    for i, conv in enumerate(src.convs):
        write_tensor(tmp_path / f"conv{i:02d}.sart", conv.weight.detach().numpy())
        write_tensor(tmp_path / f"conv{i:02d}_bias.sart", conv.bias.detach().numpy())
    dst = FeatureExtractor(ExtractorConfig(widths=(4, 8), pool_after=(1,), seed=99))
    dst.load_pretrained(tmp_path)
    img = smooth_random_image((16, 16), seed=13)
    s_src = extract_features(img, src)
    s_dst = extract_features(img, dst)
    for a, b in zip(s_src.maps, s_dst.maps):
        assert torch.allclose(a, b, atol=1e-6)
