import pytest
import torch
import torch.nn.functional as F

import sapnet as S
from sapnet.losses import VGG16_WIDTHS

from conftest import (NARROW_WIDTHS, check_input_gradient, narrow_extractor,
                      seeded_image, small_segmenter)


def triplet(seed=0, size=16):
    clean = seeded_image((1, 3, size, size), seed=seed).float()
    rainy = (clean + 0.3 * seeded_image((1, 3, size, size), seed=seed + 77).float()).clamp(0, 1)
    restored = (0.5 * clean + 0.5 * rainy).clamp(0, 1)
    return restored, clean, rainy


# ------------------------------------------------------------- extractor

def test_extractor_tap_shapes_and_strides(narrow_extractor):
    fe = narrow_extractor
    assert fe.taps == (2, 4, 7)
    assert fe.tap_strides == (1, 2, 4)
    feats = fe.extract(torch.rand(1, 3, 32, 32))
    assert [tuple(f.shape) for f in feats] == [
        (1, NARROW_WIDTHS[1], 32, 32),
        (1, NARROW_WIDTHS[3], 16, 16),
        (1, NARROW_WIDTHS[6], 8, 8),
    ]


def test_extractor_default_plan_matches_vgg_widths():
    fe = S.build_feature_extractor("seeded_random", seed=0)
    feats = fe.extract(torch.rand(1, 3, 16, 16))
    assert [f.shape[1] for f in feats] == [VGG16_WIDTHS[1], VGG16_WIDTHS[3], VGG16_WIDTHS[6]]


def test_extractor_rejects_undersized_input(narrow_extractor):
    with pytest.raises(S.InputError, match="8"):
        narrow_extractor.extract(torch.rand(1, 3, 7, 32))


def test_extractor_frozen_and_seed_deterministic():
    a = S.build_feature_extractor("seeded_random", widths=NARROW_WIDTHS, seed=9)
    b = S.build_feature_extractor("seeded_random", widths=NARROW_WIDTHS, seed=9)
    x = torch.rand(1, 3, 16, 16)
    fa, fb = a.extract(x), b.extract(x)
    assert all(torch.equal(u, v) for u, v in zip(fa, fb))
    assert all(not p.requires_grad for p in a.parameters())


def test_pretrained_extractor_without_weights_instructs_fallback(monkeypatch):
    monkeypatch.delenv("SAPNET_CACHE", raising=False)
    with pytest.raises(S.PretrainedWeightsUnavailable, match="seeded_random"):
        S.build_feature_extractor("pretrained_vgg16")


def test_extractor_validates_taps():
    with pytest.raises(S.ConfigError):
        S.build_feature_extractor("seeded_random", taps=(4, 2), widths=NARROW_WIDTHS)
    with pytest.raises(S.ConfigError):
        S.build_feature_extractor("seeded_random", taps=(2, 99), widths=NARROW_WIDTHS)
    with pytest.raises(S.ConfigError):
        S.build_feature_extractor("wavelets")


# ------------------------------------------------------------------- pcl

def test_pcl_zero_at_clean_point(narrow_extractor):
    _, clean, rainy = triplet(seed=1)
    value = S.pcl(clean, clean, rainy, narrow_extractor)
    assert abs(value.item()) < 1e-6


def test_pcl_matches_manual_per_tap_recomposition(narrow_extractor):
    restored, clean, rainy = triplet(seed=2)
    fe = narrow_extractor
    omega = (0.25, 0.5, 1.0)
    got = S.pcl(restored, clean, rainy, fe, omega).item()
    with torch.no_grad():
        fr = fe.extract(restored)
        fc = fe.extract(clean)
        fn = fe.extract(rainy)
    want = 0.0
    for w, r, c, n in zip(omega, fr, fc, fn):
        num = (r - c).abs().mean().item()
        den = (r - n).abs().mean().item()
        want += w * num / (den + 1e-7)
    assert abs(got - want) < 1e-6


def test_pcl_endpoint_ordering(narrow_extractor):
    _, clean, rainy = triplet(seed=3)
    at_clean = S.pcl(clean, clean, rainy, narrow_extractor).item()
    at_rainy = S.pcl(rainy, clean, rainy, narrow_extractor).item()
    assert at_clean < 1e-6
    assert at_rainy > 1e3  # denominator collapses to the epsilon floor


def test_pcl_degenerate_triplet_is_zero(narrow_extractor):
    _, clean, _ = triplet(seed=4)
    assert abs(S.pcl(clean, clean, clean, narrow_extractor).item()) < 1e-6


def test_pcl_gradient_only_through_restored(narrow_extractor):
    restored, clean, rainy = triplet(seed=5)
    restored = restored.requires_grad_(True)
    clean = clean.requires_grad_(True)
    rainy = rainy.requires_grad_(True)
    S.pcl(restored, clean, rainy, narrow_extractor).backward()
    assert restored.grad is not None and restored.grad.abs().sum() > 0
    assert clean.grad is None
    assert rainy.grad is None


def test_pcl_omega_arity_checked(narrow_extractor):
    restored, clean, rainy = triplet(seed=6)
    with pytest.raises(S.ConfigError):
        S.pcl(restored, clean, rainy, narrow_extractor, omega=(1.0,))


# ----------------------------------------------------------------- lpisl

def test_lpisl_zero_for_identical_images(narrow_extractor):
    _, clean, _ = triplet(seed=7)
    assert S.lpisl(clean, clean, narrow_extractor, resize_to=32).item() == 0.0


def test_lpisl_positive_for_distinct_images(narrow_extractor):
    restored, clean, _ = triplet(seed=8)
    assert S.lpisl(restored, clean, narrow_extractor, resize_to=32).item() > 0.0


def test_lpisl_matches_manual_recomposition(narrow_extractor):
    restored, clean, _ = triplet(seed=9, size=24)
    fe = narrow_extractor
    resize = 32
    got = S.lpisl(restored, clean, fe, resize_to=resize).item()
    with torch.no_grad():
        fr = fe.extract(F.interpolate(restored, size=(resize, resize), mode="bilinear",
                                      align_corners=False))
        fc = fe.extract(F.interpolate(clean, size=(resize, resize), mode="bilinear",
                                      align_corners=False))
    want = 0.0
    for r, c in zip(fr, fc):
        rn = r / r.norm(dim=1, keepdim=True).clamp_min(1e-12)
        cn = c / c.norm(dim=1, keepdim=True).clamp_min(1e-12)
        want += (rn - cn).pow(2).sum(dim=1).mean().item()
    assert abs(got - want) < 1e-6


def test_lpisl_gradient_only_through_restored(narrow_extractor):
    restored, clean, _ = triplet(seed=10)
    restored = restored.requires_grad_(True)
    clean = clean.requires_grad_(True)
    S.lpisl(restored, clean, narrow_extractor, resize_to=32).backward()
    assert restored.grad is not None and restored.grad.abs().sum() > 0
    assert clean.grad is None


def test_lpisl_resize_below_extractor_minimum_rejected(narrow_extractor):
    restored, clean, _ = triplet(seed=11)
    with pytest.raises(S.ConfigError):
        S.lpisl(restored, clean, narrow_extractor, resize_to=4)


# ---------------------------------------------------------------- negssim

def test_negative_ssim_is_minus_one_at_identity():
    _, clean, _ = triplet(seed=12)
    assert abs(S.negative_ssim_loss(clean, clean).item() + 1.0) < 1e-6


def test_negative_ssim_matches_metric():
    restored, clean, _ = triplet(seed=13)
    assert S.negative_ssim_loss(restored, clean).item() == -S.ssim(restored, clean).item()


# ------------------------------------------------------------- total loss

def test_total_loss_identity_holds_exactly(narrow_extractor, small_segmenter):
    restored, clean, rainy = triplet(seed=14, size=32)
    probs = small_segmenter(restored)
    w = S.LossWeights(lambda_ssim=0.7, lambda_seg=0.23, lambda_pcl=0.11, lambda_lpisl=0.05)
    bd = S.total_loss(restored, clean, rainy, probs, narrow_extractor, w, lpisl_resize=32)
    recomposed = (w.lambda_ssim * bd.ssim_loss + w.lambda_seg * bd.seg_loss
                  + w.lambda_pcl * bd.pcl + w.lambda_lpisl * bd.lpisl)
    assert bd.total.item() == recomposed.item()


def test_total_loss_zero_weight_terms_skipped(narrow_extractor):
    restored, clean, rainy = triplet(seed=15)
    w = S.LossWeights(lambda_seg=0.0, lambda_pcl=0.0, lambda_lpisl=0.0)
    bd = S.total_loss(restored, clean, rainy, None, narrow_extractor, w)
    assert bd.seg_loss.item() == 0.0
    assert bd.pcl.item() == 0.0
    assert bd.lpisl.item() == 0.0
    assert bd.total.item() == bd.ssim_loss.item()
    # extractor not even needed when both perceptual weights vanish
    bd2 = S.total_loss(restored, clean, rainy, None, None, w)
    assert bd2.total.item() == bd.total.item()


def test_total_loss_requires_probs_when_seg_weight_nonzero(narrow_extractor):
    restored, clean, rainy = triplet(seed=16)
    with pytest.raises(S.ConfigError):
        S.total_loss(restored, clean, rainy, None, narrow_extractor, S.LossWeights())


def test_total_loss_requires_extractor_when_perceptual_enabled():
    restored, clean, rainy = triplet(seed=17)
    w = S.LossWeights(lambda_seg=0.0)
    with pytest.raises(S.ConfigError):
        S.total_loss(restored, clean, rainy, None, None, w)


def test_all_terms_finite_over_seeded_fuzz(narrow_extractor, small_segmenter):
    w = S.LossWeights()
    for seed in range(100):
        restored = seeded_image((1, 3, 16, 16), seed=seed).float()
        clean = seeded_image((1, 3, 16, 16), seed=seed + 500).float()
        rainy = seeded_image((1, 3, 16, 16), seed=seed + 900).float()
        probs = small_segmenter(restored)
        bd = S.total_loss(restored, clean, rainy, probs, narrow_extractor, w,
                          lpisl_resize=16)
        for name, term in (("ssim", bd.ssim_loss), ("seg", bd.seg_loss),
                           ("pcl", bd.pcl), ("lpisl", bd.lpisl), ("total", bd.total)):
            assert torch.isfinite(term).all(), f"seed {seed}: {name} not finite"


def test_total_loss_gradient_reaches_restored(narrow_extractor, small_segmenter):
    restored, clean, rainy = triplet(seed=18, size=32)
    restored = restored.requires_grad_(True)
    probs = small_segmenter(restored)
    bd = S.total_loss(restored, clean, rainy, probs, narrow_extractor,
                      S.LossWeights(), lpisl_resize=32)
    bd.total.backward()
    assert restored.grad is not None
    assert restored.grad.abs().sum().item() > 0


def test_loss_weight_defaults():
    w = S.LossWeights()
    assert (w.lambda_ssim, w.lambda_seg, w.lambda_pcl, w.lambda_lpisl) == (1.0, 0.1, 0.1, 0.1)
    assert w.omega == (0.25, 0.5, 1.0)
