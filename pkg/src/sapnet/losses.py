"""Training objective: negative SSIM plus three auxiliary terms.

* negative SSIM between the restored image and ground truth (primary term);
* focal confidence loss on the frozen segmenter's output (see segmentation
  module);
* perceptual contrastive loss (PCL): at each frozen feature tap the L1
  distance to the clean image is divided by the L1 distance to the rainy
  image, pulling the restoration toward the positive and away from the
  negative;
* perceptual image similarity loss (LPISL): squared distance between
  channel-unit-normalized features of resized images, summed over taps.

The feature extractor is a frozen VGG-16-style conv stack. Pretrained weights
can be supplied from a local file; the seeded-random mode gives a fixed random
basis that keeps every contract testable offline.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError, InputError, PretrainedWeightsUnavailable
from .metrics import ssim
from .segmentation import _cache_lookup, focal_seg_loss

# VGG-16 conv plan: widths per conv, with 2x2 max-pools after these ordinals.
VGG16_WIDTHS = (64, 64, 128, 128, 256, 256, 256, 512, 512, 512, 512, 512, 512)
VGG16_POOL_AFTER = frozenset({2, 4, 7, 10, 13})
DEFAULT_TAPS = (2, 4, 7)  # relu1_2, relu2_2, relu3_3

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


class FeatureExtractor(nn.Module):
    """Frozen conv stack with hooks at chosen conv ordinals (1-based).

    Inputs are RGB in [0, 1]; ImageNet normalization is applied inside so
    callers never pre-normalize. The stack is built only as deep as the last
    tap. `widths` overrides the per-conv channel plan (same pooling
    positions), which keeps desk-scale tests cheap.
    """

    def __init__(self, taps=DEFAULT_TAPS, widths=None):
        super().__init__()
        taps = tuple(int(t) for t in taps)
        widths = VGG16_WIDTHS if widths is None else tuple(int(w) for w in widths)
        if not taps or sorted(taps) != list(taps) or len(set(taps)) != len(taps):
            raise ConfigError(f"taps must be strictly increasing conv ordinals, got {taps}")
        if taps[0] < 1 or taps[-1] > len(widths):
            raise ConfigError(f"taps {taps} outside the conv plan (1..{len(widths)})")
        self.taps = taps
        layers = []
        tap_strides = {}
        stride, in_ch = 1, 3
        for ordinal, width in enumerate(widths[:taps[-1]], start=1):
            layers.append(nn.Conv2d(in_ch, width, 3, padding=1))
            layers.append(nn.ReLU(inplace=False))
            in_ch = width
            tap_strides[ordinal] = stride
            if ordinal in VGG16_POOL_AFTER and ordinal < taps[-1]:
                layers.append(nn.MaxPool2d(2, 2))
                stride *= 2
        self.features = nn.Sequential(*layers)
        self.tap_strides = tuple(tap_strides[t] for t in taps)
        self.register_buffer("mean", torch.tensor(IMAGENET_MEAN).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor(IMAGENET_STD).view(1, 3, 1, 1))

    @property
    def min_input_size(self) -> int:
        # two pixels at the deepest tap's resolution
        return 2 * max(self.tap_strides)

    def extract(self, img: torch.Tensor) -> list[torch.Tensor]:
        squeeze = img.dim() == 3
        if squeeze:
            img = img.unsqueeze(0)
        if img.dim() != 4 or img.shape[1] != 3:
            raise InputError(f"expected (3, H, W) or (B, 3, H, W) image, got {tuple(img.shape)}")
        h, w = img.shape[-2:]
        if h < self.min_input_size or w < self.min_input_size:
            raise InputError(
                f"feature extraction needs at least {self.min_input_size}x"
                f"{self.min_input_size} pixels for taps {self.taps}, got {h}x{w}")
        x = (img - self.mean.to(img.dtype)) / self.std.to(img.dtype)
        outputs = []
        ordinal = 0
        for layer in self.features:
            x = layer(x)
            if isinstance(layer, nn.ReLU):
                ordinal += 1
                if ordinal in self.taps:
                    outputs.append(x.squeeze(0) if squeeze else x)
        return outputs

    forward = extract


def build_feature_extractor(mode: str = "seeded_random", taps=DEFAULT_TAPS,
                            widths=None, seed: int = 0,
                            weights_path: str | None = None) -> FeatureExtractor:
    """Construct and freeze an extractor.

    mode "pretrained_vgg16" loads torchvision's VGG-16 conv weights from
    `weights_path` or from $SAPNET_CACHE/vgg16.pth and requires the default
    widths; mode "seeded_random" draws Kaiming-scaled weights from `seed`.
    """
    fe = FeatureExtractor(taps, widths)
    if mode == "pretrained_vgg16":
        if widths is not None and tuple(widths) != VGG16_WIDTHS:
            raise ConfigError("pretrained_vgg16 requires the default width plan")
        path = weights_path or _cache_lookup("vgg16.pth")
        if path is None:
            raise PretrainedWeightsUnavailable(
                "pretrained_vgg16 weights not found: set loss.vgg_weights to a local "
                "state-dict file or place vgg16.pth under $SAPNET_CACHE; for offline "
                "runs use extractor=seeded_random instead")
        _load_vgg_convs(fe, path)
    elif mode == "seeded_random":
        gen = torch.Generator().manual_seed(seed)
        for m in fe.features:
            if isinstance(m, nn.Conv2d):
                fan_in = m.in_channels * 9
                m.weight.data = torch.empty_like(m.weight).normal_(
                    0.0, (2.0 / fan_in) ** 0.5, generator=gen)
                m.bias.data.zero_()
    else:
        raise ConfigError(f"unknown extractor mode: {mode!r}")
    fe.requires_grad_(False)
    fe.eval()
    return fe


def _load_vgg_convs(fe: FeatureExtractor, path: str) -> None:
    from torchvision.models import vgg16

    state = torch.load(path, map_location="cpu", weights_only=True)
    donor = vgg16(weights=None)
    donor.load_state_dict(state)
    donor_convs = [m for m in donor.features if isinstance(m, nn.Conv2d)]
    own_convs = [m for m in fe.features if isinstance(m, nn.Conv2d)]
    for own, src in zip(own_convs, donor_convs):
        own.weight.data.copy_(src.weight.data)
        own.bias.data.copy_(src.bias.data)


def extract_features(img: torch.Tensor, fe: FeatureExtractor) -> list[torch.Tensor]:
    return fe.extract(img)


@dataclass(frozen=True)
class LossWeights:
    lambda_ssim: float = 1.0
    lambda_seg: float = 0.1
    lambda_pcl: float = 0.1
    lambda_lpisl: float = 0.1
    omega: tuple[float, ...] = (0.25, 0.5, 1.0)

    def __post_init__(self):
        object.__setattr__(self, "omega", tuple(float(w) for w in self.omega))


@dataclass
class LossBreakdown:
    """Scalar tensors; total is always the literal weighted sum of the parts."""
    ssim_loss: torch.Tensor
    seg_loss: torch.Tensor
    pcl: torch.Tensor
    lpisl: torch.Tensor
    total: torch.Tensor


def negative_ssim_loss(restored: torch.Tensor, clean: torch.Tensor) -> torch.Tensor:
    """-SSIM(restored, clean); minimized at -1 for a perfect restoration."""
    return -ssim(restored, clean)


def _mean_l1(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return (a - b).abs().mean()


def pcl(restored: torch.Tensor, clean: torch.Tensor, rainy: torch.Tensor,
        fe: FeatureExtractor, omega=(0.25, 0.5, 1.0)) -> torch.Tensor:
    """Contrastive perceptual ratio summed over taps.

    Each tap contributes omega_i * L1(f(restored), f(clean)) /
    (L1(f(restored), f(rainy)) + 1e-7). Gradients flow only through the
    restored image; the clean and rainy feature paths are detached.
    """
    omega = tuple(float(w) for w in omega)
    if len(omega) != len(fe.taps):
        raise ConfigError(f"{len(omega)} omega weights for {len(fe.taps)} taps")
    feats_restored = fe.extract(restored)
    with torch.no_grad():
        feats_clean = fe.extract(clean)
        feats_rainy = fe.extract(rainy)
    total = restored.new_zeros(())
    for w, fr, fc, fn in zip(omega, feats_restored, feats_clean, feats_rainy):
        total = total + w * _mean_l1(fr, fc) / (_mean_l1(fr, fn) + 1e-7)
    return total


def lpisl(restored: torch.Tensor, clean: torch.Tensor, fe: FeatureExtractor,
          resize_to: int = 256) -> torch.Tensor:
    """Perceptual similarity on resized images.

    Both images are bilinearly resized to resize_to x resize_to, features are
    unit-normalized along channels, and squared differences are averaged over
    each tap's spatial grid then summed over taps. The clean path is detached.
    """
    if resize_to < fe.min_input_size:
        raise ConfigError(
            f"lpisl resize_to={resize_to} below the extractor minimum {fe.min_input_size}")

    def prep(x):
        if x.dim() == 3:
            x = x.unsqueeze(0)
        return F.interpolate(x, size=(resize_to, resize_to), mode="bilinear",
                             align_corners=False)

    feats_restored = fe.extract(prep(restored))
    with torch.no_grad():
        feats_clean = fe.extract(prep(clean))
    total = restored.new_zeros(())
    for fr, fc in zip(feats_restored, feats_clean):
        diff = F.normalize(fr, dim=-3, eps=1e-12) - F.normalize(fc, dim=-3, eps=1e-12)
        total = total + diff.pow(2).sum(dim=-3).mean()
    return total


def total_loss(restored: torch.Tensor, clean: torch.Tensor, rainy: torch.Tensor,
               seg_probs: torch.Tensor | None, fe: FeatureExtractor | None,
               weights: LossWeights = LossWeights(),
               lpisl_resize: int = 256) -> LossBreakdown:
    """Compose the four terms; terms with zero weight are skipped and enter
    the sum as exact zeros, so the breakdown identity still holds."""
    zero = restored.new_zeros(())
    ssim_term = negative_ssim_loss(restored, clean)
    seg_term = zero
    if weights.lambda_seg != 0.0:
        if seg_probs is None:
            raise ConfigError("lambda_seg is non-zero but no segmentation probabilities given")
        seg_term = focal_seg_loss(seg_probs)
    pcl_term = zero
    lpisl_term = zero
    if weights.lambda_pcl != 0.0 or weights.lambda_lpisl != 0.0:
        if fe is None:
            raise ConfigError("perceptual terms enabled but no feature extractor given")
    if weights.lambda_pcl != 0.0:
        pcl_term = pcl(restored, clean, rainy, fe, weights.omega)
    if weights.lambda_lpisl != 0.0:
        lpisl_term = lpisl(restored, clean, fe, lpisl_resize)
    total = (weights.lambda_ssim * ssim_term + weights.lambda_seg * seg_term
             + weights.lambda_pcl * pcl_term + weights.lambda_lpisl * lpisl_term)
    return LossBreakdown(ssim_term, seg_term, pcl_term, lpisl_term, total)
