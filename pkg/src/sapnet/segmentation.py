"""Frozen background-segmentation branch.

A 4-stage bottom-up encoder (cumulative strides 4/8/16/32) feeds an FPN-style
top-down decoder: 1x1 laterals to 128 channels, bilinear x2 upsampling with
concatenation and two 3x3 smoothing convs per stair, then a 1x1 head that maps
the 512-channel concatenation of all four stairs (brought to the finest
resolution) to per-class logits. Softmax over classes gives the probability
map, upsampled to input resolution.

The branch is never trained here: every parameter is frozen, but gradients
still flow through it to whatever image is segmented. The focal confidence
loss below turns the per-pixel max class probability into a training signal
that rewards confident, sharp segmentations of the restored image.
"""

from __future__ import annotations

import enum
import os
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError, InputError, NumericError, PretrainedWeightsUnavailable

SEG_STRIDE = 32  # deepest encoder stride; inputs are padded to multiples of this
_FPN_WIDTH = 128


class EncoderKind(str, enum.Enum):
    SEEDED_RANDOM = "seeded_random"
    PRETRAINED_RESNET101 = "pretrained_resnet101"


@dataclass(frozen=True)
class SegConfig:
    num_classes: int = 21
    decoder_init_std: float = 0.05
    encoder: EncoderKind = EncoderKind.SEEDED_RANDOM
    encoder_weights: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "encoder", EncoderKind(self.encoder))
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        if not self.decoder_init_std > 0:
            raise ConfigError(f"decoder_init_std must be > 0, got {self.decoder_init_std}")


class SmallEncoder(nn.Module):
    """Compact 4-stage conv encoder used for the seeded-random mode."""

    out_channels = (32, 64, 128, 128)

    def __init__(self):
        super().__init__()
        w = self.out_channels
        self.stage1 = nn.Sequential(
            nn.Conv2d(3, w[0], 3, stride=2, padding=1), nn.ReLU(),
            nn.Conv2d(w[0], w[0], 3, stride=2, padding=1), nn.ReLU())
        self.stage2 = nn.Sequential(nn.Conv2d(w[0], w[1], 3, stride=2, padding=1), nn.ReLU())
        self.stage3 = nn.Sequential(nn.Conv2d(w[1], w[2], 3, stride=2, padding=1), nn.ReLU())
        self.stage4 = nn.Sequential(nn.Conv2d(w[2], w[3], 3, stride=2, padding=1), nn.ReLU())

    def forward(self, x):
        c1 = self.stage1(x)
        c2 = self.stage2(c1)
        c3 = self.stage3(c2)
        c4 = self.stage4(c3)
        return [c1, c2, c3, c4]


class ResNetEncoder(nn.Module):
    """ResNet-101 trunk exposing the four residual stage outputs."""

    out_channels = (256, 512, 1024, 2048)

    def __init__(self, weights_path: str | None):
        super().__init__()
        from torchvision.models import resnet101

        net = resnet101(weights=None)
        if weights_path is not None:
            state = torch.load(weights_path, map_location="cpu", weights_only=True)
            net.load_state_dict(state)
        self.stem = nn.Sequential(net.conv1, net.bn1, net.relu, net.maxpool)
        self.layer1, self.layer2 = net.layer1, net.layer2
        self.layer3, self.layer4 = net.layer3, net.layer4

    def forward(self, x):
        x = self.stem(x)
        c1 = self.layer1(x)
        c2 = self.layer2(c1)
        c3 = self.layer3(c2)
        c4 = self.layer4(c3)
        return [c1, c2, c3, c4]


class FpnDecoder(nn.Module):
    def __init__(self, encoder_channels, num_classes: int):
        super().__init__()
        w = _FPN_WIDTH
        self.laterals = nn.ModuleList(nn.Conv2d(c, w, 1) for c in encoder_channels)
        # one smoothing pair per top-down merge (three merges for four stairs)
        self.smooths = nn.ModuleList(
            nn.Sequential(nn.Conv2d(2 * w, w, 3, padding=1), nn.ReLU(),
                          nn.Conv2d(w, w, 3, padding=1), nn.ReLU())
            for _ in range(len(encoder_channels) - 1))
        self.head = nn.Conv2d(len(encoder_channels) * w, num_classes, 1)

    def forward(self, feats):
        laterals = [lat(c) for lat, c in zip(self.laterals, feats)]
        stairs = [laterals[-1]]
        for lateral, smooth in zip(reversed(laterals[:-1]), reversed(self.smooths)):
            up = F.interpolate(stairs[0], size=lateral.shape[-2:], mode="bilinear",
                               align_corners=False)
            stairs.insert(0, smooth(torch.cat([up, lateral], dim=1)))
        finest = stairs[0].shape[-2:]
        pyramid = [stairs[0]] + [
            F.interpolate(s, size=finest, mode="bilinear", align_corners=False)
            for s in stairs[1:]]
        return self.head(torch.cat(pyramid, dim=1))


class SegmentationNet(nn.Module):
    """Encoder + FPN decoder producing per-pixel class probabilities."""

    def __init__(self, cfg: SegConfig, encoder: nn.Module):
        super().__init__()
        self.cfg = cfg
        self.encoder = encoder
        self.decoder = FpnDecoder(encoder.out_channels, cfg.num_classes)

    def forward(self, img: torch.Tensor) -> torch.Tensor:
        if img.dim() != 4 or img.shape[1] != 3:
            raise InputError(f"segmenter expects (B, 3, H, W), got {tuple(img.shape)}")
        if not torch.isfinite(img).all():
            raise NumericError("non-finite values in segmenter input")
        h, w = img.shape[-2:]
        padded = _pad_to_multiple(img, SEG_STRIDE)
        logits = self.decoder(self.encoder(padded))
        logits = F.interpolate(logits, size=padded.shape[-2:], mode="bilinear",
                               align_corners=False)
        top = (padded.shape[-2] - h) // 2
        left = (padded.shape[-1] - w) // 2
        logits = logits[..., top:top + h, left:left + w]
        return torch.softmax(logits, dim=1)


def _pad_to_multiple(img: torch.Tensor, multiple: int) -> torch.Tensor:
    h, w = img.shape[-2:]
    ph = (-h) % multiple
    pw = (-w) % multiple
    if ph == 0 and pw == 0:
        return img
    # split across both sides: reflect padding requires pad < dim on each side
    pad = (pw // 2, pw - pw // 2, ph // 2, ph - ph // 2)
    if max(pad[0], pad[1]) >= w or max(pad[2], pad[3]) >= h:
        raise InputError(
            f"image {h}x{w} too small to pad to a multiple of {multiple} by reflection")
    return F.pad(img, pad, mode="reflect")


def build_segmenter(cfg: SegConfig, seed: int = 0) -> SegmentationNet:
    """Build the frozen branch. Same config + seed => bitwise-identical weights."""
    gen = torch.Generator().manual_seed(seed)
    if cfg.encoder is EncoderKind.SEEDED_RANDOM:
        encoder = SmallEncoder()
        _kaiming_seeded(encoder, gen)
    else:
        path = cfg.encoder_weights or _cache_lookup("resnet101.pth")
        if path is None:
            raise PretrainedWeightsUnavailable(
                "pretrained_resnet101 weights not found: set seg.encoder_weights to a "
                "local state-dict file or place resnet101.pth under $SAPNET_CACHE; "
                "for offline runs use encoder=seeded_random instead")
        encoder = ResNetEncoder(path)
    net = SegmentationNet(cfg, encoder)
    for p in net.decoder.parameters():
        p.data = torch.empty_like(p).normal_(0.0, cfg.decoder_init_std, generator=gen)
    net.requires_grad_(False)
    net.eval()
    return net


def _kaiming_seeded(module: nn.Module, gen: torch.Generator) -> None:
    for m in module.modules():
        if isinstance(m, nn.Conv2d):
            fan_in = m.in_channels * m.kernel_size[0] * m.kernel_size[1]
            m.weight.data = torch.empty_like(m.weight).normal_(
                0.0, (2.0 / fan_in) ** 0.5, generator=gen)
            if m.bias is not None:
                m.bias.data.zero_()


def _cache_lookup(filename: str) -> str | None:
    cache = os.environ.get("SAPNET_CACHE")
    if cache:
        candidate = os.path.join(cache, filename)
        if os.path.isfile(candidate):
            return candidate
    return None


def segment(img: torch.Tensor, net: SegmentationNet) -> torch.Tensor:
    """Class probability map for (3, H, W) or (B, 3, H, W) input in [0, 1]."""
    squeeze = img.dim() == 3
    probs = net(img.unsqueeze(0) if squeeze else img)
    return probs.squeeze(0) if squeeze else probs


def focal_seg_loss(probs: torch.Tensor, alpha: float = 1.0, gamma: float = 2.0) -> torch.Tensor:
    """Focal penalty on per-pixel confidence.

    p is the maximum class probability at each pixel, clamped away from the
    log singularity; the loss is mean(-alpha * (1 - p)^gamma * log(p)). It is
    zero when the map is everywhere confident and grows as predictions on the
    restored image blur toward uniform.
    """
    if probs.dim() not in (3, 4):
        raise InputError(f"expected (n, H, W) or (B, n, H, W) probabilities, got {tuple(probs.shape)}")
    p = probs.amax(dim=-3)
    p = p.clamp(1e-7, 1.0 - 1e-7)
    return (-alpha * (1.0 - p) ** gamma * torch.log(p)).mean()
