"""Image quality metrics and the evaluation harness.

SSIM here is the single shared implementation: the differentiable training
loss negates it and the evaluation metric reads it out, so the two can never
drift apart. Convention: RGB in [0, 1] (data_range 1.0), 11x11 Gaussian
window with sigma 1.5, per-channel maps averaged over channels and over valid
(unpadded) window positions. PSNR is plain 10*log10(range^2 / MSE) over all
pixels and channels.

Different published implementations (luma-only, uniform windows, other data
ranges) shift PSNR by 1-2 dB and SSIM by a few points on the same images;
comparisons are only meaningful against scores computed with this module.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable

import torch
import torch.nn.functional as F

from .errors import InputError

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
_K1, _K2 = 0.01, 0.03


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA, *,
                    dtype=torch.float32, device=None) -> torch.Tensor:
    """Normalized 2-D Gaussian, shape (1, 1, size, size), summing to one."""
    half = (size - 1) / 2.0
    coords = torch.arange(size, dtype=dtype, device=device) - half
    g = torch.exp(-(coords ** 2) / (2.0 * sigma ** 2))
    window = g[:, None] * g[None, :]
    return (window / window.sum()).view(1, 1, size, size)


def _as_batched(a: torch.Tensor, b: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    if a.shape != b.shape:
        raise InputError(f"image shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")
    if a.dim() == 3:
        return a.unsqueeze(0), b.unsqueeze(0)
    if a.dim() == 4:
        return a, b
    raise InputError(f"expected (C, H, W) or (B, C, H, W) images, got {tuple(a.shape)}")


def ssim(a: torch.Tensor, b: torch.Tensor, data_range: float = 1.0) -> torch.Tensor:
    """Mean structural similarity as a 0-d tensor; differentiable in both inputs."""
    a, b = _as_batched(a, b)
    h, w = a.shape[-2:]
    if h < SSIM_WINDOW or w < SSIM_WINDOW:
        raise InputError(
            f"ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {h}x{w}")
    channels = a.shape[1]
    window = gaussian_window(dtype=a.dtype, device=a.device).expand(channels, 1, -1, -1)

    def wmean(x):
        return F.conv2d(x, window, groups=channels)

    mu_a, mu_b = wmean(a), wmean(b)
    var_a = wmean(a * a) - mu_a * mu_a
    var_b = wmean(b * b) - mu_b * mu_b
    cov = wmean(a * b) - mu_a * mu_b
    c1 = (_K1 * data_range) ** 2
    c2 = (_K2 * data_range) ** 2
    s = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / \
        ((mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2))
    return s.mean()


def ssim_metric(a: torch.Tensor, b: torch.Tensor, data_range: float = 1.0) -> float:
    return ssim(a, b, data_range).item()


def psnr(a: torch.Tensor, b: torch.Tensor, data_range: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; inf for identical images."""
    a, b = _as_batched(a, b)
    mse = (a.double() - b.double()).pow(2).mean().item()
    if mse == 0.0:
        return float("inf")
    return 10.0 * math.log10(data_range ** 2 / mse)


@dataclass
class EvalReport:
    per_image: list[tuple[str, float, float]] = field(default_factory=list)
    mean_psnr: float = 0.0
    mean_ssim: float = 0.0


def evaluate(restore: Callable[[torch.Tensor], torch.Tensor],
             pairs: Iterable) -> EvalReport:
    """Score a restoration function over (rainy, clean) pairs.

    `restore` maps a (3, H, W) rainy image to its restored counterpart; the
    output is clamped to [0, 1] before scoring. Rows keep the input order.
    """
    report = EvalReport()
    psnrs, ssims = [], []
    for sample in pairs:
        with torch.no_grad():
            out = restore(sample.rainy).clamp(0.0, 1.0)
        p = psnr(out, sample.clean)
        s = ssim_metric(out, sample.clean)
        report.per_image.append((sample.id, p, s))
        psnrs.append(p)
        ssims.append(s)
    if psnrs:
        report.mean_psnr = sum(psnrs) / len(psnrs)
        report.mean_ssim = sum(ssims) / len(ssims)
    return report


def format_report(report: EvalReport) -> str:
    """Tab-separated report: header, one row per image, and a MEAN row."""
    def fmt(p, s):
        ptxt = "inf" if math.isinf(p) else f"{p:.4f}"
        return f"{ptxt}\t{s:.6f}"

    lines = ["id\tpsnr_db\tssim"]
    for image_id, p, s in report.per_image:
        lines.append(f"{image_id}\t{fmt(p, s)}")
    lines.append(f"MEAN\t{fmt(report.mean_psnr, report.mean_ssim)}")
    return "\n".join(lines) + "\n"


def write_report(report: EvalReport, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(format_report(report))
