"""Paired rainy/clean data: loading, cropping, and synthetic rain.

Pairs come either from two directories with identical filenames or from a
tab-separated manifest of (rainy_path, clean_path) rows. Images are RGB float
tensors in [0, 1], shape (3, H, W). All randomness is explicit: cropping takes
a numpy Generator, rain synthesis takes a seed.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .errors import InputError

IMAGE_EXTENSIONS = {".png", ".jpg", ".jpeg"}


@dataclass
class PairedSample:
    rainy: torch.Tensor
    clean: torch.Tensor
    id: str


@dataclass
class DatasetSpec:
    rainy_dir: str
    clean_dir: str
    crop: int = 100
    manifest: str | None = None

    @classmethod
    def from_root(cls, root, crop: int = 100) -> "DatasetSpec":
        root = Path(root)
        manifest = root / "manifest.tsv"
        return cls(rainy_dir=str(root / "rainy"), clean_dir=str(root / "clean"),
                   crop=crop, manifest=str(manifest) if manifest.is_file() else None)


def load_image(path) -> torch.Tensor:
    """Decode to a (3, H, W) float32 tensor in [0, 1]."""
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    except FileNotFoundError:
        raise InputError(f"image not found: {path}") from None
    except Exception as exc:
        raise InputError(f"cannot decode image {path}: {exc}") from None
    return torch.from_numpy(arr).permute(2, 0, 1).contiguous()


def save_image(img: torch.Tensor, path) -> None:
    """Clamp to [0, 1], quantize to 8 bits, write PNG/JPEG by extension."""
    if img.dim() != 3 or img.shape[0] != 3:
        raise InputError(f"expected a (3, H, W) image, got {tuple(img.shape)}")
    arr = (img.detach().clamp(0.0, 1.0) * 255.0).round().byte()
    Image.fromarray(arr.permute(1, 2, 0).cpu().numpy()).save(path)


def _listing(directory: str) -> dict[str, Path]:
    d = Path(directory)
    if not d.is_dir():
        raise InputError(f"not a directory: {directory}")
    return {p.name: p for p in sorted(d.iterdir())
            if p.is_file() and p.suffix.lower() in IMAGE_EXTENSIONS}


def load_pairs(spec: DatasetSpec) -> list[PairedSample]:
    """Materialize all pairs, ordered lexicographically by rainy filename."""
    if spec.manifest:
        rows = _manifest_rows(spec.manifest)
    else:
        rainy = _listing(spec.rainy_dir)
        clean = _listing(spec.clean_dir)
        orphans = sorted(set(rainy) ^ set(clean))
        if orphans:
            raise InputError(f"unpaired files: {', '.join(orphans)}")
        rows = [(rainy[name], clean[name]) for name in sorted(rainy)]
    return [PairedSample(load_image(r), load_image(c), Path(r).name) for r, c in rows]


def _manifest_rows(manifest: str) -> list[tuple[Path, Path]]:
    base = Path(manifest).parent
    rows = []
    try:
        lines = Path(manifest).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise InputError(f"cannot read manifest {manifest}: {exc}") from None
    for lineno, line in enumerate(lines, start=1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise InputError(f"{manifest}:{lineno}: expected 'rainy<TAB>clean', got {line!r}")
        rainy, clean = ((base / p).resolve() if not os.path.isabs(p) else Path(p)
                        for p in (s.strip() for s in parts))
        rows.append((rainy, clean))
    rows.sort(key=lambda rc: rc[0].name)
    return rows


def random_crop_pair(sample: PairedSample, size: int,
                     rng: np.random.Generator) -> PairedSample:
    """Identical random window from both images; the generator advances."""
    _, h, w = sample.rainy.shape
    if sample.rainy.shape != sample.clean.shape:
        raise InputError(
            f"pair {sample.id}: rainy {tuple(sample.rainy.shape)} vs clean "
            f"{tuple(sample.clean.shape)}")
    if h < size or w < size:
        raise InputError(f"pair {sample.id}: image {h}x{w} smaller than crop {size}")
    top = int(rng.integers(0, h - size + 1))
    left = int(rng.integers(0, w - size + 1))
    return PairedSample(
        sample.rainy[:, top:top + size, left:left + size],
        sample.clean[:, top:top + size, left:left + size],
        sample.id)


def synth_rain(clean: torch.Tensor, streaks: int = 80, angle_deg: float = -15.0,
               length_px: float = 12.0, intensity: float = 0.8,
               seed: int = 0) -> torch.Tensor:
    """Overlay additive white rain streaks; deterministic for a given seed.

    Streaks are anti-aliased line segments of roughly `length_px` pixels tilted
    `angle_deg` from vertical, with per-streak brightness jitter scaled by
    `intensity`. The result is clamped to [0, 1].
    """
    if clean.dim() != 3 or clean.shape[0] != 3:
        raise InputError(f"expected a (3, H, W) image, got {tuple(clean.shape)}")
    if not 0.0 <= intensity <= 1.0:
        raise InputError(f"intensity must be in [0, 1], got {intensity}")
    _, h, w = clean.shape
    rng = np.random.default_rng(seed)
    rain = np.zeros((h, w), dtype=np.float64)
    theta = np.deg2rad(angle_deg)
    direction = np.array([np.cos(theta), np.sin(theta)])  # (d_row, d_col), 0 deg = vertical
    steps = max(2, int(round(length_px)) + 1)
    offsets = np.linspace(-length_px / 2.0, length_px / 2.0, steps)
    for _ in range(streaks):
        center = rng.uniform(0.0, [h - 1.0, w - 1.0])
        amp = intensity * (0.6 + 0.4 * rng.random())
        for t in offsets:
            r, c = center + t * direction
            r0, c0 = int(np.floor(r)), int(np.floor(c))
            fr, fc = r - r0, c - c0
            for dr, dc, wgt in ((0, 0, (1 - fr) * (1 - fc)), (0, 1, (1 - fr) * fc),
                                (1, 0, fr * (1 - fc)), (1, 1, fr * fc)):
                rr, cc = r0 + dr, c0 + dc
                if 0 <= rr < h and 0 <= cc < w:
                    rain[rr, cc] = max(rain[rr, cc], amp * wgt)
    overlay = torch.from_numpy(rain).to(clean.dtype)
    return (clean + overlay.unsqueeze(0)).clamp(0.0, 1.0)
