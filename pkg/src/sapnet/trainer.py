"""Training loop, LR schedule, checkpointing, and the step log.

Determinism contract: network init derives from the seed, and the data stream
of epoch e (shuffle order plus crop windows) derives from (seed, e) alone, so
a run resumed from an epoch-boundary checkpoint reproduces the uninterrupted
run exactly. Only the derain network is optimized; the segmentation branch and
the feature extractor stay frozen.

Log format: one line per step of space-separated key=value fields,

    epoch=0 step=0 ssim_loss=-0.123456 seg_loss=0.000000 pcl=0.000000 \
        lpisl=0.000000 total=-0.123456 lr=0.001 wall_time=0.041

`wall_time` (seconds spent in the step) is informational and excluded from
equality comparisons; everything else is deterministic.
"""

from __future__ import annotations

import dataclasses
import io
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .data import PairedSample, random_crop_pair
from .errors import CheckpointError, ConfigError, NumericError
from .losses import FeatureExtractor, LossBreakdown, LossWeights, total_loss
from .network import DerainNet, ModelConfig, build_derain_net
from .segmentation import SegmentationNet

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class TrainToggles:
    """Ablation switches. Loss toggles zero the matching weight; use_dilation
    collapses every dilation to 1; use_decay freezes the LR at its base."""
    use_seg: bool = True
    use_pcl: bool = True
    use_lpisl: bool = True
    use_dilation: bool = True
    use_decay: bool = True


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    batch_size: int = 12
    base_lr: float = 1e-3
    decay_epochs: tuple[int, ...] = (30, 50, 80)
    decay_factor: float = 0.2
    seed: int = 0
    toggles: TrainToggles = TrainToggles()

    def __post_init__(self):
        object.__setattr__(self, "decay_epochs", tuple(int(e) for e in self.decay_epochs))
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.base_lr > 0:
            raise ConfigError(f"base_lr must be > 0, got {self.base_lr}")
        if not 0.0 < self.decay_factor < 1.0:
            raise ConfigError(f"decay_factor must be in (0, 1), got {self.decay_factor}")
        if any(b <= a for a, b in zip(self.decay_epochs, self.decay_epochs[1:])):
            raise ConfigError(f"decay_epochs must be strictly increasing, got {self.decay_epochs}")


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    """Step schedule: multiply by decay_factor at every passed milestone."""
    if not cfg.toggles.use_decay:
        return cfg.base_lr
    passed = sum(1 for e in cfg.decay_epochs if e <= epoch)
    return cfg.base_lr * cfg.decay_factor ** passed


def effective_model_config(model_cfg: ModelConfig, toggles: TrainToggles) -> ModelConfig:
    if toggles.use_dilation:
        return model_cfg
    return dataclasses.replace(model_cfg, dilations=(1,) * len(model_cfg.dilations))


def effective_loss_weights(weights: LossWeights, toggles: TrainToggles) -> LossWeights:
    return dataclasses.replace(
        weights,
        lambda_seg=weights.lambda_seg if toggles.use_seg else 0.0,
        lambda_pcl=weights.lambda_pcl if toggles.use_pcl else 0.0,
        lambda_lpisl=weights.lambda_lpisl if toggles.use_lpisl else 0.0)


@dataclass
class TrainLogRecord:
    epoch: int
    step: int
    ssim_loss: float
    seg_loss: float
    pcl: float
    lpisl: float
    total: float
    lr: float
    wall_time: float

    def format_line(self) -> str:
        return (f"epoch={self.epoch} step={self.step} ssim_loss={self.ssim_loss:.8f} "
                f"seg_loss={self.seg_loss:.8f} pcl={self.pcl:.8f} lpisl={self.lpisl:.8f} "
                f"total={self.total:.8f} lr={self.lr:.6g} wall_time={self.wall_time:.3f}")

    @classmethod
    def parse_line(cls, line: str) -> "TrainLogRecord":
        fields = dict(part.split("=", 1) for part in line.split())
        return cls(epoch=int(fields["epoch"]), step=int(fields["step"]),
                   ssim_loss=float(fields["ssim_loss"]), seg_loss=float(fields["seg_loss"]),
                   pcl=float(fields["pcl"]), lpisl=float(fields["lpisl"]),
                   total=float(fields["total"]), lr=float(fields["lr"]),
                   wall_time=float(fields["wall_time"]))


@dataclass
class Checkpoint:
    net: DerainNet
    config: ModelConfig
    optimizer_state: dict
    epoch: int
    rng_seed: int


def save_checkpoint(path, net: DerainNet, optimizer: torch.optim.Optimizer,
                    epoch: int, rng_seed: int) -> None:
    """Serialize to the documented container; `epoch` counts completed epochs.

    The payload goes through an in-memory buffer so the archive layout never
    depends on the destination filename: identical state always produces
    identical bytes.
    """
    payload = {
        "version": CHECKPOINT_VERSION,
        "config": net.cfg.to_dict(),
        "derain_weights": net.state_dict(),
        "optimizer_state": optimizer.state_dict(),
        "epoch": epoch,
        "rng_seed": rng_seed,
    }
    buffer = io.BytesIO()
    torch.save(payload, buffer)
    Path(path).write_bytes(buffer.getvalue())


def load_checkpoint(path, expected_config: ModelConfig | None = None) -> Checkpoint:
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except FileNotFoundError:
        raise CheckpointError(f"checkpoint not found: {path}") from None
    if not isinstance(payload, dict) or payload.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"unsupported checkpoint version {payload.get('version') if isinstance(payload, dict) else '?'}"
            f" (expected {CHECKPOINT_VERSION})")
    cfg = ModelConfig.from_dict(payload["config"])
    if expected_config is not None and cfg != expected_config:
        diffs = [f.name for f in dataclasses.fields(ModelConfig)
                 if getattr(cfg, f.name) != getattr(expected_config, f.name)]
        raise CheckpointError(f"checkpoint config mismatch in fields: {', '.join(diffs)}")
    net = DerainNet(cfg)
    net.load_state_dict(payload["derain_weights"])
    return Checkpoint(net=net, config=cfg, optimizer_state=payload["optimizer_state"],
                      epoch=int(payload["epoch"]), rng_seed=int(payload["rng_seed"]))


@dataclass
class TrainResult:
    net: DerainNet
    log: list[TrainLogRecord] = field(default_factory=list)
    checkpoint_path: str | None = None


def train(pairs: list[PairedSample], model_cfg: ModelConfig, train_cfg: TrainConfig,
          segmenter: SegmentationNet | None = None,
          extractor: FeatureExtractor | None = None,
          loss_weights: LossWeights = LossWeights(),
          crop: int | None = None, lpisl_resize: int = 256,
          out_dir: str | None = None, resume_from: str | None = None) -> TrainResult:
    """Optimize the derain network on paired data.

    `crop=None` feeds whole images (all pairs must share a size per batch;
    with a crop every sample is cut to crop x crop). With `out_dir` set, a
    `checkpoint.pt` is rewritten after every epoch, `checkpoint_final.pt` on
    completion, and the step log goes to `train_log.txt`.
    """
    if not pairs:
        raise ConfigError("no training pairs given")
    toggles = train_cfg.toggles
    eff_model_cfg = effective_model_config(model_cfg, toggles)
    eff_weights = effective_loss_weights(loss_weights, toggles)
    if toggles.use_seg and segmenter is None and eff_weights.lambda_seg != 0.0:
        raise ConfigError("use_seg is on but no segmenter was given")
    if extractor is None and (eff_weights.lambda_pcl != 0.0 or eff_weights.lambda_lpisl != 0.0):
        raise ConfigError("perceptual terms are on but no feature extractor was given")

    start_epoch = 0
    if resume_from is not None:
        ckpt = load_checkpoint(resume_from, expected_config=eff_model_cfg)
        net = ckpt.net
        start_epoch = ckpt.epoch
        if start_epoch >= train_cfg.epochs:
            raise ConfigError(
                f"checkpoint already covers {start_epoch} epochs, nothing to resume "
                f"for epochs={train_cfg.epochs}")
    else:
        net = build_derain_net(eff_model_cfg, seed=train_cfg.seed)
    net.train()

    optimizer = torch.optim.Adam(net.parameters(), lr=train_cfg.base_lr,
                                 betas=(0.9, 0.999), eps=1e-8)
    if resume_from is not None:
        optimizer.load_state_dict(ckpt.optimizer_state)

    out_path = Path(out_dir) if out_dir is not None else None
    log_fh = None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)
        log_fh = open(out_path / "train_log.txt", "a", encoding="utf-8")

    result = TrainResult(net=net)
    global_step = start_epoch * _steps_per_epoch(len(pairs), train_cfg.batch_size)
    try:
        for epoch in range(start_epoch, train_cfg.epochs):
            lr = lr_at(epoch, train_cfg)
            for group in optimizer.param_groups:
                group["lr"] = lr
            rng = np.random.default_rng([train_cfg.seed, epoch])
            order = rng.permutation(len(pairs))
            for lo in range(0, len(order), train_cfg.batch_size):
                t0 = time.perf_counter()
                batch = [pairs[i] for i in order[lo:lo + train_cfg.batch_size]]
                if crop is not None:
                    batch = [random_crop_pair(s, crop, rng) for s in batch]
                rainy = torch.stack([s.rainy for s in batch])
                clean = torch.stack([s.clean for s in batch])

                restored = net(rainy)[-1]
                seg_probs = None
                if segmenter is not None and eff_weights.lambda_seg != 0.0:
                    seg_probs = segmenter(restored)
                bd = total_loss(restored, clean, rainy, seg_probs, extractor,
                                eff_weights, lpisl_resize)
                if not torch.isfinite(bd.total):
                    raise NumericError(
                        f"non-finite loss at step {global_step}: {_describe(bd)}")
                optimizer.zero_grad()
                bd.total.backward()
                optimizer.step()

                record = TrainLogRecord(
                    epoch=epoch, step=global_step,
                    ssim_loss=bd.ssim_loss.item(), seg_loss=bd.seg_loss.item(),
                    pcl=bd.pcl.item(), lpisl=bd.lpisl.item(), total=bd.total.item(),
                    lr=lr, wall_time=time.perf_counter() - t0)
                result.log.append(record)
                if log_fh is not None:
                    log_fh.write(record.format_line() + "\n")
                global_step += 1
            if out_path is not None:
                save_checkpoint(out_path / "checkpoint.pt", net, optimizer,
                                epoch + 1, train_cfg.seed)
        if out_path is not None:
            final = out_path / "checkpoint_final.pt"
            save_checkpoint(final, net, optimizer, train_cfg.epochs, train_cfg.seed)
            result.checkpoint_path = str(final)
    finally:
        if log_fh is not None:
            log_fh.close()
    net.eval()
    return result


def make_optimizer_snapshot(net: DerainNet, train_cfg: TrainConfig) -> torch.optim.Optimizer:
    """Fresh Adam over the net's parameters, for checkpointing outside train()."""
    return torch.optim.Adam(net.parameters(), lr=train_cfg.base_lr,
                            betas=(0.9, 0.999), eps=1e-8)


def _steps_per_epoch(n_pairs: int, batch_size: int) -> int:
    return -(-n_pairs // batch_size)


def _describe(bd: LossBreakdown) -> str:
    return (f"ssim_loss={bd.ssim_loss.item():.6g} seg_loss={bd.seg_loss.item():.6g} "
            f"pcl={bd.pcl.item():.6g} lpisl={bd.lpisl.item():.6g}")
