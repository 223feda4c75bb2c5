"""Progressive recurrent derain network.

A single progressive dilated unit (PDU) is applied T times with shared
weights. Each pass takes the previous estimate concatenated with the rainy
input, updates a ConvLSTM state, pushes the hidden state through a chain of
dilated residual blocks, and projects back to a 3-channel image:

    x_0 = rainy
    s_t = lstm(f_in(cat(x_{t-1}, rainy)), s_{t-1})
    x_t = f_out(res_chain(s_t.hidden))

Stage count is a pure inference-time knob: the serialized weights contain
exactly one unit regardless of how many stages are run.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import NamedTuple

import torch
import torch.nn.functional as F
from torch import nn

from .attention import AttentionKind, ChannelAttention, reduced_width
from .errors import ConfigError, InputError, NumericError


@dataclass(frozen=True)
class ModelConfig:
    """Static architecture description; everything the weights depend on."""

    channels: int = 32
    kernel: int = 3
    dilations: tuple[int, ...] = (1, 2, 4, 8, 16)
    stages: int = 6
    attention: AttentionKind = AttentionKind.CRA
    reduction: int = 16
    block_repeats: int = 2

    def __post_init__(self):
        object.__setattr__(self, "dilations", tuple(int(d) for d in self.dilations))
        object.__setattr__(self, "attention", AttentionKind(self.attention))
        if self.channels < 1:
            raise ConfigError(f"channels must be >= 1, got {self.channels}")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ConfigError(f"kernel must be odd and positive, got {self.kernel}")
        if not self.dilations or any(d < 1 for d in self.dilations):
            raise ConfigError(f"dilations must be a non-empty list of ints >= 1, got {self.dilations}")
        if self.stages < 1:
            raise ConfigError(f"stages must be >= 1, got {self.stages}")
        if self.reduction < 1:
            raise ConfigError(f"reduction must be >= 1, got {self.reduction}")
        if self.block_repeats < 1:
            raise ConfigError(f"block_repeats must be >= 1, got {self.block_repeats}")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["dilations"] = list(self.dilations)
        d["attention"] = self.attention.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown model config fields: {sorted(extra)}")
        return cls(**d)


class RecurrentState(NamedTuple):
    hidden: torch.Tensor
    cell: torch.Tensor


class ConvLSTMCell(nn.Module):
    """Convolutional LSTM with per-channel peephole terms.

    Input and forget gates peek at the previous cell state, the output gate
    at the updated one; each peephole is a learnable per-channel vector
    applied elementwise (initialised to zero).
    """

    def __init__(self, channels: int, kernel: int = 3):
        super().__init__()
        pad = kernel // 2
        self.channels = channels
        self.gate_input = nn.Conv2d(2 * channels, channels, kernel, padding=pad)
        self.gate_forget = nn.Conv2d(2 * channels, channels, kernel, padding=pad)
        self.gate_output = nn.Conv2d(2 * channels, channels, kernel, padding=pad)
        self.gate_cell = nn.Conv2d(2 * channels, channels, kernel, padding=pad)
        self.peep_input = nn.Parameter(torch.zeros(channels))
        self.peep_forget = nn.Parameter(torch.zeros(channels))
        self.peep_output = nn.Parameter(torch.zeros(channels))

    def forward(self, x: torch.Tensor, state: RecurrentState | None = None) -> RecurrentState:
        if x.dim() != 4 or x.shape[1] != self.channels:
            raise InputError(
                f"lstm expects (B, {self.channels}, H, W) input, got shape {tuple(x.shape)}")
        if state is None:
            zeros = torch.zeros_like(x)
            state = RecurrentState(zeros, zeros.clone())
        h, c = state
        if h.shape != x.shape or c.shape != x.shape:
            raise InputError(
                f"state shape {tuple(h.shape)}/{tuple(c.shape)} does not match input {tuple(x.shape)}")
        xh = torch.cat([x, h], dim=1)
        peep = lambda v: v.view(1, -1, 1, 1)
        i = torch.sigmoid(self.gate_input(xh) + peep(self.peep_input) * c)
        f = torch.sigmoid(self.gate_forget(xh) + peep(self.peep_forget) * c)
        c_new = f * c + i * torch.tanh(self.gate_cell(xh))
        o = torch.sigmoid(self.gate_output(xh) + peep(self.peep_output) * c_new)
        return RecurrentState(o * torch.tanh(c_new), c_new)


class ResidualBlock(nn.Module):
    """repeats x [dilated conv -> channel attention -> ReLU] with an identity
    skip around the whole block. Padding keeps the spatial size constant."""

    def __init__(self, channels: int, dilation: int, kernel: int,
                 attention: AttentionKind, reduction: int, repeats: int):
        super().__init__()
        self.dilation = dilation
        pad = dilation * (kernel // 2)
        self.convs = nn.ModuleList(
            nn.Conv2d(channels, channels, kernel, padding=pad, dilation=dilation)
            for _ in range(repeats))
        self.gates = nn.ModuleList(
            ChannelAttention(channels, attention, reduction) for _ in range(repeats))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        y = x
        for conv, gate in zip(self.convs, self.gates):
            y = F.relu(gate(conv(y)))
        return x + y


class DerainNet(nn.Module):
    """The progressive dilated unit plus the stage loop that reuses it."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        pad = cfg.kernel // 2
        self.conv_in = nn.Sequential(
            nn.Conv2d(6, cfg.channels, cfg.kernel, padding=pad), nn.ReLU())
        self.lstm = ConvLSTMCell(cfg.channels, cfg.kernel)
        self.blocks = nn.ModuleList(
            ResidualBlock(cfg.channels, d, cfg.kernel, cfg.attention,
                          cfg.reduction, cfg.block_repeats)
            for d in cfg.dilations)
        self.conv_out = nn.Conv2d(cfg.channels, 3, cfg.kernel, padding=pad)

    def pdu_forward(self, prev: torch.Tensor, rainy: torch.Tensor,
                    state: RecurrentState | None) -> tuple[torch.Tensor, RecurrentState]:
        """One shared-weight stage: refine `prev` conditioned on `rainy`."""
        for name, t in (("prev", prev), ("rainy", rainy)):
            if t.dim() != 4 or t.shape[1] != 3:
                raise InputError(f"{name} must have shape (B, 3, H, W), got {tuple(t.shape)}")
        if prev.shape != rainy.shape:
            raise InputError(
                f"stage inputs disagree: prev {tuple(prev.shape)} vs rainy {tuple(rainy.shape)}")
        feat = self.conv_in(torch.cat([prev, rainy], dim=1))
        state = self.lstm(feat, state)
        y = state.hidden
        for block in self.blocks:
            y = block(y)
        return self.conv_out(y), state

    def forward(self, rainy: torch.Tensor, stages: int | None = None) -> list[torch.Tensor]:
        """Run the recurrence; returns the estimate after every stage."""
        n = self.cfg.stages if stages is None else stages
        if n < 1:
            raise ConfigError(f"stages must be >= 1, got {n}")
        x = rainy
        state: RecurrentState | None = None
        outputs = []
        for t in range(1, n + 1):
            x, state = self.pdu_forward(x, rainy, state)
            if not torch.isfinite(x).all():
                raise NumericError(f"non-finite activations in stage {t} output")
            outputs.append(x)
        return outputs


@dataclass
class DerainOutput:
    final: torch.Tensor
    intermediates: list[torch.Tensor]


def build_derain_net(cfg: ModelConfig, seed: int | None = None) -> DerainNet:
    """Construct a net; with a seed the init is bitwise reproducible."""
    if seed is None:
        return DerainNet(cfg)
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        return DerainNet(cfg)


def derain(rainy: torch.Tensor, net: DerainNet, stages: int | None = None) -> DerainOutput:
    """Full restoration pass. Accepts (3, H, W) or (B, 3, H, W) in [0, 1]."""
    squeeze = rainy.dim() == 3
    if squeeze:
        rainy = rainy.unsqueeze(0)
    if rainy.dim() != 4 or rainy.shape[1] != 3:
        raise InputError(f"expected a (3, H, W) or (B, 3, H, W) image, got {tuple(rainy.shape)}")
    outs = net(rainy, stages)
    if squeeze:
        outs = [o.squeeze(0) for o in outs]
    return DerainOutput(final=outs[-1], intermediates=outs)


def parameter_count(cfg: ModelConfig) -> int:
    """Exact number of learnable scalars for a config (stage count excluded
    by construction: stages share the single unit's weights)."""
    net = DerainNet(cfg)
    return sum(p.numel() for p in net.parameters())


def receptive_field(cfg: ModelConfig) -> int:
    """Side length of the theoretical receptive field of one stage.

    Every conv with kernel k and dilation d grows the field by (k-1)*d.
    The four LSTM gate convs sit in parallel, so they widen the field once;
    serially the stage is: input conv, gate conv, block_repeats * one conv
    per dilation, output conv. Channel attention is excluded: its global
    pooling couples all positions, which is exactly why the footprint
    measurement disables it.
    """
    per_side = cfg.kernel // 2
    taps = 2 * (1 + 1 + cfg.block_repeats * sum(cfg.dilations) + 1)
    return 1 + per_side * taps
