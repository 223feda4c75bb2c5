"""Channel attention blocks.

Three gated variants plus a pass-through:

* ``se``   - squeeze-excitation: gate = sigmoid(MLP(avgpool(x)))
* ``ca``   - convolutional-block-style channel attention: the same MLP is
  applied to the average- and max-pooled descriptors and the two outputs are
  summed before the sigmoid.
* ``cra``  - channel residual attention: the raw average-pooled descriptor
  skips around the MLP and is added back before the sigmoid,
  gate = sigmoid(avg + MLP(avg)).
* ``none`` - identity.

All gates are per-channel scalars broadcast over the spatial grid.
"""

from __future__ import annotations

import enum

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError, InputError, NumericError


class AttentionKind(str, enum.Enum):
    SE = "se"
    CA = "ca"
    CRA = "cra"
    NONE = "none"


def reduced_width(channels: int, reduction: int) -> int:
    """Bottleneck width of the gating MLP; never collapses below one unit."""
    if channels < 1 or reduction < 1:
        raise ConfigError(f"channels and reduction must be >= 1, got {channels}, {reduction}")
    return max(1, -(-channels // reduction))


class ChannelAttention(nn.Module):
    """Per-channel gating with a selectable descriptor path.

    :param channels: number of input feature channels
    :param kind: one of AttentionKind or its string value
    :param reduction: bottleneck reduction ratio of the shared MLP
    """

    def __init__(self, channels: int, kind: AttentionKind | str = AttentionKind.CRA,
                 reduction: int = 16):
        super().__init__()
        try:
            kind = AttentionKind(kind)
        except ValueError:
            raise ConfigError(f"unknown attention kind: {kind!r}") from None
        self.channels = channels
        self.kind = kind
        self.reduction = reduction
        if kind is not AttentionKind.NONE:
            hidden = reduced_width(channels, reduction)
            self.fc_reduce = nn.Linear(channels, hidden)
            self.fc_expand = nn.Linear(hidden, channels)

    def _mlp(self, descriptor: torch.Tensor) -> torch.Tensor:
        return self.fc_expand(F.relu(self.fc_reduce(descriptor)))

    def gate(self, x: torch.Tensor) -> torch.Tensor:
        """Gating vector, shape (B, C), every entry strictly inside (0, 1)."""
        self._check(x)
        if self.kind is AttentionKind.NONE:
            return x.new_ones(x.shape[0], x.shape[1])
        avg = x.mean(dim=(2, 3))
        if self.kind is AttentionKind.SE:
            pre = self._mlp(avg)
        elif self.kind is AttentionKind.CA:
            pre = self._mlp(avg) + self._mlp(x.amax(dim=(2, 3)))
        else:  # CRA: the pooled descriptor itself skips into the sigmoid
            pre = avg + self._mlp(avg)
        return torch.sigmoid(pre)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if self.kind is AttentionKind.NONE:
            self._check(x)
            return x
        g = self.gate(x)
        return x * g[:, :, None, None]

    def _check(self, x: torch.Tensor) -> None:
        if x.dim() != 4:
            raise InputError(f"attention expects (B, C, H, W) input, got shape {tuple(x.shape)}")
        if x.shape[1] != self.channels:
            raise ConfigError(
                f"attention built for {self.channels} channels, input has {x.shape[1]}")
        if not torch.isfinite(x).all():
            raise NumericError("non-finite values in attention input")
