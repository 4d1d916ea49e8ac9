"""Parameterized building blocks for the two-stream inpainting generator.

Every block is a pure function of (parameters, inputs): there is no hidden
state, normalization statistics are computed per call, and blocks can be
evaluated concurrently on disjoint inputs.
"""

from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigurationError, InputError

LEAKY_SLOPE = 0.2
INSTANCE_NORM_EPS = 1e-5


def leaky_relu(x: torch.Tensor) -> torch.Tensor:
    return F.leaky_relu(x, LEAKY_SLOPE)


def init_conv_(conv: nn.Conv2d, gen: torch.Generator | None = None) -> None:
    """Kaiming fan-in init (leaky-relu gain), zero bias, optional explicit RNG."""
    fan_in = conv.in_channels // conv.groups * conv.kernel_size[0] * conv.kernel_size[1]
    gain = math.sqrt(2.0 / (1.0 + LEAKY_SLOPE ** 2))
    std = gain / math.sqrt(fan_in)
    with torch.no_grad():
        conv.weight.normal_(0.0, std, generator=gen)
        if conv.bias is not None:
            conv.bias.zero_()


def _check_finite(x: torch.Tensor, what: str) -> None:
    if not torch.isfinite(x).all():
        raise InputError(f"{what} contains non-finite entries")


class GatedUnit(nn.Module):
    """Sigmoid gate on a feature map: ``gate = sigmoid(lrelu(conv3x3(x)))``.

    Returns ``(gate * x, gate)``; the gate map is kept for diagnostics.
    ``gate_override`` is a test hook: when set, the gate map is replaced by
    that constant (bypassing the sigmoid) so information flow can be cut.
    """

    def __init__(self, channels: int):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, 3, stride=1, padding=1)
        init_conv_(self.conv)
        self.gate_override: float | None = None

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        if x.shape[1] != self.conv.in_channels:
            raise ConfigurationError(
                f"gated unit built for {self.conv.in_channels} channels, got {x.shape[1]}"
            )
        _check_finite(x, "gated unit input")
        if self.gate_override is not None:
            gate = torch.full_like(x, self.gate_override)
        else:
            gate = torch.sigmoid(leaky_relu(self.conv(x)))
        return gate * x, gate


class ChannelAttention(nn.Module):
    """Per-channel attention: ``sigmoid(MLP(global_avg_pool(f)))``.

    The MLP is two 1x1 convs C -> C/r -> C with a ReLU between. Output shape
    (B, C, 1, 1), entries in (0, 1).
    """

    def __init__(self, channels: int, reduction: int = 4):
        super().__init__()
        if channels % reduction != 0:
            raise ConfigurationError(
                f"channel count {channels} not divisible by reduction {reduction}"
            )
        hidden = channels // reduction
        self.fc1 = nn.Conv2d(channels, hidden, 1)
        self.fc2 = nn.Conv2d(hidden, channels, 1)
        init_conv_(self.fc1)
        init_conv_(self.fc2)

    def forward(self, f: torch.Tensor) -> torch.Tensor:
        pooled = f.mean(dim=(2, 3), keepdim=True)
        return torch.sigmoid(self.fc2(F.relu(self.fc1(pooled))))


class SpatialAttention(nn.Module):
    """Per-pixel attention from channel statistics.

    The per-pixel mean and max over channels are concatenated into a
    2-channel map and passed through a 5x5 conv; output (B, 1, H, W) in (0, 1).
    """

    def __init__(self):
        super().__init__()
        self.conv = nn.Conv2d(2, 1, 5, stride=1, padding=2)
        init_conv_(self.conv)

    def forward(self, f: torch.Tensor) -> torch.Tensor:
        if f.shape[2] < 1 or f.shape[3] < 1:
            raise InputError(f"spatial attention needs H, W >= 1, got {tuple(f.shape)}")
        mean_map = f.mean(dim=1, keepdim=True)
        max_map = f.max(dim=1, keepdim=True).values
        return torch.sigmoid(self.conv(torch.cat([mean_map, max_map], dim=1)))


class AdaptiveFusionBlock(nn.Module):
    """Fuses detail-stream and structure-stream decoder features.

    entry:  F = lrelu(conv1x1(cat(x_dec, s_dec)))
    branches: F_ch = CA(F) * F,  F_sp = SA(F) * F
    output: alpha * F_ch + (1 - alpha) * F_sp

    ``alpha = sigmoid(blend_raw)`` keeps the output a convex combination of
    the two branches; blend_raw starts at 0 (alpha = 0.5) and is trainable.
    """

    def __init__(self, in_detail: int, in_structure: int, out_channels: int,
                 reduction: int = 4):
        super().__init__()
        self.entry = nn.Conv2d(in_detail + in_structure, out_channels, 1)
        init_conv_(self.entry)
        self.channel_att = ChannelAttention(out_channels, reduction)
        self.spatial_att = SpatialAttention()
        self.blend_raw = nn.Parameter(torch.zeros(()))

    @property
    def blend(self) -> torch.Tensor:
        return torch.sigmoid(self.blend_raw)

    def forward(self, x_dec: torch.Tensor, s_dec: torch.Tensor) -> torch.Tensor:
        if x_dec.shape[0] != s_dec.shape[0] or x_dec.shape[2:] != s_dec.shape[2:]:
            raise InputError(
                f"fusion inputs disagree spatially: {tuple(x_dec.shape)} vs {tuple(s_dec.shape)}"
            )
        fused = leaky_relu(self.entry(torch.cat([x_dec, s_dec], dim=1)))
        f_ch = self.channel_att(fused) * fused
        f_sp = self.spatial_att(fused) * fused
        alpha = self.blend
        return alpha * f_ch + (1.0 - alpha) * f_sp


class ConcatFusion(nn.Module):
    """Ablation stand-in for the adaptive fusion block: concat + 1x1 conv."""

    def __init__(self, in_detail: int, in_structure: int, out_channels: int):
        super().__init__()
        self.entry = nn.Conv2d(in_detail + in_structure, out_channels, 1)
        init_conv_(self.entry)

    def forward(self, x_dec: torch.Tensor, s_dec: torch.Tensor) -> torch.Tensor:
        if x_dec.shape[0] != s_dec.shape[0] or x_dec.shape[2:] != s_dec.shape[2:]:
            raise InputError(
                f"fusion inputs disagree spatially: {tuple(x_dec.shape)} vs {tuple(s_dec.shape)}"
            )
        return leaky_relu(self.entry(torch.cat([x_dec, s_dec], dim=1)))


class ResidualDilatedBlock(nn.Module):
    """Residual block of two 3x3 dilation-2 convs; shape preserving.

    out = x + conv_d2(lrelu(norm(conv_d2(x)))). ``normalize=False`` swaps the
    instance norm for an identity, used by receptive-field probes (instance
    norm couples all pixels through its spatial statistics).
    """

    def __init__(self, channels: int, normalize: bool = True):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=2, dilation=2)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=2, dilation=2)
        init_conv_(self.conv1)
        init_conv_(self.conv2)
        self.norm = (
            nn.InstanceNorm2d(channels, eps=INSTANCE_NORM_EPS, affine=True)
            if normalize else nn.Identity()
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[1] != self.conv1.in_channels:
            raise ConfigurationError(
                f"residual block built for {self.conv1.in_channels} channels, got {x.shape[1]}"
            )
        return x + self.conv2(leaky_relu(self.norm(self.conv1(x))))
