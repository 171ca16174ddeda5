"""Differentiable building blocks for every network in the pipeline.

Shape contracts (batch dimension implicit):

* ``Downsampler``:        (in_ch, H, W)  -> (out_ch, H/2, W/2)
* ``NonBottleneck1d``:    shape-preserving residual block of factorized convs
* ``DenseBlock``:         (in_ch, H, W)  -> (in_ch + num_modules*growth, H, W)
* ``Transition``:         (in_ch, H, W)  -> (out_ch, H/2, W/2)
* ``UpsamplerStage``:     (in_ch, H, W)  -> (out_ch, 2H, 2W)
* ``PatchDiscriminator``: (in_ch, H, W)  -> (1, H/2^scales, W/2^scales) logits
"""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigurationError, ContractError


class Downsampler(nn.Module):
    """Halve the resolution: concat of a stride-2 3x3 conv (out_ch - in_ch
    filters) and a 2x2 max-pool of the input, then BatchNorm and ReLU."""

    def __init__(self, in_ch: int, out_ch: int):
        super().__init__()
        if out_ch <= in_ch:
            raise ConfigurationError(f"downsampler needs out_ch > in_ch, got {in_ch}->{out_ch}")
        self.conv = nn.Conv2d(in_ch, out_ch - in_ch, 3, stride=2, padding=1)
        self.pool = nn.MaxPool2d(2, stride=2)
        # momentum=None keeps cumulative running stats: training alternates
        # weather domains per batch, so an EMA would track the last domain seen
        self.bn = nn.BatchNorm2d(out_ch, momentum=None)

    def forward(self, x):
        if x.shape[-1] % 2 or x.shape[-2] % 2:
            raise ContractError(f"downsampler input H,W must be even, got {tuple(x.shape[-2:])}")
        y = torch.cat([self.conv(x), self.pool(x)], dim=1)
        return F.relu(self.bn(y))


class NonBottleneck1d(nn.Module):
    """Residual module with two factorized conv pairs (3x1 then 1x3), the
    second pair dilated; shape-preserving."""

    def __init__(self, ch: int, dilation: int = 1, dropout: float = 0.0):
        super().__init__()
        if ch < 1 or dilation < 1:
            raise ConfigurationError(f"bad non-bottleneck config ch={ch} dilation={dilation}")
        if not 0.0 <= dropout < 1.0:
            raise ConfigurationError(f"dropout must be in [0,1), got {dropout}")
        d = dilation
        self.conv3x1_1 = nn.Conv2d(ch, ch, (3, 1), padding=(1, 0))
        self.conv1x3_1 = nn.Conv2d(ch, ch, (1, 3), padding=(0, 1))
        self.bn1 = nn.BatchNorm2d(ch, momentum=None)
        self.conv3x1_2 = nn.Conv2d(ch, ch, (3, 1), padding=(d, 0), dilation=(d, 1))
        self.conv1x3_2 = nn.Conv2d(ch, ch, (1, 3), padding=(0, d), dilation=(1, d))
        self.bn2 = nn.BatchNorm2d(ch, momentum=None)
        self.dropout = nn.Dropout2d(dropout)

    def forward(self, x):
        y = F.relu(self.conv3x1_1(x))
        y = F.relu(self.bn1(self.conv1x3_1(y)))
        y = F.relu(self.conv3x1_2(y))
        y = self.bn2(self.conv1x3_2(y))
        y = self.dropout(y)
        return F.relu(y + x)


class DenseBlock(nn.Module):
    """Densely connected 3x3 conv modules: module k consumes the block input
    concatenated with all previous module outputs and emits ``growth``
    channels (conv, BN, ReLU)."""

    def __init__(self, in_ch: int, num_modules: int, growth: int):
        super().__init__()
        if num_modules < 1 or growth < 1:
            raise ConfigurationError(f"bad dense block: modules={num_modules} growth={growth}")
        self.modules_list = nn.ModuleList(
            nn.Sequential(
                nn.Conv2d(in_ch + k * growth, growth, 3, padding=1),
                nn.BatchNorm2d(growth, momentum=None),
                nn.ReLU(),
            )
            for k in range(num_modules)
        )
        self.out_channels = in_ch + num_modules * growth

    def forward(self, x):
        feats = [x]
        for module in self.modules_list:
            feats.append(module(torch.cat(feats, dim=1)))
        return torch.cat(feats, dim=1)


class Transition(nn.Module):
    """1x1 conv to ``out_ch`` followed by a 2x2 average pool, stride 2."""

    def __init__(self, in_ch: int, out_ch: int):
        super().__init__()
        self.conv = nn.Conv2d(in_ch, out_ch, 1)
        self.pool = nn.AvgPool2d(2, stride=2)

    def forward(self, x):
        if x.shape[-1] % 2 or x.shape[-2] % 2:
            raise ContractError(f"transition input H,W must be even, got {tuple(x.shape[-2:])}")
        return self.pool(self.conv(x))


class UpsamplerStage(nn.Module):
    """Double the resolution: stride-2 3x3 transpose conv, BN, ReLU, and
    optionally two shape-preserving refinement modules. An optional skip map
    (same shape as the upsampled output) is summed in before refinement."""

    def __init__(self, in_ch: int, out_ch: int, with_refinement: bool = True):
        super().__init__()
        self.up = nn.Sequential(
            nn.ConvTranspose2d(in_ch, out_ch, 3, stride=2, padding=1, output_padding=1),
            nn.BatchNorm2d(out_ch, momentum=None),
            nn.ReLU(),
        )
        self.refine = (
            nn.Sequential(NonBottleneck1d(out_ch), NonBottleneck1d(out_ch))
            if with_refinement
            else nn.Identity()
        )

    def forward(self, x, skip=None):
        y = self.up(x)
        if skip is not None:
            y = fuse(y, skip)
        return self.refine(y)


def fuse(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Elementwise sum of two feature maps of identical shape."""
    if a.shape != b.shape:
        raise ContractError(f"fuse shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    return a + b


class PatchDiscriminator(nn.Module):
    """PatchGAN-style discriminator: stride-2 4x4 convs doubling the width at
    each scale (capped at 8x base), leaky ReLU 0.2, instance norm after all
    but the first scale, and a final 1-channel conv emitting patch logits."""

    def __init__(self, in_ch: int, base_width: int = 16, num_scales: int = 3):
        super().__init__()
        if base_width < 1 or num_scales < 1:
            raise ConfigurationError(f"bad discriminator: base={base_width} scales={num_scales}")
        self.num_scales = num_scales
        layers = []
        prev, width = in_ch, base_width
        for scale in range(num_scales):
            layers.append(nn.Conv2d(prev, width, 4, stride=2, padding=1))
            if scale > 0:
                layers.append(nn.InstanceNorm2d(width))
            layers.append(nn.LeakyReLU(0.2))
            prev, width = width, min(width * 2, base_width * 8)
        layers.append(nn.Conv2d(prev, 1, 3, padding=1))
        self.net = nn.Sequential(*layers)

    def forward(self, x):
        step = 2 ** self.num_scales
        if x.shape[-1] % step or x.shape[-2] % step:
            raise ContractError(
                f"discriminator input H,W must be divisible by {step}, got {tuple(x.shape[-2:])}"
            )
        return self.net(x)


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())
