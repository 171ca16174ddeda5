"""Network assembly: the dual-encoder segmentation/depth model and the
fog<->clear translation generators.

The multi-task model runs two parallel encoders over the same scene -- an RGB
encoder (downsamplers plus factorized residual modules) and a compact
luminance(+depth) encoder built from dense blocks -- fuses them by elementwise
sum at three matching scales, and decodes the fused bottleneck twice: a
segmentation decoder emitting per-pixel class logits at full resolution and a
depth decoder emitting sigmoid depth at full and half resolution.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from enum import Enum

import torch
import torch.nn as nn

from .blocks import (
    DenseBlock,
    Downsampler,
    NonBottleneck1d,
    PatchDiscriminator,
    Transition,
    UpsamplerStage,
    count_parameters,
    fuse,
)
from .errors import ConfigurationError, ContractError


class LdMode(str, Enum):
    LUM_ONLY = "lum_only"          # depth estimation: luminance channel only
    LUM_AND_DEPTH = "lum_and_depth"  # segmentation: luminance + depth channels


@dataclass
class SegDepthConfig:
    num_classes: int = 19
    stage_widths: tuple[int, int, int] = (16, 64, 128)
    rgb_stage2_modules: int = 5
    rgb_stage3_modules: int = 8
    stage3_dilations: tuple[int, ...] = (2, 4, 8, 16)
    ld_dense_modules: tuple[int, int, int] = (4, 3, 4)
    ld_growth: tuple[int, int, int] = (12, 22, 32)
    input_resolution: tuple[int, int] = (128, 256)
    ld_mode: LdMode = LdMode.LUM_AND_DEPTH
    dropout: float = 0.1

    def __post_init__(self):
        self.stage_widths = tuple(self.stage_widths)
        self.stage3_dilations = tuple(self.stage3_dilations)
        self.ld_dense_modules = tuple(self.ld_dense_modules)
        self.ld_growth = tuple(self.ld_growth)
        self.input_resolution = tuple(self.input_resolution)
        self.ld_mode = LdMode(self.ld_mode)
        if not 2 <= self.num_classes <= 255:
            raise ConfigurationError(f"num_classes out of range: {self.num_classes}")
        if len(self.stage_widths) != 3 or list(self.stage_widths) != sorted(set(self.stage_widths)):
            raise ConfigurationError(f"stage widths must be strictly increasing, got {self.stage_widths}")
        h, w = self.input_resolution
        if h % 8 or w % 8 or h < 8 or w < 8:
            raise ConfigurationError(f"input resolution must be divisible by 8, got {h}x{w}")
        if len(self.ld_dense_modules) != 3 or len(self.ld_growth) != 3:
            raise ConfigurationError("ld encoder needs three dense blocks with growth rates")

    @property
    def ld_in_channels(self) -> int:
        return 2 if self.ld_mode is LdMode.LUM_AND_DEPTH else 1


@dataclass
class NetworkOutput:
    """Forward result: class logits plus pyramid depth in (0,1) at two scales."""

    seg_logits: torch.Tensor  # (B, num_classes, H, W)
    depth_full: torch.Tensor  # (B, 1, H, W)
    depth_half: torch.Tensor  # (B, 1, H/2, W/2)


class RgbEncoder(nn.Module):
    """Three downsampling stages at widths (w1, w2, w3): stage 2 adds five
    factorized residual modules, stage 3 eight dilated ones."""

    def __init__(self, cfg: SegDepthConfig):
        super().__init__()
        w1, w2, w3 = cfg.stage_widths
        self.stage1 = Downsampler(3, w1)
        self.stage2 = nn.Sequential(
            Downsampler(w1, w2),
            *[NonBottleneck1d(w2, 1, cfg.dropout) for _ in range(cfg.rgb_stage2_modules)],
        )
        dil = cfg.stage3_dilations
        self.stage3 = nn.Sequential(
            Downsampler(w2, w3),
            *[
                NonBottleneck1d(w3, dil[k % len(dil)], cfg.dropout)
                for k in range(cfg.rgb_stage3_modules)
            ],
        )

    def forward(self, x):
        s1 = self.stage1(x)
        s2 = self.stage2(s1)
        s3 = self.stage3(s2)
        return s1, s2, s3


class LdEncoder(nn.Module):
    """Luminance(+depth) encoder: a downsampler then three dense blocks with
    transitions, producing stage outputs shape-identical to the RGB encoder's.

    The first two transitions pool to the next scale; the third dense block
    already sits at the deepest scale, so its channel reduction is a plain 1x1
    conv (no pool) to keep stage parity with the RGB encoder.
    """

    def __init__(self, cfg: SegDepthConfig, in_channels: int):
        super().__init__()
        if in_channels not in (1, 2):
            raise ConfigurationError(f"ld encoder takes 1 or 2 input channels, got {in_channels}")
        w1, w2, w3 = cfg.stage_widths
        m1, m2, m3 = cfg.ld_dense_modules
        g1, g2, g3 = cfg.ld_growth
        self.in_channels = in_channels
        self.stage1 = Downsampler(in_channels, w1)
        dense1 = DenseBlock(w1, m1, g1)
        self.stage2 = nn.Sequential(dense1, Transition(dense1.out_channels, w2))
        dense2 = DenseBlock(w2, m2, g2)
        dense3 = DenseBlock(w3, m3, g3)
        self.stage3 = nn.Sequential(
            dense2,
            Transition(dense2.out_channels, w3),
            dense3,
            nn.Conv2d(dense3.out_channels, w3, 1),
        )

    def forward(self, x):
        s1 = self.stage1(x)
        s2 = self.stage2(s1)
        s3 = self.stage3(s2)
        return s1, s2, s3


class SegDecoder(nn.Module):
    """Three-stage upsampler at widths (w2, w1) with skip sums from the fused
    encoder maps, then a transpose conv mapping to class logits."""

    def __init__(self, cfg: SegDepthConfig):
        super().__init__()
        w1, w2, w3 = cfg.stage_widths
        self.up1 = UpsamplerStage(w3, w2, with_refinement=True)
        self.up2 = UpsamplerStage(w2, w1, with_refinement=True)
        self.head = nn.ConvTranspose2d(w1, cfg.num_classes, 2, stride=2)

    def forward(self, f3, f2, f1):
        y = self.up1(f3, skip=f2)
        y = self.up2(y, skip=f1)
        return self.head(y)


class DepthDecoder(nn.Module):
    """Same trunk as the segmentation decoder, with sigmoid depth heads at
    full resolution and (from the 64-channel stage) at half resolution."""

    def __init__(self, cfg: SegDepthConfig):
        super().__init__()
        w1, w2, w3 = cfg.stage_widths
        self.up1 = UpsamplerStage(w3, w2, with_refinement=True)
        self.up2 = UpsamplerStage(w2, w1, with_refinement=True)
        self.head_half = nn.ConvTranspose2d(w2, 1, 2, stride=2)
        self.head_full = nn.ConvTranspose2d(w1, 1, 2, stride=2)

    def forward(self, f3, f2, f1):
        y1 = self.up1(f3, skip=f2)
        half = torch.sigmoid(self.head_half(y1))
        y2 = self.up2(y1, skip=f1)
        full = torch.sigmoid(self.head_full(y2))
        return full, half


class SegDepthNet(nn.Module):
    """The full multi-task network: both encoders fused at three stages, the
    fused bottleneck feeding both decoders. One parameter set serves every
    weather domain (twin sub-models share weights by construction)."""

    def __init__(self, cfg: SegDepthConfig):
        super().__init__()
        self.cfg = cfg
        self.rgb_encoder = RgbEncoder(cfg)
        self.ld_encoder = LdEncoder(cfg, cfg.ld_in_channels)
        self.seg_decoder = SegDecoder(cfg)
        self.depth_decoder = DepthDecoder(cfg)

    def forward(self, rgb, lum, depth_in=None) -> NetworkOutput:
        if rgb.dim() != 4 or rgb.shape[1] != 3:
            raise ContractError(f"rgb must be (B,3,H,W), got {tuple(rgb.shape)}")
        if lum.dim() != 4 or lum.shape[1] != 1:
            raise ContractError(f"luminance must be (B,1,H,W), got {tuple(lum.shape)}")
        if self.cfg.ld_mode is LdMode.LUM_AND_DEPTH:
            if depth_in is None:
                raise ContractError("ld_mode LUM_AND_DEPTH requires a depth input channel")
            ld_in = torch.cat([lum, depth_in], dim=1)
        else:
            if depth_in is not None:
                raise ContractError("ld_mode LUM_ONLY takes no depth input")
            ld_in = lum
        if rgb.shape[-2] % 8 or rgb.shape[-1] % 8:
            raise ContractError(f"input H,W must be divisible by 8, got {tuple(rgb.shape[-2:])}")

        l1 = self.ld_encoder.stage1(ld_in)
        l2 = self.ld_encoder.stage2(l1)
        l3 = self.ld_encoder.stage3(l2)
        r1 = self.rgb_encoder.stage1(rgb)
        f1 = fuse(r1, l1)
        r2 = self.rgb_encoder.stage2(f1)
        f2 = fuse(r2, l2)
        r3 = self.rgb_encoder.stage3(f2)
        f3 = fuse(r3, l3)

        seg_logits = self.seg_decoder(f3, f2, f1)
        depth_full, depth_half = self.depth_decoder(f3, f2, f1)
        return NetworkOutput(seg_logits=seg_logits, depth_full=depth_full, depth_half=depth_half)


def build_rgb_encoder(cfg: SegDepthConfig) -> RgbEncoder:
    return RgbEncoder(cfg)


def build_ld_encoder(cfg: SegDepthConfig, in_channels: int) -> LdEncoder:
    return LdEncoder(cfg, in_channels)


def forward_segdepth(model: SegDepthNet, rgb, lum, depth_in=None) -> NetworkOutput:
    return model(rgb, lum, depth_in)


# --------------------------------------------------------------------------
# Translation networks

class _ResidualBlock(nn.Module):
    def __init__(self, ch: int):
        super().__init__()
        self.body = nn.Sequential(
            nn.ReflectionPad2d(1),
            nn.Conv2d(ch, ch, 3),
            nn.InstanceNorm2d(ch),
            nn.ReLU(),
            nn.ReflectionPad2d(1),
            nn.Conv2d(ch, ch, 3),
            nn.InstanceNorm2d(ch),
        )

    def forward(self, x):
        return x + self.body(x)


class TranslationGenerator(nn.Module):
    """Image-to-image generator: 7x7 stem, two stride-2 convs, residual
    blocks, two transpose convs, 7x7 output conv; tanh rescaled into [0,1].
    Resolution-preserving for inputs divisible by 4."""

    def __init__(self, width: int = 32, num_residual: int = 6):
        super().__init__()
        if width < 8:
            raise ConfigurationError(f"generator width must be >= 8, got {width}")
        if num_residual < 1:
            raise ConfigurationError(f"generator needs >= 1 residual block, got {num_residual}")
        w = width
        self.net = nn.Sequential(
            nn.ReflectionPad2d(3),
            nn.Conv2d(3, w, 7),
            nn.InstanceNorm2d(w),
            nn.ReLU(),
            nn.Conv2d(w, 2 * w, 3, stride=2, padding=1),
            nn.InstanceNorm2d(2 * w),
            nn.ReLU(),
            nn.Conv2d(2 * w, 4 * w, 3, stride=2, padding=1),
            nn.InstanceNorm2d(4 * w),
            nn.ReLU(),
            *[_ResidualBlock(4 * w) for _ in range(num_residual)],
            nn.ConvTranspose2d(4 * w, 2 * w, 3, stride=2, padding=1, output_padding=1),
            nn.InstanceNorm2d(2 * w),
            nn.ReLU(),
            nn.ConvTranspose2d(2 * w, w, 3, stride=2, padding=1, output_padding=1),
            nn.InstanceNorm2d(w),
            nn.ReLU(),
            nn.ReflectionPad2d(3),
            nn.Conv2d(w, 3, 7),
            nn.Tanh(),
        )

    def forward(self, x):
        return (self.net(x) + 1.0) * 0.5


def build_translation_generator(width: int = 32, num_residual: int = 6) -> TranslationGenerator:
    return TranslationGenerator(width, num_residual)


def translate(gen: TranslationGenerator, image: torch.Tensor) -> torch.Tensor:
    """Map a 3-channel [0,1] image (B,3,H,W) to the other weather domain."""
    if image.dim() != 4 or image.shape[1] != 3:
        raise ContractError(f"translate expects (B,3,H,W), got {tuple(image.shape)}")
    if image.shape[-1] % 4 or image.shape[-2] % 4:
        raise ContractError(f"translate needs H,W divisible by 4, got {tuple(image.shape[-2:])}")
    return gen(image)


@dataclass
class TranslationConfig:
    width: int = 32
    num_residual: int = 6
    disc_base_width: int = 16
    disc_scales: int = 3


class TranslationPair(nn.Module):
    """Both generators (foggy->clear, clear->foggy) with a patch discriminator
    per domain."""

    def __init__(self, cfg: TranslationConfig = TranslationConfig()):
        super().__init__()
        self.cfg = cfg
        self.gen_xy = TranslationGenerator(cfg.width, cfg.num_residual)
        self.gen_yx = TranslationGenerator(cfg.width, cfg.num_residual)
        self.disc_x = PatchDiscriminator(3, cfg.disc_base_width, cfg.disc_scales)
        self.disc_y = PatchDiscriminator(3, cfg.disc_base_width, cfg.disc_scales)


# --------------------------------------------------------------------------
# Parameter accounting

def depth_model_config(cfg: SegDepthConfig) -> SegDepthConfig:
    """The depth-estimation variant of a model config (luminance-only encoder)."""
    return replace(cfg, ld_mode=LdMode.LUM_ONLY)


def seg_path_parameters(model: SegDepthNet) -> int:
    """Parameters on the segmentation path: both encoders plus the seg decoder."""
    return (
        count_parameters(model.rgb_encoder)
        + count_parameters(model.ld_encoder)
        + count_parameters(model.seg_decoder)
    )


def parameter_report(model: SegDepthNet) -> dict[str, int]:
    return {
        "rgb_encoder": count_parameters(model.rgb_encoder),
        "ld_encoder": count_parameters(model.ld_encoder),
        "seg_decoder": count_parameters(model.seg_decoder),
        "depth_decoder": count_parameters(model.depth_decoder),
        "seg_path": seg_path_parameters(model),
        "total": count_parameters(model),
    }
