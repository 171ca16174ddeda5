import numpy as np
import pytest
import torch

from fd import module_gradient_error
from foggyscene.blocks import (
    DenseBlock,
    Downsampler,
    NonBottleneck1d,
    PatchDiscriminator,
    Transition,
    UpsamplerStage,
    count_parameters,
    fuse,
)
from foggyscene.errors import ConfigurationError, ContractError


def conv_param_count(module_cls=torch.nn.Conv2d, module=None):
    return sum(p.numel() for m in module.modules() if isinstance(m, module_cls) for p in m.parameters())


# -- shapes --------------------------------------------------------------------

def test_downsampler_shapes():
    x = torch.rand(1, 3, 128, 256)
    assert Downsampler(3, 16)(x).shape == (1, 16, 64, 128)
    assert Downsampler(16, 64)(torch.rand(1, 16, 64, 128)).shape == (1, 64, 32, 64)


def test_downsampler_conv_parameter_count():
    block = Downsampler(3, 16)
    # 3x3 conv with out-in=13 filters over 3 input channels plus biases
    assert block.conv.weight.numel() + block.conv.bias.numel() == 3 * 3 * 3 * 13 + 13 == 364


def test_downsampler_rejects_nonexpanding():
    with pytest.raises(ConfigurationError):
        Downsampler(16, 16)


def test_downsampler_rejects_odd_input():
    with pytest.raises(ContractError):
        Downsampler(3, 16)(torch.rand(1, 3, 15, 16))


def test_non_bottleneck_shape_preserving():
    for ch, dilation in [(8, 1), (16, 2), (64, 16)]:
        block = NonBottleneck1d(ch, dilation)
        x = torch.rand(2, ch, 16, 24)
        assert block(x).shape == x.shape


def test_non_bottleneck_zero_convs_is_relu():
    block = NonBottleneck1d(8, dilation=2).eval()
    with torch.no_grad():
        for name, p in block.named_parameters():
            if "conv" in name:
                p.zero_()
    x = torch.randn(1, 8, 8, 8)
    assert torch.equal(block(x), torch.relu(x))


def test_non_bottleneck_conv_parameter_count():
    block = NonBottleneck1d(64)
    # four factorized convs of 3*ch*ch weights + ch biases each
    expected = 4 * (3 * 64 * 64 + 64)
    assert conv_param_count(module=block) == expected == 49408


def test_dense_block_channel_growth():
    block = DenseBlock(16, 4, growth=12)
    assert block.out_channels == 64
    x = torch.rand(1, 16, 16, 32)
    out = block(x)
    assert out.shape == (1, 64, 16, 32)


def test_dense_block_module_input_channels():
    block = DenseBlock(16, 4, growth=12)
    in_channels = [m[0].in_channels for m in block.modules_list]
    assert in_channels == [16, 28, 40, 52]


def test_transition_shapes_and_average():
    block = Transition(64, 64)
    x = torch.rand(1, 64, 32, 64)
    assert block(x).shape == (1, 64, 16, 32)
    # a constant plane stays constant under 2x2 averaging of the 1x1 conv output
    const = torch.full((1, 4, 8, 8), 0.7)
    t = Transition(4, 4)
    direct = t.conv(const)
    pooled = t(const)
    assert torch.allclose(pooled, direct[..., ::2, ::2], atol=1e-6)


def test_transition_conv_parameter_count():
    block = Transition(64, 128)
    assert block.conv.weight.numel() + block.conv.bias.numel() == 64 * 128 + 128 == 8320


def test_upsampler_shapes():
    assert UpsamplerStage(128, 64)(torch.rand(1, 128, 16, 32)).shape == (1, 64, 32, 64)
    head = UpsamplerStage(16, 19, with_refinement=False)
    assert head(torch.rand(1, 16, 64, 128)).shape == (1, 19, 128, 256)


def test_upsampler_refinement_preserves_shape():
    x = torch.rand(1, 8, 8, 8)
    with_ref = UpsamplerStage(8, 4, with_refinement=True)(x)
    without = UpsamplerStage(8, 4, with_refinement=False)(x)
    assert with_ref.shape == without.shape


def test_down_transition_up_compose_to_identity_shape():
    x = torch.rand(1, 8, 16, 32)
    down = Transition(8, 12)(x)
    up = UpsamplerStage(12, 8)(down)
    assert up.shape == x.shape


# -- fuse ------------------------------------------------------------------------

def test_fuse_identity_and_commutativity():
    x = torch.rand(2, 4, 8, 8)
    y = torch.rand(2, 4, 8, 8)
    assert torch.equal(fuse(x, torch.zeros_like(x)), x)
    assert torch.equal(fuse(x, y), fuse(y, x))


def test_fuse_shape_mismatch():
    with pytest.raises(ContractError):
        fuse(torch.rand(1, 4, 8, 8), torch.rand(1, 4, 8, 9))


# -- discriminator ----------------------------------------------------------------

def test_patch_discriminator_shapes():
    disc = PatchDiscriminator(3, 16, 3)
    assert disc(torch.rand(1, 3, 64, 128)).shape == (1, 1, 8, 16)


def test_patch_discriminator_accepts_stacked_channels():
    disc = PatchDiscriminator(20, 16, 3)
    out = disc(torch.rand(1, 20, 64, 128))
    assert out.shape == (1, 1, 8, 16)


def test_patch_discriminator_widths_double():
    disc = PatchDiscriminator(3, 16, 3)
    widths = [m.out_channels for m in disc.net if isinstance(m, torch.nn.Conv2d)]
    assert widths == [16, 32, 64, 1]


def test_patch_discriminator_width_cap():
    disc = PatchDiscriminator(3, 4, 6)
    widths = [m.out_channels for m in disc.net if isinstance(m, torch.nn.Conv2d)]
    assert widths == [4, 8, 16, 32, 32, 32, 1]


def test_patch_discriminator_rejects_indivisible():
    disc = PatchDiscriminator(3, 16, 3)
    with pytest.raises(ContractError):
        disc(torch.rand(1, 3, 60, 128))


# -- determinism ---------------------------------------------------------------------

def test_blocks_deterministic_without_dropout():
    torch.manual_seed(0)
    block = NonBottleneck1d(8, 2, dropout=0.0).eval()
    x = torch.rand(1, 8, 16, 16)
    assert torch.equal(block(x), block(x))


def test_dropout_config_validation():
    with pytest.raises(ConfigurationError):
        NonBottleneck1d(8, 1, dropout=1.0)


# -- flip geometry of stride-1 blocks ---------------------------------------------
# A conv layer is flip-equivariant only for horizontally symmetric kernels, and
# stride-2 sampling on even grids is offset by one pixel under mirroring. With
# kernels symmetrized along the width axis, the shape-preserving blocks (and
# 2x2 pooling) must commute with mirroring exactly; this pins the padding and
# sampling alignment of the data path.

def _symmetrize_width(module):
    with torch.no_grad():
        for m in module.modules():
            if isinstance(m, torch.nn.Conv2d):
                m.weight.copy_((m.weight + torch.flip(m.weight, dims=[-1])) / 2)


@pytest.mark.parametrize(
    "factory,channels",
    [
        (lambda: NonBottleneck1d(6, 2).double().eval(), 6),
        (lambda: DenseBlock(6, 3, 4).double().eval(), 6),
        (lambda: Transition(6, 8).double().eval(), 6),
    ],
    ids=["non_bottleneck", "dense_block", "transition"],
)
def test_stride1_blocks_flip_equivariant_with_symmetric_kernels(factory, channels):
    torch.manual_seed(3)
    block = factory()
    _symmetrize_width(block)
    x = torch.rand(1, channels, 8, 12, dtype=torch.float64)
    flipped_out = block(torch.flip(x, dims=[-1]))
    out_flipped = torch.flip(block(x), dims=[-1])
    assert torch.allclose(flipped_out, out_flipped, atol=1e-12)


# -- gradients --------------------------------------------------------------------------

BLOCK_CASES = [
    ("downsampler", lambda: Downsampler(4, 8), (1, 4, 8, 8)),
    ("non_bottleneck", lambda: NonBottleneck1d(6, 2, dropout=0.0), (1, 6, 8, 8)),
    ("dense_block", lambda: DenseBlock(5, 3, 4), (1, 5, 8, 8)),
    ("transition", lambda: Transition(6, 8), (1, 6, 8, 8)),
    ("upsampler", lambda: UpsamplerStage(6, 4, with_refinement=True), (1, 6, 8, 8)),
    ("upsampler_plain", lambda: UpsamplerStage(6, 4, with_refinement=False), (1, 6, 8, 8)),
    # two scales keep the instance-norm window above one pixel on 8x8 inputs
    ("patch_discriminator", lambda: PatchDiscriminator(3, 4, 2), (1, 3, 8, 8)),
]


@pytest.mark.parametrize("name,factory,shape", BLOCK_CASES, ids=[c[0] for c in BLOCK_CASES])
def test_block_gradients_match_finite_differences(name, factory, shape):
    torch.manual_seed(7)
    block = factory().train()
    x = torch.rand(*shape, dtype=torch.float64)
    err = module_gradient_error(block, x, eps=1e-4, seed=11)
    assert err < 1e-3, f"{name}: relative gradient error {err}"


def test_count_parameters_matches_manual_sum():
    block = DenseBlock(5, 2, 3)
    assert count_parameters(block) == sum(p.numel() for p in block.parameters())
