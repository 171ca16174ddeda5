"""Scalar differentiable losses: adversarial terms for both translation
directions, cycle consistency, the domain-adaptation joint, cross-entropy
segmentation, two-scale L1 depth, the per-task joints, and the
uncertainty-weighted combination of all three task losses.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ContractError

DEFAULT_LAMBDA_CYC = 10.0


class AdvRole(str, Enum):
    DISCRIMINATOR = "discriminator"
    GENERATOR = "generator"


def adversarial_loss(
    real_logits: torch.Tensor | None,
    fake_logits: torch.Tensor,
    role: AdvRole,
    saturating: bool = False,
) -> torch.Tensor:
    """GAN loss over patch logits with sigmoid outputs.

    Discriminator role: binary cross-entropy with targets 1 on real and 0 on
    fake, i.e. -mean log s(real) - mean log(1 - s(fake)). Generator role
    defaults to the non-saturating form -mean log s(fake); ``saturating=True``
    selects the literal min-max term +mean log(1 - s(fake)) instead.
    """
    role = AdvRole(role)
    if fake_logits.numel() == 0:
        raise ContractError("adversarial loss over an empty logit map")
    if role is AdvRole.DISCRIMINATOR:
        if real_logits is None or real_logits.numel() == 0:
            raise ContractError("discriminator loss needs real logits")
        # softplus(-z) = -log s(z);  softplus(z) = -log(1 - s(z))
        return F.softplus(-real_logits).mean() + F.softplus(fake_logits).mean()
    if saturating:
        return -F.softplus(fake_logits).mean()
    return F.softplus(-fake_logits).mean()


def cycle_consistency_loss(x, x_cycled, y, y_cycled) -> torch.Tensor:
    """Mean absolute reconstruction error of both cycles."""
    if x.shape != x_cycled.shape or y.shape != y_cycled.shape:
        raise ContractError("cycle loss shape mismatch")
    return (x_cycled - x).abs().mean() + (y_cycled - y).abs().mean()


def domain_adaptation_loss(adv_xy, adv_yx, cyc, lambda_cyc: float = DEFAULT_LAMBDA_CYC):
    """Joint translation objective: both adversarial terms plus the weighted
    cycle term."""
    return adv_xy + adv_yx + lambda_cyc * cyc


def segmentation_loss(logits: torch.Tensor, labels: torch.Tensor, ignore_index: int = 255):
    """Mean per-pixel cross-entropy over non-ignored pixels; 0 when every
    pixel is ignored."""
    if logits.dim() == 3:
        logits = logits.unsqueeze(0)
    if labels.dim() == 2:
        labels = labels.unsqueeze(0)
    if logits.dim() != 4 or labels.dim() != 3 or logits.shape[-2:] != labels.shape[-2:]:
        raise ContractError(
            f"segmentation loss shapes: logits {tuple(logits.shape)} labels {tuple(labels.shape)}"
        )
    num_classes = logits.shape[1]
    valid = labels != ignore_index
    if valid.any():
        bad = labels[valid]
        if bad.min() < 0 or bad.max() >= num_classes:
            raise ContractError(
                f"labels must be < {num_classes} or the ignore value {ignore_index}"
            )
    else:
        return logits.sum() * 0.0
    return F.cross_entropy(logits, labels.long(), ignore_index=ignore_index)


def depth_loss(pred_full, pred_half, gt_full) -> torch.Tensor:
    """L1 at full scale plus L1 at half scale (ground truth average-pooled),
    equal weights. All tensors use the normalized (0,1) depth encoding."""
    if pred_full.shape != gt_full.shape:
        raise ContractError(
            f"depth loss shape mismatch: pred {tuple(pred_full.shape)} gt {tuple(gt_full.shape)}"
        )
    gt_half = F.avg_pool2d(gt_full, 2)
    if pred_half.shape != gt_half.shape:
        raise ContractError(
            f"half-scale depth shape mismatch: pred {tuple(pred_half.shape)} gt {tuple(gt_half.shape)}"
        )
    return (pred_full - gt_full).abs().mean() + (pred_half - gt_half).abs().mean()


def joint_seg_loss(seg_ce, seg_adv):
    return seg_ce + seg_adv


def joint_depth_loss(depth_l1, depth_adv):
    return depth_l1 + depth_adv


class UncertaintyWeights(nn.Module):
    """Learnable log-variance scalars balancing the three task losses.

    Each task contributes exp(-s) * L + s to the combined objective; for a
    frozen positive L the minimizer is s = ln L, so the scalars settle at the
    log magnitude of their task and equalize the weighted terms.
    """

    TASKS = ("s_da", "s_seg", "s_depth")

    def __init__(self, dtype: torch.dtype = torch.float32):
        super().__init__()
        for name in self.TASKS:
            self.register_parameter(name, nn.Parameter(torch.zeros((), dtype=dtype)))

    def weighted(self, name: str, loss):
        s = getattr(self, name)
        return torch.exp(-s) * loss + s

    def values(self) -> dict[str, float]:
        return {name: float(getattr(self, name).detach()) for name in self.TASKS}


def combined_loss(da, joint_seg, joint_depth, weights: UncertaintyWeights):
    """Uncertainty-weighted sum of the three task losses:
    sum_i exp(-s_i) * L_i + s_i."""
    return (
        weights.weighted("s_da", da)
        + weights.weighted("s_seg", joint_seg)
        + weights.weighted("s_depth", joint_depth)
    )


@dataclass
class LossBreakdown:
    """Named scalar view of one training step, for logs and tests."""

    adv_xy: float = 0.0
    adv_yx: float = 0.0
    cyc: float = 0.0
    seg_ce: float = 0.0
    seg_adv: float = 0.0
    depth_l1: float = 0.0
    depth_adv: float = 0.0
    combined: float = 0.0

    def as_dict(self) -> dict[str, float]:
        return {
            "adv_xy": self.adv_xy,
            "adv_yx": self.adv_yx,
            "cyc": self.cyc,
            "seg_ce": self.seg_ce,
            "seg_adv": self.seg_adv,
            "depth_l1": self.depth_l1,
            "depth_adv": self.depth_adv,
            "combined": self.combined,
        }
