"""Losses: BCE, Dice, the adversarial generator loss and the discriminator objective."""

from __future__ import annotations

import json
from dataclasses import dataclass

import torch
import torch.nn.functional as F

BCE_EPS = 1e-7
DICE_EPS = 1.0
N_LEVELS = 4


def _check_shapes(pred, target):
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: pred {tuple(pred.shape)} vs target {tuple(target.shape)}")


def bce_loss(pred: torch.Tensor, target: torch.Tensor, eps: float = BCE_EPS) -> torch.Tensor:
    """Mean binary cross-entropy of probabilities ``pred`` against ``target``."""
    _check_shapes(pred, target)
    p = pred.clamp(eps, 1 - eps)
    target = target.to(p.dtype)
    return -(target * torch.log(p) + (1 - target) * torch.log1p(-p)).mean()


def dice_loss(pred: torch.Tensor, target: torch.Tensor, eps: float = DICE_EPS) -> torch.Tensor:
    _check_shapes(pred, target)
    target = target.to(pred.dtype)
    inter = (pred * target).sum()
    return 1 - (2 * inter + eps) / (pred.sum() + target.sum() + eps)


def generator_loss(d_on_fake: torch.Tensor, eps: float = BCE_EPS) -> torch.Tensor:
    """-log D(G(x1, x2)), averaged over the batch."""
    return -torch.log(d_on_fake.clamp(eps, 1 - eps)).mean()


def adversarial_d_loss(d_on_real: torch.Tensor, d_on_fake: torch.Tensor,
                       eps: float = BCE_EPS) -> torch.Tensor:
    real = torch.log(d_on_real.clamp(eps, 1 - eps))
    fake = torch.log1p(-d_on_fake.clamp(eps, 1 - eps))
    return -(real + fake).mean()


def resize_target(target: torch.Tensor, size) -> torch.Tensor:
    """Nearest-neighbour resampling of a binary ``[B, 1, H, W]`` target; stays binary."""
    if tuple(target.shape[-2:]) == tuple(size):
        return target
    return F.interpolate(target, size=size, mode="nearest-exact")


def supervised_losses(aux_maps, target: torch.Tensor):
    """Sum of BCE and sum of Dice over the decoder levels.

    ``aux_maps`` are probability maps ``[B, 1, h_i, w_i]``; ``target`` is the
    full-resolution ``[B, 1, H, W]`` mask, resampled to every level.
    """
    if len(aux_maps) != N_LEVELS:
        raise ValueError(f"expected {N_LEVELS} aux maps, got {len(aux_maps)}")
    target = target.to(aux_maps[0].dtype)
    bce = aux_maps[0].new_zeros(())
    dice = aux_maps[0].new_zeros(())
    for p in aux_maps:
        t = resize_target(target, p.shape[-2:])
        bce = bce + bce_loss(p, t)
        dice = dice + dice_loss(p, t)
    return bce, dice


@dataclass
class LossReport:
    """Scalars of one iteration.

    ``total_d`` is ``l_d_adv + l_bce + l_dice``, the grouping under which the
    supervised terms are written next to the adversarial one. The supervised
    terms carry no discriminator parameters and are optimised by the generator.
    """

    l_g: float
    l_d_adv: float
    l_bce: float
    l_dice: float
    total_d: float

    def as_dict(self) -> dict:
        return {k: float(v) for k, v in self.__dict__.items()}

    def is_finite(self) -> bool:
        return all(torch.isfinite(torch.as_tensor(v)).item() for v in self.__dict__.values())

    def to_json(self, **extra) -> str:
        return json.dumps({**extra, **self.as_dict()}, sort_keys=True)


def discriminator_objective(d_on_real, d_on_fake, preds, target, l_g=None) -> LossReport:
    """Adversarial part of the discriminator loss plus the deep-supervised terms."""
    adv = adversarial_d_loss(d_on_real, d_on_fake)
    bce, dice = supervised_losses(preds, target)
    if l_g is None:
        l_g = generator_loss(d_on_fake)
    return LossReport(
        l_g=float(l_g),
        l_d_adv=float(adv),
        l_bce=float(bce),
        l_dice=float(dice),
        total_d=float(adv + bce + dice),
    )
