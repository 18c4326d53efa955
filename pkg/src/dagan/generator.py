"""The change-detection generator: shared extractor, aggregate connections,
MAFM, CRM and a transposed-convolution decoder with four supervised heads."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .attention import CRM, MAFM
from .backbone import (LEVELS, AggregateConnections, ResNet50Extractor, TinyExtractor,
                       check_input_size, fuse_bitemporal)
from .config import ModelConfig


@dataclass
class ChangePrediction:
    """``final_map`` is ``[B, 1, H, W]``; ``aux_maps``/``aux_logits`` run coarse
    to fine, i.e. decoder levels 5, 4, 3, 2 (``H/32`` ... ``H/4``)."""

    final_map: torch.Tensor
    aux_maps: list
    aux_logits: list

    @property
    def final_logit(self) -> torch.Tensor:
        return torch.logit(self.final_map.clamp(1e-7, 1 - 1e-7))


class Normalize(nn.Module):
    def __init__(self, mean, std):
        super().__init__()
        self.register_buffer("mean", torch.tensor(mean).view(1, -1, 1, 1))
        self.register_buffer("std", torch.tensor(std).view(1, -1, 1, 1))

    def forward(self, x):
        return (x - self.mean.to(x.dtype)) / self.std.to(x.dtype)


def build_extractor(cfg: ModelConfig):
    if cfg.backbone == "resnet50":
        return ResNet50Extractor(cfg.proj_channels, cfg.stage6_channels, cfg.weights)
    return TinyExtractor(tuple(cfg.tiny_channels), cfg.proj_channels)


class DANet(nn.Module):
    """Dual attentive change-detection network.

    Both images run through one shared extractor, the stage outputs are
    summed, and levels 2..5 are refined by MAFM then CRM (each skipped when
    the variant disables it). Decoding is top-down,
    ``d5 = s5; d_{i-1} = s_{i-1} + deconv_i(d_i)``; with ``decoder="literal"``
    the deconvolution reads ``s_i`` instead of ``d_i``.
    """

    def __init__(self, cfg: ModelConfig | None = None):
        super().__init__()
        cfg = cfg or ModelConfig()
        cfg.validate()
        self.cfg = cfg
        c = cfg.proj_channels
        self.normalize = Normalize(cfg.mean, cfg.std)
        self.extractor = build_extractor(cfg)
        self.aggregate = AggregateConnections(self.extractor.plan.channels, c, cfg.aggregate)
        identity = {str(i): nn.Identity() for i in LEVELS}
        self.mafm = nn.ModuleDict(
            {str(i): MAFM(c, reduction=cfg.mafm_reduction, pool=cfg.mafm_pool) for i in LEVELS}
            if cfg.use_mafm else identity)
        self.crm = nn.ModuleDict(
            {str(i): CRM(c, cfg.crm_mlp_ratio, cfg.crm_pre_norm) for i in LEVELS}
            if cfg.use_crm else dict(identity))
        # deconv[i] lifts level i to level i-1
        self.deconv = nn.ModuleDict({str(i): nn.ConvTranspose2d(c, c, 2, stride=2) for i in LEVELS[1:]})
        self.heads = nn.ModuleDict({str(i): nn.Conv2d(c, 1, 1) for i in LEVELS})

    def features(self, image_t1, image_t2):
        """Pyramid after aggregation, MAFM and CRM: ``{level: s_level}``."""
        if image_t1.shape != image_t2.shape:
            raise ValueError(f"image shapes differ: {tuple(image_t1.shape)} vs {tuple(image_t2.shape)}")
        check_input_size(*image_t1.shape[-2:])
        stages_t1 = self.extractor(self.normalize(image_t1))
        stages_t2 = self.extractor(self.normalize(image_t2))
        pyramid = self.aggregate(fuse_bitemporal(stages_t1, stages_t2))
        return {i: self.crm[str(i)](self.mafm[str(i)](m)) for i, m in pyramid.items()}

    def decode(self, s: dict) -> dict:
        d = {LEVELS[-1]: s[LEVELS[-1]]}
        for i in reversed(LEVELS[1:]):
            source = d[i] if self.cfg.decoder == "recursive" else s[i]
            d[i - 1] = s[i - 1] + self.deconv[str(i)](source)
        return d

    def forward(self, image_t1: torch.Tensor, image_t2: torch.Tensor) -> ChangePrediction:
        d = self.decode(self.features(image_t1, image_t2))
        logits = [self.heads[str(i)](d[i]) for i in reversed(LEVELS)]
        probs = [torch.sigmoid(z) for z in logits]
        final = F.interpolate(probs[-1], size=image_t1.shape[-2:], mode="bilinear",
                              align_corners=False)
        return ChangePrediction(final, probs, logits)


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters() if p.requires_grad)


def set_deterministic(flag: bool = True) -> None:
    torch.use_deterministic_algorithms(flag)
