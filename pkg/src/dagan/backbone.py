"""Six-stage feature extractor, bi-temporal fusion and aggregate connections."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

N_STAGES = 6
LEVELS = (2, 3, 4, 5)
# pyramid level -> backbone stages summed into it
CONTRIBUTORS = {2: (2, 3), 3: (2, 3, 4), 4: (3, 4, 5), 5: (5, 6)}
# level i alone, used when aggregate connections are disabled
PLAIN = {i: (i,) for i in LEVELS}

RESNET50_CHANNELS = (64, 256, 512, 1024, 2048, 512)
TINY_CHANNELS = (8, 16, 32, 64, 64, 64)


@dataclass(frozen=True)
class StagePlan:
    channels: tuple
    proj_channels: int = 128
    stride: int = 2

    def __post_init__(self):
        if len(self.channels) != N_STAGES:
            raise ValueError(f"need {N_STAGES} stage widths, got {len(self.channels)}")

    def spatial_sizes(self, size: int) -> list[int]:
        return [size // self.stride ** i for i in range(1, N_STAGES + 1)]


def check_input_size(h: int, w: int, multiple: int = 64) -> None:
    if h < multiple or w < multiple or h % multiple or w % multiple:
        raise ValueError(f"input size {h}x{w} must be at least {multiple} and divisible by {multiple}")


def conv_relu(cin, cout, kernel=3, stride=1):
    # stage 6 is 1x1 at the smallest input; batch norm there breaks batch-1 training
    return nn.Sequential(nn.Conv2d(cin, cout, kernel, stride=stride, padding=kernel // 2),
                         nn.ReLU(inplace=True))


def conv_bn_relu(cin, cout, kernel=3, stride=1):
    return nn.Sequential(
        nn.Conv2d(cin, cout, kernel, stride=stride, padding=kernel // 2, bias=False),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=True),
    )


class BasicBlock(nn.Module):
    def __init__(self, channels):
        super().__init__()
        self.conv1 = conv_bn_relu(channels, channels)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(channels)

    def forward(self, x):
        return F.relu(x + self.bn2(self.conv2(self.conv1(x))))


class StageExtractor(nn.Module):
    """Applies six stride-2 stages and returns every stage output."""

    plan: StagePlan
    stages: nn.ModuleList

    def forward(self, image: torch.Tensor) -> list[torch.Tensor]:
        check_input_size(*image.shape[-2:])
        feats = []
        x = image
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return feats


class TinyExtractor(StageExtractor):
    """Randomly initialised narrow extractor for CPU runs and tests."""

    def __init__(self, channels=TINY_CHANNELS, proj_channels: int = 16, in_channels: int = 3):
        super().__init__()
        self.plan = StagePlan(tuple(channels), proj_channels)
        stages = [conv_bn_relu(in_channels, channels[0], 3, stride=2)]
        for i in range(1, 5):
            stages.append(nn.Sequential(conv_bn_relu(channels[i - 1], channels[i], 3, stride=2),
                                        BasicBlock(channels[i])))
        stages.append(conv_relu(channels[4], channels[5], 3, stride=2))
        self.stages = nn.ModuleList(stages)


class ResNet50Extractor(StageExtractor):
    """ResNet-50 without its pooling/classifier head, cut into six stride-2 stages.

    The stem max-pool is replaced by a stride-2 3x3 convolution and one extra
    stride-2 block (randomly initialised) is appended as stage 6.
    ``weights`` is ``None``, a torchvision weights name such as
    ``"IMAGENET1K_V1"``, or a path to a saved ResNet-50 state dict.
    """

    def __init__(self, proj_channels: int = 128, stage6_channels: int = RESNET50_CHANNELS[5],
                 weights=None):
        super().__init__()
        from torchvision.models import resnet50

        if weights is None or str(weights).endswith((".pth", ".pt")):
            net = resnet50(weights=None)
            if weights is not None:
                net.load_state_dict(torch.load(weights, map_location="cpu"))
        else:
            net = resnet50(weights=weights)
        channels = RESNET50_CHANNELS[:5] + (stage6_channels,)
        self.plan = StagePlan(channels, proj_channels)
        self.stages = nn.ModuleList([
            nn.Sequential(net.conv1, net.bn1, net.relu),
            nn.Sequential(conv_bn_relu(64, 64, 3, stride=2), net.layer1),
            net.layer2,
            net.layer3,
            net.layer4,
            conv_relu(2048, stage6_channels, 3, stride=2),
        ])


def fuse_bitemporal(stages_t1, stages_t2):
    """Stagewise elementwise sum of the two temporal feature lists."""
    if len(stages_t1) != len(stages_t2):
        raise ValueError(f"stage count mismatch: {len(stages_t1)} vs {len(stages_t2)}")
    fused = []
    for i, (a, b) in enumerate(zip(stages_t1, stages_t2), start=1):
        if a.shape != b.shape:
            raise ValueError(f"stage {i} shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
        fused.append(a + b)
    return fused


class AggregateConnections(nn.Module):
    """Builds pyramid levels 2..5 from the six fused stages.

    Every contributing stage is projected to ``proj_channels`` by a bias-free
    1x1 convolution, bilinearly resampled to the level's resolution, and summed.
    With ``aggregate=False`` each level only sees its own stage.
    """

    def __init__(self, stage_channels, proj_channels: int, aggregate: bool = True):
        super().__init__()
        self.table = CONTRIBUTORS if aggregate else PLAIN
        used = sorted({s for stages in self.table.values() for s in stages})
        self.proj = nn.ModuleDict({
            str(s): nn.Conv2d(stage_channels[s - 1], proj_channels, 1, bias=False) for s in used
        })

    @property
    def used_stages(self) -> list[int]:
        return sorted(int(s) for s in self.proj)

    def forward(self, fused_stages) -> dict[int, torch.Tensor]:
        if len(fused_stages) != N_STAGES:
            raise ValueError(f"expected {N_STAGES} stages, got {len(fused_stages)}")
        projected = {s: self.proj[str(s)](fused_stages[s - 1]) for s in self.used_stages}
        pyramid = {}
        for level in LEVELS:
            size = fused_stages[level - 1].shape[-2:]
            total = None
            for s in self.table[level]:
                f = projected[s]
                if f.shape[-2:] != size:
                    f = F.interpolate(f, size=size, mode="bilinear", align_corners=False)
                total = f if total is None else total + f
            pyramid[level] = total
        return pyramid
