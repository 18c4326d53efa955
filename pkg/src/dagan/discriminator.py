"""Four-layer convolutional real/fake classifier over change maps."""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

# 8 -> 4 -> 2 -> 1 -> 1: the last layer still sees a (padded) pixel
MIN_SIZE = 8


class Discriminator(nn.Module):
    """3x3 stride-2 convolutions with leaky ReLU, global average pooling, a
    linear head and a sigmoid. Returns one probability per map, shape ``[B]``.

    With ``conditional=True`` the two RGB images are concatenated to the map
    (7 input channels).
    """

    def __init__(self, channels=(32, 64, 128, 256), conditional: bool = False):
        super().__init__()
        if len(channels) != 4:
            raise ValueError(f"the discriminator has exactly 4 conv layers, got {len(channels)} widths")
        self.conditional = conditional
        widths = [7 if conditional else 1, *channels]
        self.convs = nn.ModuleList(
            nn.Conv2d(cin, cout, 3, stride=2, padding=1) for cin, cout in zip(widths, widths[1:])
        )
        self.head = nn.Linear(widths[-1], 1)

    def logit(self, change_map: torch.Tensor, image_t1=None, image_t2=None) -> torch.Tensor:
        if change_map.dim() == 3:
            change_map = change_map.unsqueeze(0)
        h, w = change_map.shape[-2:]
        if h < MIN_SIZE or w < MIN_SIZE:
            raise ValueError(f"discriminator input {h}x{w} is smaller than {MIN_SIZE}x{MIN_SIZE}")
        x = change_map
        if self.conditional:
            if image_t1 is None or image_t2 is None:
                raise ValueError("conditional discriminator needs both images")
            x = torch.cat([x, image_t1, image_t2], dim=1)
        for conv in self.convs:
            x = F.leaky_relu(conv(x), 0.2)
        return self.head(x.mean(dim=(2, 3))).squeeze(1)

    def forward(self, change_map, image_t1=None, image_t2=None) -> torch.Tensor:
        return torch.sigmoid(self.logit(change_map, image_t1, image_t2))
