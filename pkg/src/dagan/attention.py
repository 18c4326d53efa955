"""Multi-scale adaptive fusion (MAFM) and context refinement (CRM) blocks.

Both blocks map ``[B, C, H, W]`` to ``[B, C, H, W]``.
"""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F


class MAFM(nn.Module):
    """Parallel atrous branches gated per channel, added back onto the input.

    ``out = m + (atrous_3(m) + atrous_5(m) + atrous_7(m)) * sigmoid(fc2(relu(fc1(pool(m)))))``
    """

    def __init__(self, channels: int, rates=(3, 5, 7), reduction: int = 4, pool: str = "avg"):
        super().__init__()
        if pool not in ("avg", "max"):
            raise ValueError(f"pool must be 'avg' or 'max', got {pool!r}")
        self.channels = channels
        self.pool = pool
        self.branches = nn.ModuleList(
            nn.Conv2d(channels, channels, 3, padding=r, dilation=r) for r in rates
        )
        hidden = max(1, channels // reduction)
        self.fc1 = nn.Conv2d(channels, hidden, 1)
        self.fc2 = nn.Conv2d(hidden, channels, 1)

    def gate(self, m: torch.Tensor) -> torch.Tensor:
        pooled = F.adaptive_avg_pool2d(m, 1) if self.pool == "avg" else F.adaptive_max_pool2d(m, 1)
        return torch.sigmoid(self.fc2(F.relu(self.fc1(pooled))))

    def forward(self, m: torch.Tensor) -> torch.Tensor:
        if m.shape[1] != self.channels:
            raise ValueError(f"MAFM expects {self.channels} channels, got {m.shape[1]}")
        mid = sum(branch(m) for branch in self.branches)
        return m + mid * self.gate(m)


class LayerNorm2d(nn.Module):
    """Layer norm over the channel vector of every pixel."""

    def __init__(self, channels: int, eps: float = 1e-6):
        super().__init__()
        self.norm = nn.LayerNorm(channels, eps=eps)

    def forward(self, x):
        return self.norm(x.permute(0, 2, 3, 1)).permute(0, 3, 1, 2)


class CRM(nn.Module):
    """Single-head spatial self-attention followed by layer norm and an MLP.

    Key/query/value come from 1x1 convolutions of the layer-normed input.
    ``attention[b, i, j] = softmax_j(query_i . key_j)`` has shape ``[HW, HW]``
    with rows summing to one; the context at position ``i`` is the
    attention-weighted mean of the values, ``sum_j attention[i, j] value_j``.
    The result is ``mlp(norm(context + x))``.
    """

    def __init__(self, channels: int, mlp_ratio: int = 4, pre_norm: bool = True):
        super().__init__()
        self.channels = channels
        self.pre_norm = LayerNorm2d(channels) if pre_norm else nn.Identity()
        self.key = nn.Conv2d(channels, channels, 1)
        self.query = nn.Conv2d(channels, channels, 1)
        self.value = nn.Conv2d(channels, channels, 1)
        self.norm = LayerNorm2d(channels)
        self.mlp = nn.Sequential(
            nn.Conv2d(channels, channels * mlp_ratio, 1),
            nn.GELU(),
            nn.Conv2d(channels * mlp_ratio, channels, 1),
        )

    def attention(self, x: torch.Tensor):
        """Return ``(attention [B, HW, HW], value [B, C, HW])``."""
        b, c, h, w = x.shape
        if c != self.channels:
            raise ValueError(f"CRM expects {self.channels} channels, got {c}")
        xn = self.pre_norm(x)
        k = self.key(xn).reshape(b, c, h * w)
        q = self.query(xn).reshape(b, c, h * w)
        v = self.value(xn).reshape(b, c, h * w)
        # softmax subtracts the row max internally; no 1/sqrt(C) scaling
        attn = torch.softmax(torch.bmm(q.transpose(1, 2), k), dim=-1)
        return attn, v

    def context(self, x: torch.Tensor) -> torch.Tensor:
        attn, v = self.attention(x)
        return torch.bmm(v, attn.transpose(1, 2)).reshape(x.shape)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.mlp(self.norm(self.context(x) + x))
