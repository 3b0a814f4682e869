"""Per-band spatial feature extraction.

Every spectral band of a (N, T, P, P) patch is treated as its own
single-channel image; weights are shared across bands and the band axis is
restored at the end, giving (N, T, D) embeddings.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from .nn_core import dropout, gelu, same_padding

STD_EPS = 1e-8


@dataclass
class SpatialConfig:
    base_channels: int = 64
    kernel_sizes: tuple = (1, 3, 5, 7)
    dilations: tuple = (1, 2, 3, 4)
    se_reduction: int = 16
    cbam_kernel: int = 7
    embed_dim: int = 256
    internal_dropout: float = 0.1

    def __post_init__(self):
        if self.base_channels % len(self.kernel_sizes):
            raise ValueError("base_channels must be divisible by the number of stem kernels")
        if self.embed_dim <= 0:
            raise ValueError("embed_dim must be positive")


def reduced_width(channels: int, reduction: int) -> int:
    return max(channels // reduction, 4)


def global_pools(x):
    """[GAP; GMP] over the spatial axes of (N, C, H, W) -> (N, 2C)."""
    return torch.cat([x.mean(dim=(2, 3)), x.amax(dim=(2, 3))], dim=1)


class SEBlock(nn.Module):
    """Channel gate from concatenated average and max pooling."""

    def __init__(self, channels: int, reduction: int = 16, dropout: float = 0.1):
        super().__init__()
        hidden = reduced_width(channels, reduction)
        self.fc1 = nn.Linear(2 * channels, hidden)
        self.fc2 = nn.Linear(hidden, channels)
        self.dropout = dropout

    def gate(self, x):
        z = gelu(self.fc1(global_pools(x)))
        z = dropout(z, self.dropout, self.training)
        return torch.sigmoid(self.fc2(z))

    def forward(self, x):
        return x * self.gate(x)[:, :, None, None]


class MultiScaleStem(nn.Module):
    def __init__(self, cfg: SpatialConfig):
        super().__init__()
        width = cfg.base_channels // len(cfg.kernel_sizes)
        self.kernel_sizes = tuple(cfg.kernel_sizes)
        self.branches = nn.ModuleList(
            nn.Conv2d(1, width, k, padding=same_padding(k)) for k in cfg.kernel_sizes
        )
        self.se = SEBlock(cfg.base_channels, cfg.se_reduction, cfg.internal_dropout)

    def concat(self, x):
        return torch.cat([branch(x) for branch in self.branches], dim=1)

    def forward(self, x):
        if x.shape[-1] < max(self.kernel_sizes) or x.shape[-2] < max(self.kernel_sizes):
            raise ValueError(f"patch {tuple(x.shape[-2:])} smaller than the largest stem kernel")
        return self.se(self.concat(x))


class DilatedResidualBlock(nn.Module):
    def __init__(self, channels: int, dilation: int, cfg: SpatialConfig):
        super().__init__()
        self.dilation = dilation
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(channels)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=dilation, dilation=dilation, bias=False)
        self.bn2 = nn.BatchNorm2d(channels)
        self.se = SEBlock(channels, cfg.se_reduction, cfg.internal_dropout)
        self.dropout = cfg.internal_dropout

    def branch(self, x):
        y = gelu(self.bn1(self.conv1(x)))
        y = dropout(y, self.dropout, self.training)
        return self.bn2(self.conv2(y))

    def forward(self, x):
        return gelu(x + self.se(self.branch(x)))


def channel_statistics(x):
    """Mean, max, std and min across channels -> (N, 4, H, W)."""
    mean = x.mean(dim=1, keepdim=True)
    var = ((x - mean) ** 2).mean(dim=1, keepdim=True)
    return torch.cat([
        mean,
        x.amax(dim=1, keepdim=True),
        torch.sqrt(var + STD_EPS),
        x.amin(dim=1, keepdim=True),
    ], dim=1)


class EnhancedCBAM(nn.Module):
    """Channel gate (shared MLP on GAP and GMP, summed) then a spatial gate
    from four cross-channel statistics."""

    def __init__(self, channels: int, reduction: int = 16, kernel: int = 7):
        super().__init__()
        hidden = reduced_width(channels, reduction)
        self.mlp = nn.Sequential(nn.Linear(channels, hidden), nn.GELU(), nn.Linear(hidden, channels))
        self.spatial = nn.Conv2d(4, 1, kernel, padding=kernel // 2)

    def channel_gate(self, x):
        return torch.sigmoid(self.mlp(x.mean(dim=(2, 3))) + self.mlp(x.amax(dim=(2, 3))))

    def spatial_gate(self, x):
        return torch.sigmoid(self.spatial(channel_statistics(x)))

    def forward(self, x):
        x = x * self.channel_gate(x)[:, :, None, None]
        return x * self.spatial_gate(x)


class SpatialExtractor(nn.Module):
    """(N, T, P, P) patches -> (N, T, D) band embeddings."""

    def __init__(self, cfg: SpatialConfig | None = None):
        super().__init__()
        cfg = cfg or SpatialConfig()
        self.cfg = cfg
        c = cfg.base_channels
        self.stem = MultiScaleStem(cfg)
        self.blocks = nn.ModuleList(DilatedResidualBlock(c, d, cfg) for d in cfg.dilations)
        self.cbam = EnhancedCBAM(c, cfg.se_reduction, cfg.cbam_kernel)
        self.proj = nn.Linear(2 * c, cfg.embed_dim)
        self.norm = nn.LayerNorm(cfg.embed_dim)

    def feature_maps(self, x):
        n, t, p, q = x.shape
        f = self.stem(x.reshape(n * t, 1, p, q))
        for block in self.blocks:
            f = block(f)
        return self.cbam(f)

    def aggregate(self, f, n: int, t: int):
        e = self.norm(self.proj(global_pools(f)))
        return e.reshape(n, t, -1)

    def forward(self, x):
        if x.dim() != 4:
            raise ValueError(f"expected (N, T, P, P) patches, got shape {tuple(x.shape)}")
        n, t = x.shape[:2]
        return self.aggregate(self.feature_maps(x), n, t)
