"""Full network assembly and its configuration."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import torch.nn as nn

from .spatial import SpatialConfig, SpatialExtractor
from .spectral import (
    ClassifierHead,
    EncoderLayer,
    HierarchicalFusion,
    HybridPositionalEncoding,
    MslaConfig,
)

REFERENCE_PARAM_COUNT = 17.3e6


@dataclass
class ModelConfig:
    """Every architecture hyperparameter. Defaults are the full-size network.

    Linear and convolution weights use torch's fan-in uniform init
    U(-1/sqrt(fan_in), 1/sqrt(fan_in)), attention projections U(-1/sqrt(D), 1/sqrt(D)),
    latent tokens and learnable positions N(0, 0.02).
    """

    n_classes: int = 16
    embed_dim: int = 256
    base_channels: int = 64
    n_layers: int = 3
    heads: int = 8
    internal_dropout: float = 0.1
    attn_dropout: float = 0.1
    head_dropout: float = 0.5
    head_hidden_dropout: float = 0.25
    head_hidden: int = 128
    scales: tuple = (1, 2, 4)
    kernel_sizes: tuple = (1, 3, 5, 7)
    dilations: tuple = (1, 2, 3, 4)
    se_reduction: int = 16
    cbam_kernel: int = 7
    max_bands: int = 512
    encoder_ffn_expansion: int = 4
    init: str = "fanin-uniform/attn-uniform/embed-normal-0.02"

    def __post_init__(self):
        self.scales = tuple(self.scales)
        self.kernel_sizes = tuple(self.kernel_sizes)
        self.dilations = tuple(self.dilations)
        if self.n_classes < 2:
            raise ValueError("n_classes must be >= 2")
        if self.embed_dim % self.heads:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        if self.n_layers < 1:
            raise ValueError("n_layers must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    @classmethod
    def from_dict(cls, doc: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown model config field(s): {sorted(unknown)}")
        return cls(**doc)

    def spatial(self) -> SpatialConfig:
        return SpatialConfig(self.base_channels, self.kernel_sizes, self.dilations, self.se_reduction,
                             self.cbam_kernel, self.embed_dim, self.internal_dropout)

    def msla(self) -> MslaConfig:
        return MslaConfig(self.scales, self.heads, self.attn_dropout, dropout=self.internal_dropout)


class CLAReSNet(nn.Module):
    """(N, T, P, P) patches -> (N, C) logits."""

    def __init__(self, cfg: ModelConfig | None = None):
        super().__init__()
        cfg = cfg or ModelConfig()
        self.cfg = cfg
        d = cfg.embed_dim
        self.spatial = SpatialExtractor(cfg.spatial())
        self.pos = HybridPositionalEncoding(d, cfg.max_bands)
        self.layers = nn.ModuleList(
            EncoderLayer(d, cfg.msla(), cfg.encoder_ffn_expansion, cfg.internal_dropout)
            for _ in range(cfg.n_layers)
        )
        self.fusion = HierarchicalFusion(d, cfg.heads, cfg.attn_dropout)
        self.head = ClassifierHead(d, cfg.n_classes, cfg.head_hidden, cfg.head_dropout,
                                   cfg.head_hidden_dropout)

    def encode(self, x):
        """Per-layer outputs H^(1..n), each (N, T, D)."""
        h = self.pos(self.spatial(x))
        states = []
        for layer in self.layers:
            h = layer(h)
            states.append(h)
        return states

    def embed(self, x):
        """Fused feature vector (N, D) that feeds the classifier head."""
        return self.fusion(self.encode(x))

    def forward(self, x):
        return self.head(self.embed(x))


def parameter_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters() if p.requires_grad)


def parameter_report(model: CLAReSNet) -> str:
    total = parameter_count(model)
    rel = (total - REFERENCE_PARAM_COUNT) / REFERENCE_PARAM_COUNT
    parts = {
        "spatial": parameter_count(model.spatial),
        "positional": parameter_count(model.pos),
        "encoder": parameter_count(model.layers),
        "fusion": parameter_count(model.fusion),
        "head": parameter_count(model.head),
    }
    lines = [f"trainable parameters: {total:,} ({total / 1e6:.2f}M; {rel:+.1%} vs 17.3M reference)"]
    lines += [f"  {k:<11}{v:>12,}" for k, v in parts.items()]
    return "\n".join(lines)
