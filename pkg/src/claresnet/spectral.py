"""Spectral sequence encoder: hybrid positional encoding, multi-scale latent
attention, recurrent encoder layers, cross-layer fusion and the classifier head."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .nn_core import BiGRU, BiLSTM, MultiHeadAttention, dropout, gelu

L_BASE = 16
T_BASE = 16
L_MIN = 8
L_MAX = 64
INIT_STD = 0.02


def latent_count(t: int, l_base: int = L_BASE, t_base: int = T_BASE,
                 l_min: int = L_MIN, l_max: int = L_MAX) -> int:
    """clamp(floor(l_base * log2(max(t, t_base) / t_base)), l_min, l_max).

    The floor is computed exactly in integers: it is the largest k with
    2**k <= (max(t, t_base) / t_base) ** l_base.
    """
    if t < 1:
        raise ValueError(f"sequence length must be >= 1, got {t}")
    num = max(int(t), t_base) ** l_base
    den = t_base ** l_base
    k = num.bit_length() - den.bit_length()
    if (den << k) > num:
        k -= 1
    return min(max(k, l_min), l_max)


def sinusoidal_table(length: int, dim: int) -> torch.Tensor:
    """PE[t, 2i] = sin(t / 10000^(2i/dim)), PE[t, 2i+1] = cos(same)."""
    pos = np.arange(length, dtype=np.float64)[:, None]
    freq = 10000.0 ** (-np.arange(0, dim, 2, dtype=np.float64) / dim)
    table = np.zeros((length, dim))
    table[:, 0::2] = np.sin(pos * freq)
    table[:, 1::2] = np.cos(pos * freq)[:, : dim // 2]
    return torch.tensor(table, dtype=torch.float32)


class HybridPositionalEncoding(nn.Module):
    """Fixed sinusoidal half concatenated with a learnable half."""

    def __init__(self, dim: int, max_len: int = 512):
        super().__init__()
        if dim % 2:
            raise ValueError("embedding dimension must be even")
        self.max_len = max_len
        self.register_buffer("sin_table", sinusoidal_table(max_len, dim // 2), persistent=False)
        self.learn_table = nn.Parameter(torch.randn(max_len, dim // 2) * INIT_STD)

    def table(self, t: int):
        if t > self.max_len:
            raise ValueError(f"sequence length {t} exceeds positional capacity {self.max_len}")
        return torch.cat([self.sin_table[:t], self.learn_table[:t]], dim=-1)

    def forward(self, e):
        return e + self.table(e.shape[1]).to(e.dtype)


def downsample_seq(e, s: int):
    """Average non-overlapping windows of ``s`` steps; a short tail is averaged as-is."""
    if s == 1:
        return e
    n, t, d = e.shape
    full = t // s
    parts = []
    if full:
        parts.append(e[:, : full * s].reshape(n, full, s, d).mean(dim=2))
    if t % s:
        parts.append(e[:, full * s:].mean(dim=1, keepdim=True))
    return torch.cat(parts, dim=1)


def upsample_nearest(e, s: int, t: int):
    """Repeat each step ``s`` times and truncate to length ``t``."""
    if s == 1:
        return e
    return e.repeat_interleave(s, dim=1)[:, :t]


class FeedForward(nn.Module):
    def __init__(self, dim_in: int, hidden: int, dim_out: int | None = None, dropout: float = 0.1):
        super().__init__()
        self.fc1 = nn.Linear(dim_in, hidden)
        self.fc2 = nn.Linear(hidden, dim_in if dim_out is None else dim_out)
        self.dropout = dropout

    def forward(self, x):
        return self.fc2(dropout(gelu(self.fc1(x)), self.dropout, self.training))


@dataclass
class MslaConfig:
    scales: tuple = (1, 2, 4)
    heads: int = 8
    attn_dropout: float = 0.1
    latent_ffn_expansion: int = 2
    fuse_ffn_expansion: int = 2
    dropout: float = 0.1

    def __post_init__(self):
        self.scales = tuple(self.scales)
        if list(self.scales) != sorted(self.scales) or 1 not in self.scales:
            raise ValueError(f"scales must be ascending and contain 1, got {self.scales}")


class LatentScale(nn.Module):
    """Encode to latents, self-attend, feed-forward, decode back to the sequence."""

    def __init__(self, dim: int, cfg: MslaConfig):
        super().__init__()
        self.encode = MultiHeadAttention(dim, cfg.heads, cfg.attn_dropout)
        self.process = MultiHeadAttention(dim, cfg.heads, cfg.attn_dropout)
        self.decode = MultiHeadAttention(dim, cfg.heads, cfg.attn_dropout)
        self.ffn = FeedForward(dim, cfg.latent_ffn_expansion * dim, dropout=cfg.dropout)
        self.norm_enc = nn.LayerNorm(dim)
        self.norm_proc = nn.LayerNorm(dim)
        self.norm_out = nn.LayerNorm(dim)

    def forward(self, seq, latents):
        z = self.norm_enc(latents + self.encode(latents, seq))
        z = self.norm_proc(z + self.process(z))
        z = z + self.ffn(z)
        return self.norm_out(seq + self.decode(seq, z))


class MultiScaleLatentAttention(nn.Module):
    def __init__(self, dim: int, cfg: MslaConfig | None = None):
        super().__init__()
        self.cfg = cfg or MslaConfig()
        self.latents = nn.Parameter(torch.randn(L_MAX, dim) * INIT_STD)
        self.scales = nn.ModuleList(LatentScale(dim, self.cfg) for _ in self.cfg.scales)
        n_scales = len(self.cfg.scales)
        self.fuse = FeedForward(n_scales * dim, self.cfg.fuse_ffn_expansion * dim, dim, self.cfg.dropout)
        self.norm = nn.LayerNorm(dim)

    def forward(self, e):
        n, t, _ = e.shape
        if t < 1:
            raise ValueError("empty sequence")
        outs = []
        for s, block in zip(self.cfg.scales, self.scales):
            seq = downsample_seq(e, s)
            lat = self.latents[: latent_count(seq.shape[1])].to(e.dtype).expand(n, -1, -1)
            outs.append(upsample_nearest(block(seq, lat), s, t))
        return self.norm(e + self.fuse(torch.cat(outs, dim=-1)))


class EncoderLayer(nn.Module):
    """H_out = H + LN(FFN(MSLA(BiGRU(BiLSTM(H)) + H)))."""

    def __init__(self, dim: int, cfg: MslaConfig | None = None, ffn_expansion: int = 4,
                 dropout: float = 0.1):
        super().__init__()
        if dim % 2:
            raise ValueError("dimension must be even for bidirectional RNNs")
        self.lstm = BiLSTM(dim, dim // 2)
        self.gru = BiGRU(dim, dim // 2)
        self.msla = MultiScaleLatentAttention(dim, cfg)
        self.ffn = FeedForward(dim, ffn_expansion * dim, dropout=dropout)
        self.norm = nn.LayerNorm(dim)

    def forward(self, h):
        h_rnn = self.gru(self.lstm(h)) + h
        return h + self.norm(self.ffn(self.msla(h_rnn)))


class HierarchicalFusion(nn.Module):
    """Final-layer summary attends over the stack of per-layer mean summaries."""

    def __init__(self, dim: int, heads: int = 8, attn_dropout: float = 0.1):
        super().__init__()
        self.attn = MultiHeadAttention(dim, heads, attn_dropout)
        self.norm = nn.LayerNorm(dim)

    def forward(self, layers):
        summaries = torch.stack([h.mean(dim=1) for h in layers], dim=1)  # (N, n, D)
        query = summaries[:, -1:]
        return self.norm(query + self.attn(query, summaries))[:, 0]


class ClassifierHead(nn.Module):
    def __init__(self, dim: int, n_classes: int, hidden: int = 128,
                 dropout_in: float = 0.5, dropout_hidden: float = 0.25):
        super().__init__()
        self.norm = nn.LayerNorm(dim)
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, n_classes)
        self.dropout_in = dropout_in
        self.dropout_hidden = dropout_hidden

    def forward(self, f):
        z = gelu(self.fc1(dropout(self.norm(f), self.dropout_in, self.training)))
        return self.fc2(dropout(z, self.dropout_hidden, self.training))
