"""Differentiable building blocks on top of torch autograd.

Convolution, normalization and the fused recurrent kernels come from torch.
Attention is written out here so its weights can be inspected, and explicit
LSTM/GRU recurrences are kept as a reference for the fused modules. The
finite-difference checker at the bottom is independent of autograd.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import torch
import torch.nn as nn
import torch.nn.functional as F

LN_EPS = 1e-5
BN_MOMENTUM = 0.1


def conv2d(x, weight, bias=None, dilation: int = 1, padding: int = 0):
    if x.dim() != 4 or weight.dim() != 4:
        raise ValueError("conv2d expects x (N, C, H, W) and weight (C_out, C_in, k, k)")
    if x.shape[1] != weight.shape[1]:
        raise ValueError(f"input has {x.shape[1]} channels, kernel expects {weight.shape[1]}")
    return F.conv2d(x, weight, bias, padding=padding, dilation=dilation)


def same_padding(kernel: int, dilation: int = 1) -> int:
    return dilation * (kernel - 1) // 2


def gelu(x):
    """x * Phi(x) with the exact erf-based normal CDF."""
    return F.gelu(x, approximate="none")


def layer_norm(x, gain=None, bias=None, eps: float = LN_EPS):
    return F.layer_norm(x, x.shape[-1:], gain, bias, eps)


def batch_norm(x, running_mean, running_var, gain=None, bias=None, training: bool = False,
               momentum: float = BN_MOMENTUM, eps: float = 1e-5):
    # running_var is updated with the unbiased batch variance, as torch does
    return F.batch_norm(x, running_mean, running_var, gain, bias, training, momentum, eps)


def dropout(x, p: float, training: bool):
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout p must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    return F.dropout(x, p, training=True)


def pool(x, kind: str, dims):
    if kind == "avg":
        return x.mean(dim=dims)
    if kind == "max":
        return x.amax(dim=dims)
    raise ValueError(f"unknown pool kind {kind!r}")


# --------------------------------------------------------------------------- attention


@dataclass
class AttentionParams:
    w_q: torch.Tensor  # (D, D), applied as x @ w
    w_k: torch.Tensor
    w_v: torch.Tensor
    w_o: torch.Tensor
    heads: int

    @property
    def dim(self) -> int:
        return self.w_q.shape[0]

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads


def attention_weights(q, k, params: AttentionParams):
    """Per-head softmax(Q W_q (K W_k)^T / sqrt(d_k)) of shape (N, h, T_q, T_kv)."""
    n, t_q, d = q.shape
    t_kv = k.shape[1]
    h, dk = params.heads, params.head_dim
    qh = (q @ params.w_q).view(n, t_q, h, dk).transpose(1, 2)
    kh = (k @ params.w_k).view(n, t_kv, h, dk).transpose(1, 2)
    return torch.softmax(qh @ kh.transpose(-1, -2) / math.sqrt(dk), dim=-1)


def multi_head_attention(q, k, v, params: AttentionParams, dropout_p: float = 0.0,
                         training: bool = False, return_weights: bool = False):
    """Concat(head_1..head_h) W_o for inputs (N, T, D)."""
    if k.shape[1] == 0:
        raise ValueError("attention over an empty key sequence")
    if params.dim % params.heads:
        raise ValueError(f"dim {params.dim} not divisible by {params.heads} heads")
    n, t_q, d = q.shape
    attn = attention_weights(q, k, params)
    vh = (v @ params.w_v).view(n, v.shape[1], params.heads, params.head_dim).transpose(1, 2)
    out = dropout(attn, dropout_p, training) @ vh
    out = out.transpose(1, 2).reshape(n, t_q, d) @ params.w_o
    return (out, attn) if return_weights else out


class MultiHeadAttention(nn.Module):
    def __init__(self, dim: int, heads: int, dropout: float = 0.1):
        super().__init__()
        if dim % heads:
            raise ValueError(f"dim {dim} not divisible by {heads} heads")
        self.heads = heads
        self.dropout = dropout
        bound = 1.0 / math.sqrt(dim)
        for name in ("w_q", "w_k", "w_v", "w_o"):
            self.register_parameter(name, nn.Parameter(torch.empty(dim, dim).uniform_(-bound, bound)))

    def params(self) -> AttentionParams:
        return AttentionParams(self.w_q, self.w_k, self.w_v, self.w_o, self.heads)

    def forward(self, q, k=None, v=None, return_weights: bool = False):
        k = q if k is None else k
        v = k if v is None else v
        return multi_head_attention(q, k, v, self.params(), self.dropout, self.training, return_weights)


# --------------------------------------------------------------------------- recurrent


@dataclass
class RnnParams:
    """One direction, torch gate layout: LSTM (i, f, g, o), GRU (r, z, n)."""

    w_ih: torch.Tensor  # (G*H, D_in)
    w_hh: torch.Tensor  # (G*H, H)
    b_ih: torch.Tensor  # (G*H,)
    b_hh: torch.Tensor

    @property
    def hidden(self) -> int:
        return self.w_hh.shape[1]


def _lstm_direction(x, p: RnnParams):
    n, t, _ = x.shape
    h = x.new_zeros(n, p.hidden)
    c = x.new_zeros(n, p.hidden)
    outs = []
    for step in range(t):
        gates = x[:, step] @ p.w_ih.T + p.b_ih + h @ p.w_hh.T + p.b_hh
        i, f, g, o = gates.chunk(4, dim=-1)
        c = torch.sigmoid(f) * c + torch.sigmoid(i) * torch.tanh(g)
        h = torch.sigmoid(o) * torch.tanh(c)
        outs.append(h)
    return torch.stack(outs, dim=1)


def _gru_direction(x, p: RnnParams):
    n, t, _ = x.shape
    h = x.new_zeros(n, p.hidden)
    outs = []
    for step in range(t):
        gi = x[:, step] @ p.w_ih.T + p.b_ih
        gh = h @ p.w_hh.T + p.b_hh
        i_r, i_z, i_n = gi.chunk(3, dim=-1)
        h_r, h_z, h_n = gh.chunk(3, dim=-1)
        r = torch.sigmoid(i_r + h_r)
        z = torch.sigmoid(i_z + h_z)
        cand = torch.tanh(i_n + r * h_n)
        h = (1 - z) * cand + z * h
        outs.append(h)
    return torch.stack(outs, dim=1)


def _bidirectional(step_fn, x, fwd: RnnParams, bwd: RnnParams):
    out_f = step_fn(x, fwd)
    out_b = step_fn(x.flip(1), bwd).flip(1)
    return torch.cat([out_f, out_b], dim=-1)


def lstm_forward(x, fwd: RnnParams, bwd: RnnParams):
    """Bidirectional LSTM over (N, T, D_in) with zero initial state -> (N, T, 2H)."""
    return _bidirectional(_lstm_direction, x, fwd, bwd)


def gru_forward(x, fwd: RnnParams, bwd: RnnParams):
    return _bidirectional(_gru_direction, x, fwd, bwd)


class _BiRNN(nn.Module):
    rnn_cls: type = nn.LSTM
    reference = staticmethod(lstm_forward)

    def __init__(self, input_dim: int, hidden: int):
        super().__init__()
        self.rnn = self.rnn_cls(input_dim, hidden, batch_first=True, bidirectional=True)

    def forward(self, x):
        return self.rnn(x)[0]

    def direction_params(self) -> tuple[RnnParams, RnnParams]:
        r = self.rnn
        return tuple(
            RnnParams(getattr(r, f"weight_ih_l0{s}"), getattr(r, f"weight_hh_l0{s}"),
                      getattr(r, f"bias_ih_l0{s}"), getattr(r, f"bias_hh_l0{s}"))
            for s in ("", "_reverse")
        )

    def reference_forward(self, x):
        return self.reference(x, *self.direction_params())


class BiLSTM(_BiRNN):
    rnn_cls = nn.LSTM
    reference = staticmethod(lstm_forward)


class BiGRU(_BiRNN):
    rnn_cls = nn.GRU
    reference = staticmethod(gru_forward)


# --------------------------------------------------------------------------- gradients


def backward(loss):
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf requiring grad.

    Gradients add onto whatever is already stored; zero them between steps.
    """
    if loss.numel() != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {tuple(loss.shape)}")
    loss.reshape(()).backward()


def _central_difference(line, eps: float, points: int) -> float:
    stencil = {3: ((1, 0.5),), 5: ((1, 2 / 3), (2, -1 / 12))}[points]
    fd = 0.0
    for step, weight in stencil:
        plus, minus = line(step * eps), line(-step * eps)
        if not (math.isfinite(plus) and math.isfinite(minus)):
            raise ArithmeticError("grad_check: non-finite function value")
        fd += weight * (plus - minus) / eps
    return fd


def grad_check(f: Callable[[torch.Tensor], torch.Tensor], x: torch.Tensor, eps=1e-3,
               indices=None, points: int = 5) -> float:
    """Max relative error between autograd and central differences.

    ``f`` maps a float64 tensor to a scalar. ``indices`` restricts the check
    to a subset of flat coordinates. ``points`` selects the 3-point stencil
    (error O(eps^2)) or the 5-point one (O(eps^4)).

    ``eps`` may also be a decreasing sequence of step sizes. Each coordinate
    then uses the estimate from the adjacent pair of steps that agree best,
    which steps over max/min kinks at large steps and rounding noise at small
    ones. The choice looks only at the finite differences, never at autograd.
    """
    if points not in (3, 5):
        raise ValueError("points must be 3 or 5")
    ladder = [float(eps)] if isinstance(eps, (int, float)) else [float(e) for e in eps]
    x = x.detach().to(torch.float64).clone().requires_grad_(True)
    out = f(x)
    if out.numel() != 1 or not torch.isfinite(out).all():
        raise ArithmeticError("grad_check: f must return a finite scalar")
    (g_ad,) = torch.autograd.grad(out.reshape(()), x)
    g_ad = g_ad.reshape(-1)
    flat = x.detach().reshape(-1)
    coords = range(flat.numel()) if indices is None else indices
    worst = 0.0
    with torch.no_grad():
        for i in coords:
            orig = flat[i].item()

            def line(t):
                flat[i] = orig + t
                return f(flat.view_as(x)).item()

            est = [_central_difference(line, h, points) for h in ladder]
            flat[i] = orig
            if len(est) == 1:
                fd = est[0]
            else:
                k = min(range(len(est) - 1), key=lambda j: abs(est[j] - est[j + 1]))
                fd = est[k]
            ad = g_ad[i].item()
            worst = max(worst, abs(ad - fd) / max(abs(ad), abs(fd), 1e-8))
    return worst
