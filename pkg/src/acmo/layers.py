"""Transformer building blocks shared by the VAE, denoiser, adapter and ControlNet."""
from __future__ import annotations

import math

import torch
from torch import Tensor, nn

from .numerics import gelu, layer_norm, scaled_dot_attention


class LayerNorm(nn.Module):
    def __init__(self, width: int, eps: float = 1e-5):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(width))
        self.bias = nn.Parameter(torch.zeros(width))
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.weight, self.bias, self.eps)


class Attention(nn.Module):
    """Multi-head attention with separate query and key/value sources."""

    def __init__(self, width: int, heads: int, kv_width: int | None = None):
        super().__init__()
        kv_width = width if kv_width is None else kv_width
        self.heads = heads
        self.q = nn.Linear(width, width)
        self.k = nn.Linear(kv_width, width)
        self.v = nn.Linear(kv_width, width)
        self.o = nn.Linear(width, width)

    def attend(self, query: Tensor, context: Tensor, key_mask: Tensor | None = None) -> Tensor:
        """Attention output before the output projection."""
        return scaled_dot_attention(self.q(query), self.k(context), self.v(context), self.heads, key_mask)

    def forward(self, query: Tensor, context: Tensor, key_mask: Tensor | None = None) -> Tensor:
        return self.o(self.attend(query, context, key_mask))


class FeedForward(nn.Module):
    def __init__(self, width: int, mult: int = 4):
        super().__init__()
        self.fc1 = nn.Linear(width, width * mult)
        self.fc2 = nn.Linear(width * mult, width)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(gelu(self.fc1(x)))


class EncoderLayer(nn.Module):
    """Pre-norm self-attention + feed-forward layer."""

    def __init__(self, width: int, heads: int):
        super().__init__()
        self.norm1 = LayerNorm(width)
        self.attn = Attention(width, heads)
        self.norm2 = LayerNorm(width)
        self.ff = FeedForward(width)

    def forward(self, x: Tensor, key_mask: Tensor | None = None) -> Tensor:
        h = self.norm1(x)
        x = x + self.attn(h, h, key_mask)
        return x + self.ff(self.norm2(x))


def sinusoidal_table(length: int, width: int, dtype=torch.float32) -> Tensor:
    pos = torch.arange(length, dtype=torch.float64)[:, None]
    i = torch.arange(0, width, 2, dtype=torch.float64)
    freq = torch.exp(-math.log(10000.0) * i / width)
    table = torch.zeros(length, width, dtype=torch.float64)
    table[:, 0::2] = torch.sin(pos * freq)
    table[:, 1::2] = torch.cos(pos * freq[: width // 2])
    return table.to(dtype)


def timestep_features(k: Tensor, width: int) -> Tensor:
    """Sinusoidal features of (possibly fractional) step indices ``k``."""
    half = width // 2
    freq = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    ang = k.to(torch.float64)[..., None] * freq
    return torch.cat([torch.sin(ang), torch.cos(ang)], dim=-1)
