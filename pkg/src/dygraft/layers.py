"""Building blocks shared by the discrete and continuous models."""
from __future__ import annotations

import math

import torch
from torch import nn


class Time2Vec(nn.Module):
    """Learned time encoding: one linear component, ``dim - 1`` periodic ones."""

    def __init__(self, dim: int):
        super().__init__()
        if dim < 2:
            raise ValueError("time2vec needs dim >= 2")
        self.dim = dim
        self.w0 = nn.Parameter(torch.tensor(0.1))
        self.b0 = nn.Parameter(torch.tensor(0.0))
        # log-spaced initial frequencies cover both short and long gaps
        self.freq = nn.Parameter(1.0 / 10 ** torch.linspace(0, 3, dim - 1))
        self.phase = nn.Parameter(torch.zeros(dim - 1))

    def forward(self, delta: torch.Tensor) -> torch.Tensor:
        delta = delta.unsqueeze(-1)
        linear = self.w0 * delta + self.b0
        periodic = torch.sin(delta * self.freq + self.phase)
        return torch.cat([linear, periodic], dim=-1)


def time2vec(delta: torch.Tensor, dim: int, params: Time2Vec) -> torch.Tensor:
    if params.dim != dim:
        raise ValueError(f"encoder has dim {params.dim}, asked for {dim}")
    return params(delta)


class MultiHeadAttention(nn.Module):
    """Scaled dot-product attention with separate query / key-value widths.

    ``mask`` is boolean ``[B, Lq, Lk]`` with True for allowed pairs. A query
    row with no allowed key yields a zero vector before the output projection,
    or its own projected query when ``empty_to_query`` is set.
    """

    def __init__(self, d_query: int, d_kv: int, d_model: int, n_heads: int):
        super().__init__()
        if d_model % n_heads:
            raise ValueError(f"width {d_model} not divisible by {n_heads} heads")
        self.n_heads = n_heads
        self.d_head = d_model // n_heads
        self.q = nn.Linear(d_query, d_model)
        self.k = nn.Linear(d_kv, d_model)
        self.v = nn.Linear(d_kv, d_model)
        self.out = nn.Linear(d_model, d_model)

    def forward(self, query, key_value, mask=None, empty_to_query=False):
        B, Lq, _ = query.shape
        Lk = key_value.shape[1]
        h, dh = self.n_heads, self.d_head
        q = self.q(query).view(B, Lq, h, dh).transpose(1, 2)
        k = self.k(key_value).view(B, Lk, h, dh).transpose(1, 2)
        v = self.v(key_value).view(B, Lk, h, dh).transpose(1, 2)
        logits = q @ k.transpose(-1, -2) / math.sqrt(dh)
        if mask is not None:
            m = mask.unsqueeze(1)
            logits = logits.masked_fill(~m, float("-inf"))
            empty = ~m.any(-1, keepdim=True)
            logits = logits.masked_fill(empty, 0.0)
            attn = torch.softmax(logits, dim=-1).masked_fill(empty, 0.0)
        else:
            attn = torch.softmax(logits, dim=-1)
        ctx = (attn @ v).transpose(1, 2).reshape(B, Lq, h * dh)
        if mask is not None and empty_to_query:
            empty_rows = ~mask.any(-1, keepdim=True)
            ctx = torch.where(empty_rows, q.transpose(1, 2).reshape(B, Lq, h * dh), ctx)
        return self.out(ctx)


class TransformerBlock(nn.Module):
    """Post-norm self-attention + position-wise feed-forward layer."""

    def __init__(self, d: int, n_heads: int, d_ff: int | None = None, dropout: float = 0.0):
        super().__init__()
        self.attn = MultiHeadAttention(d, d, d, n_heads)
        self.norm1 = nn.LayerNorm(d)
        self.ff = nn.Sequential(nn.Linear(d, d_ff or 2 * d), nn.GELU(), nn.Linear(d_ff or 2 * d, d))
        self.norm2 = nn.LayerNorm(d)
        self.drop = nn.Dropout(dropout)

    def forward(self, x, mask=None):
        x = self.norm1(x + self.drop(self.attn(x, x, mask)))
        return self.norm2(x + self.drop(self.ff(x)))


def causal_mask(length: int, valid: torch.Tensor | None = None) -> torch.Tensor:
    """``[B or 1, L, L]`` mask where position i sees j <= i (and only valid j)."""
    tri = torch.tril(torch.ones(length, length, dtype=torch.bool))
    if valid is None:
        return tri.unsqueeze(0)
    return tri.unsqueeze(0) & valid.unsqueeze(1)
