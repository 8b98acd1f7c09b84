"""Attention primitives shared by the story encoder and the transformer."""

from __future__ import annotations

import math

import torch
from torch import nn


class MultiHeadAttention(nn.Module):
    """Scaled dot-product attention with separate query and key/value inputs."""

    def __init__(self, d_model: int, n_heads: int, kv_dim: int | None = None):
        super().__init__()
        if d_model % n_heads != 0:
            raise ValueError(f"d_model {d_model} not divisible by n_heads {n_heads}")
        kv_dim = kv_dim if kv_dim is not None else d_model
        self.n_heads = n_heads
        self.head_dim = d_model // n_heads
        self.q_proj = nn.Linear(d_model, d_model)
        self.k_proj = nn.Linear(kv_dim, d_model)
        self.v_proj = nn.Linear(kv_dim, d_model)
        self.out_proj = nn.Linear(d_model, d_model)

    def forward(self, query: torch.Tensor, key_value: torch.Tensor,
                mask: torch.Tensor | None = None,
                return_weights: bool = False):
        """query (B, L, d), key_value (B, S, kv_dim), mask bool (L, S) True=allowed."""
        b, l, _ = query.shape
        s = key_value.shape[1]
        q = self.q_proj(query).view(b, l, self.n_heads, self.head_dim).transpose(1, 2)
        k = self.k_proj(key_value).view(b, s, self.n_heads, self.head_dim).transpose(1, 2)
        v = self.v_proj(key_value).view(b, s, self.n_heads, self.head_dim).transpose(1, 2)
        scores = q @ k.transpose(-1, -2) / math.sqrt(self.head_dim)
        if mask is not None:
            scores = scores.masked_fill(~mask, float("-inf"))
        weights = torch.softmax(scores, dim=-1)
        out = (weights @ v).transpose(1, 2).reshape(b, l, -1)
        out = self.out_proj(out)
        if return_weights:
            return out, weights
        return out

    def zero_output_projection(self) -> None:
        """Make the sublayer an exact no-op when used residually."""
        nn.init.zeros_(self.out_proj.weight)
        nn.init.zeros_(self.out_proj.bias)


class FeedForward(nn.Module):
    def __init__(self, d_model: int, hidden_mult: int = 4):
        super().__init__()
        self.fc1 = nn.Linear(d_model, hidden_mult * d_model)
        self.fc2 = nn.Linear(hidden_mult * d_model, d_model)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(torch.nn.functional.gelu(self.fc1(x)))
