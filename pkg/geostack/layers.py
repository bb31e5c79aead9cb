"""Transformer building blocks shared by the encoders and the decoder."""
import math
from dataclasses import dataclass

import torch
import torch.nn as nn

from .exceptions import ConfigError
from .numerics import RMS_EPS, causal_attention, full_attention, gelu, rms_norm


class RMSNorm(nn.Module):
    def __init__(self, dim: int, eps: float = RMS_EPS):
        super().__init__()
        self.eps = eps
        self.weight = nn.Parameter(torch.ones(dim))

    def forward(self, x):
        return rms_norm(x, self.weight, self.eps)


class MLP(nn.Module):
    """Two-layer map with GELU in between."""

    def __init__(self, dim_in: int, dim_hidden: int, dim_out: int):
        super().__init__()
        self.fc1 = nn.Linear(dim_in, dim_hidden)
        self.fc2 = nn.Linear(dim_hidden, dim_out)

    def forward(self, x):
        return self.fc2(gelu(self.fc1(x)))


@dataclass
class KVCache:
    """Keys and values seen so far by one attention layer of one decode session."""

    k: torch.Tensor | None = None
    v: torch.Tensor | None = None

    def extend(self, k, v):
        if self.k is not None:
            k = torch.cat([self.k, k], dim=-2)
            v = torch.cat([self.v, v], dim=-2)
        self.k, self.v = k, v
        return k, v

    @property
    def length(self) -> int:
        return 0 if self.k is None else self.k.shape[-2]


class SelfAttention(nn.Module):
    def __init__(self, dim: int, heads: int, causal: bool):
        super().__init__()
        if dim % heads:
            raise ConfigError(f"dim {dim} is not divisible by {heads} heads", field="heads")
        self.heads = heads
        self.causal = causal
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x, cache: KVCache | None = None):
        *lead, n, dim = x.shape
        head_dim = dim // self.heads
        # (..., n, 3*dim) -> three of (..., heads, n, head_dim)
        q, k, v = (
            t.reshape(*lead, n, self.heads, head_dim).transpose(-3, -2)
            for t in self.qkv(x).split(dim, dim=-1)
        )
        if cache is not None:
            k, v = cache.extend(k, v)
        attend = causal_attention if self.causal else full_attention
        out = attend(q, k, v, 1.0 / math.sqrt(head_dim))
        return self.proj(out.transpose(-3, -2).reshape(*lead, n, dim))


class Block(nn.Module):
    """Pre-norm block: x + attn(norm(x)), then x + mlp(norm(x))."""

    def __init__(self, dim: int, heads: int, mlp_dim: int, causal: bool = False):
        super().__init__()
        self.norm1 = RMSNorm(dim)
        self.attn = SelfAttention(dim, heads, causal)
        self.norm2 = RMSNorm(dim)
        self.mlp = MLP(dim, mlp_dim, dim)

    def forward(self, x, cache: KVCache | None = None):
        x = x + self.attn(self.norm1(x), cache)
        return x + self.mlp(self.norm2(x))
