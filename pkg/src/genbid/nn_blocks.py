"""Small transformer building blocks shared by the planner, policy, and critic."""
from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

_NEG = -1e9


class SinusoidalStepEmbedding(nn.Module):
    """Classic fixed sin/cos embedding for the diffusion step index."""

    def __init__(self, dim: int):
        super().__init__()
        if dim % 2 != 0:
            raise ValueError("step embedding dim must be even")
        self.dim = dim

    def forward(self, k: torch.Tensor) -> torch.Tensor:
        half = self.dim // 2
        freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=k.dtype, device=k.device) / half)
        args = k[:, None].to(freqs.dtype) * freqs[None, :]
        return torch.cat([torch.sin(args), torch.cos(args)], dim=-1)


def attention_bias(valid: torch.Tensor, causal: bool) -> torch.Tensor:
    """Additive attention bias from a key-validity mask.

    valid: [B, L] bool.  Returns [B, 1, L, L] with 0 where attention is
    allowed and a large negative where it is blocked.
    """
    b, l = valid.shape
    bias = torch.where(valid[:, None, None, :], 0.0, _NEG).to(torch.float32)
    if causal:
        causal_bias = torch.triu(torch.full((l, l), _NEG), diagonal=1)
        bias = bias + causal_bias[None, None, :, :]
    return bias


class CausalSelfAttention(nn.Module):
    def __init__(self, embed: int, heads: int):
        super().__init__()
        if embed % heads != 0:
            raise ValueError("embed must be divisible by heads")
        self.heads = heads
        self.head_dim = embed // heads
        self.qkv = nn.Linear(embed, 3 * embed)
        self.proj = nn.Linear(embed, embed)

    def forward(self, x: torch.Tensor, bias: torch.Tensor | None) -> torch.Tensor:
        b, l, e = x.shape
        q, k, v = self.qkv(x).chunk(3, dim=-1)
        q = q.view(b, l, self.heads, self.head_dim).transpose(1, 2)
        k = k.view(b, l, self.heads, self.head_dim).transpose(1, 2)
        v = v.view(b, l, self.heads, self.head_dim).transpose(1, 2)
        att = (q @ k.transpose(-2, -1)) / math.sqrt(self.head_dim)
        if bias is not None:
            att = att + bias
        att = F.softmax(att, dim=-1)
        out = (att @ v).transpose(1, 2).contiguous().view(b, l, e)
        return self.proj(out)


class TransformerBlock(nn.Module):
    def __init__(self, embed: int, heads: int, mlp_ratio: int = 4):
        super().__init__()
        self.ln1 = nn.LayerNorm(embed)
        self.attn = CausalSelfAttention(embed, heads)
        self.ln2 = nn.LayerNorm(embed)
        self.mlp = nn.Sequential(
            nn.Linear(embed, mlp_ratio * embed),
            nn.GELU(),
            nn.Linear(mlp_ratio * embed, embed),
        )

    def forward(self, x: torch.Tensor, bias: torch.Tensor | None) -> torch.Tensor:
        x = x + self.attn(self.ln1(x), bias)
        return x + self.mlp(self.ln2(x))


class Trunk(nn.Module):
    """Stack of pre-norm blocks with a final LayerNorm."""

    def __init__(self, embed: int, heads: int, layers: int):
        super().__init__()
        self.blocks = nn.ModuleList(TransformerBlock(embed, heads) for _ in range(layers))
        self.ln_f = nn.LayerNorm(embed)

    def forward(self, tokens: torch.Tensor, bias: torch.Tensor | None) -> torch.Tensor:
        x = tokens
        for block in self.blocks:
            x = block(x, bias)
        return self.ln_f(x)
