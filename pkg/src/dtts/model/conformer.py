"""Macaron conformer blocks with a swappable final normalization."""

from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import nn

from .norm import DynamicSpeakerLayerNorm, MixDynamicSpeakerLayerNorm, SpeakerCondition


def masked(x: torch.Tensor, mask: torch.Tensor | None) -> torch.Tensor:
    if mask is None:
        return x
    return x * mask.unsqueeze(-1).to(x.dtype)


def sinusoid_table(n: int, dim: int, dtype=torch.float32) -> torch.Tensor:
    pos = torch.arange(n, dtype=torch.float64)[:, None]
    freq = torch.exp(torch.arange(0, dim, 2, dtype=torch.float64) * (-math.log(10000.0) / dim))
    table = torch.zeros(n, dim, dtype=torch.float64)
    table[:, 0::2] = torch.sin(pos * freq)
    table[:, 1::2] = torch.cos(pos * freq)
    return table.to(dtype)


class FeedForward(nn.Module):
    def __init__(self, dim: int, mult: int = 4, dropout: float = 0.1):
        super().__init__()
        self.norm = nn.LayerNorm(dim)
        self.fc1 = nn.Linear(dim, dim * mult)
        self.fc2 = nn.Linear(dim * mult, dim)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x):
        return self.dropout(self.fc2(self.dropout(F.silu(self.fc1(self.norm(x))))))


class SelfAttention(nn.Module):
    """Single-head scaled dot-product self-attention with key padding mask."""

    def __init__(self, dim: int, dropout: float = 0.1):
        super().__init__()
        self.norm = nn.LayerNorm(dim)
        self.qkv = nn.Linear(dim, 3 * dim)
        self.out = nn.Linear(dim, dim)
        self.dropout = nn.Dropout(dropout)
        self.scale = dim ** -0.5

    def weights(self, x: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
        q, k, _ = self.qkv(self.norm(x)).chunk(3, dim=-1)
        return self._softmax(q, k, mask)

    def _softmax(self, q, k, mask):
        scores = torch.matmul(q, k.transpose(1, 2)) * self.scale
        if mask is not None:
            scores = scores.masked_fill(~mask[:, None, :], float("-inf"))
        return torch.softmax(scores, dim=-1)

    def forward(self, x, mask=None):
        q, k, v = self.qkv(self.norm(x)).chunk(3, dim=-1)
        attn = self.dropout(self._softmax(q, k, mask))
        return self.dropout(self.out(torch.matmul(attn, v)))


class ConvModule(nn.Module):
    """Pointwise-GLU, depthwise conv, norm, swish, pointwise.

    Layer norm stands in for batch norm so that one item's output never
    depends on what else (or how much padding) is in the batch.
    """

    def __init__(self, dim: int, kernel_size: int = 7, dropout: float = 0.1):
        super().__init__()
        self.norm = nn.LayerNorm(dim)
        self.pointwise_in = nn.Linear(dim, 2 * dim)
        self.depthwise = nn.Conv1d(dim, dim, kernel_size, padding=kernel_size // 2, groups=dim)
        self.mid_norm = nn.LayerNorm(dim)
        self.pointwise_out = nn.Linear(dim, dim)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x, mask=None):
        y = F.glu(self.pointwise_in(self.norm(x)), dim=-1)
        y = masked(y, mask)
        y = self.depthwise(y.transpose(1, 2)).transpose(1, 2)
        y = F.silu(self.mid_norm(y))
        return self.dropout(self.pointwise_out(y))


class ConformerBlock(nn.Module):
    """½FF -> attention -> conv -> ½FF -> final norm (LN, DSLN or MDSLN)."""

    def __init__(self, dim: int = 192, ff_mult: int = 4, kernel_size: int = 7, dropout: float = 0.1,
                 final_norm: str = "ln", speaker_dim: int = 192, dsln_kernel: int = 3):
        super().__init__()
        self.ff1 = FeedForward(dim, ff_mult, dropout)
        self.attn = SelfAttention(dim, dropout)
        self.conv = ConvModule(dim, kernel_size, dropout)
        self.ff2 = FeedForward(dim, ff_mult, dropout)
        self.final_norm_kind = final_norm
        if final_norm == "ln":
            self.final_norm = nn.LayerNorm(dim)
        elif final_norm == "dsln":
            self.final_norm = DynamicSpeakerLayerNorm(dim, speaker_dim, dsln_kernel)
        elif final_norm == "mdsln":
            self.final_norm = MixDynamicSpeakerLayerNorm(dim, speaker_dim, dsln_kernel)
        else:
            raise ValueError(f"unknown final norm {final_norm!r}")

    def forward(self, x, mask=None, cond: SpeakerCondition | None = None):
        x = x + 0.5 * self.ff1(x)
        x = x + self.attn(x, mask)
        x = x + self.conv(x, mask)
        x = x + 0.5 * self.ff2(x)
        if self.final_norm_kind == "ln":
            x = self.final_norm(x)
        elif cond is None:
            raise ValueError(f"{self.final_norm_kind} block needs a speaker condition")
        elif self.final_norm_kind == "dsln":
            x = self.final_norm(x, cond.embedding, mask)
        else:
            x = self.final_norm(x, cond.embedding, cond.shuffled, cond.gamma, mask)
        return masked(x, mask)


class ConformerStack(nn.Module):
    """Sinusoidal positions followed by ``n_blocks`` conformer blocks."""

    def __init__(self, n_blocks: int, dim: int = 192, final_norm: str = "ln", **kwargs):
        super().__init__()
        self.dim = dim
        self.blocks = nn.ModuleList(ConformerBlock(dim, final_norm=final_norm, **kwargs) for _ in range(n_blocks))

    def forward(self, x, mask=None, cond=None):
        x = x + sinusoid_table(x.shape[1], self.dim, x.dtype).to(x.device)
        x = masked(x, mask)
        for block in self.blocks:
            x = block(x, mask, cond)
        return x
