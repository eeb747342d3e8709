from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import nn

from .conformer import ConformerStack, masked


class MaskedConv1d(nn.Conv1d):
    """Same-padded 1-D conv over channels-last (B, N, C) input; padding is zeroed first."""

    def __init__(self, in_channels, out_channels, kernel_size=3):
        super().__init__(in_channels, out_channels, kernel_size, padding=kernel_size // 2)

    def forward(self, x, mask=None):
        y = super().forward(masked(x, mask).transpose(1, 2)).transpose(1, 2)
        return masked(y, mask)


class VariancePredictor(nn.Module):
    """Two conv/ReLU/LN/dropout stages and a linear head, one vector per position."""

    def __init__(self, dim: int = 192, filters: int = 192, kernel_size: int = 3, dropout: float = 0.1,
                 out_dim: int = 1):
        super().__init__()
        self.conv1 = MaskedConv1d(dim, filters, kernel_size)
        self.norm1 = nn.LayerNorm(filters)
        self.conv2 = MaskedConv1d(filters, filters, kernel_size)
        self.norm2 = nn.LayerNorm(filters)
        self.dropout = nn.Dropout(dropout)
        self.head = nn.Linear(filters, out_dim)
        self.out_dim = out_dim

    def forward(self, x, mask=None):
        x = self.dropout(self.norm1(F.relu(self.conv1(x, mask))))
        x = self.dropout(self.norm2(F.relu(self.conv2(x, mask))))
        y = masked(self.head(x), mask)
        return y.squeeze(-1) if self.out_dim == 1 else y


class ConvGLU(nn.Module):
    """Conv producing 2C channels; the second half gates the first through a sigmoid."""

    def __init__(self, dim: int, kernel_size: int = 5):
        super().__init__()
        self.conv = MaskedConv1d(dim, 2 * dim, kernel_size)

    def forward(self, x, mask=None):
        return F.glu(self.conv(x, mask), dim=-1)


class LinguisticEncoder(nn.Module):
    """SSL features (B, T', D_ssl) -> 192-d linguistic features."""

    def __init__(self, ssl_dim: int = 1024, dim: int = 192, kernel_size: int = 5, dropout: float = 0.1):
        super().__init__()
        self.proj = nn.Linear(ssl_dim, dim)
        self.glu = ConvGLU(dim, kernel_size)
        self.dropout = nn.Dropout(dropout)
        self.norm = nn.LayerNorm(dim)

    def forward(self, ssl, mask=None):
        x = masked(self.proj(ssl), mask)
        x = x + self.dropout(self.glu(x, mask))
        return masked(self.norm(x), mask)


class TextPredictor(nn.Module):
    """Conformer stack plus projection to token logits; class 0 is the CTC blank."""

    def __init__(self, n_classes: int, dim: int = 192, n_blocks: int = 2, **block_kwargs):
        super().__init__()
        self.stack = ConformerStack(n_blocks, dim, "ln", **block_kwargs)
        self.head = nn.Linear(dim, n_classes)

    def forward(self, z, mask=None):
        return self.head(self.stack(z, mask))
