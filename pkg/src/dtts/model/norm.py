"""Speaker-conditioned layer normalization (DSLN) and its mixed variant (MDSLN)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

BETA_ALPHA = 2.0


def sample_gamma(rng: np.random.Generator, size: int = 1, training: bool = True,
                 alpha: float = BETA_ALPHA) -> np.ndarray:
    """Mixing coefficients ~ Beta(alpha, alpha); all ones outside training."""
    if not training:
        return np.ones(size)
    return rng.beta(alpha, alpha, size=size)


def batch_shuffle(embeddings: torch.Tensor, perm) -> torch.Tensor:
    """Reorder speaker embeddings along the batch axis: out[k] = e[perm[k]]."""
    perm = torch.as_tensor(perm, dtype=torch.long)
    n = embeddings.shape[0]
    if perm.ndim != 1 or perm.numel() != n or not torch.equal(torch.sort(perm).values, torch.arange(n)):
        raise ValueError(f"{perm.tolist()} is not a permutation of range({n})")
    return embeddings[perm.to(embeddings.device)]


def mix_statistics(weight, weight_shuffled, bias, bias_shuffled, gamma):
    """gamma * own + (1 - gamma) * shuffled, for both filter and bias.

    ``torch.lerp`` is exact at both ends (gamma = 1 gives ``weight``) and when
    the two inputs coincide, so the degenerate cases reduce to plain DSLN bit
    for bit.
    """
    gamma = torch.as_tensor(gamma, dtype=weight.dtype, device=weight.device)
    g_w = gamma.reshape(gamma.shape + (1,) * (weight.ndim - gamma.ndim))
    g_b = gamma.reshape(gamma.shape + (1,) * (bias.ndim - gamma.ndim))
    return torch.lerp(weight_shuffled, weight, g_w), torch.lerp(bias_shuffled, bias, g_b)


@dataclass
class SpeakerCondition:
    """Everything the normalization tails need for one forward pass.

    ``shuffled`` and ``gamma`` only matter for MDSLN; with ``gamma`` None the
    mixed layers behave exactly like DSLN.
    """
    embedding: torch.Tensor
    shuffled: torch.Tensor | None = None
    gamma: torch.Tensor | None = None


class DynamicSpeakerLayerNorm(nn.Module):
    """Affine-free layer norm, then a depthwise 1-D convolution and bias whose
    parameters are predicted from the speaker embedding by single linear layers.
    """

    def __init__(self, channels: int, speaker_dim: int, kernel_size: int = 3, eps: float = 1e-5):
        super().__init__()
        self.channels = channels
        self.kernel_size = kernel_size
        self.eps = eps
        self.weight_pred = nn.Linear(speaker_dim, channels * kernel_size)
        self.bias_pred = nn.Linear(speaker_dim, channels)
        nn.init.normal_(self.weight_pred.weight, std=0.005)
        identity = torch.zeros(channels, kernel_size)
        identity[:, kernel_size // 2] = 1.0
        with torch.no_grad():
            self.weight_pred.bias.copy_(identity.flatten())
        nn.init.normal_(self.bias_pred.weight, std=0.005)
        nn.init.zeros_(self.bias_pred.bias)

    def statistics(self, speaker: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Filter (B, C, k) and bias (B, C) for each speaker embedding (B, D)."""
        w = self.weight_pred(speaker).view(-1, self.channels, self.kernel_size)
        return w, self.bias_pred(speaker)

    def normalize(self, h: torch.Tensor) -> torch.Tensor:
        return F.layer_norm(h, (self.channels,), eps=self.eps)

    def modulate(self, h: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor,
                 mask: torch.Tensor | None = None) -> torch.Tensor:
        """``weight * LN(h) + bias`` with per-item depthwise filters; h is (B, N, C)."""
        bsz, n, c = h.shape
        x = self.normalize(h)
        if mask is not None:
            x = x * mask.unsqueeze(-1).to(x.dtype)
        x = x.transpose(1, 2).reshape(1, bsz * c, n)
        y = F.conv1d(x, weight.reshape(bsz * c, 1, self.kernel_size),
                     padding=self.kernel_size // 2, groups=bsz * c)
        y = y.view(bsz, c, n).transpose(1, 2) + bias.unsqueeze(1)
        if mask is not None:
            y = y * mask.unsqueeze(-1).to(y.dtype)
        return y

    def forward(self, h, speaker, mask=None):
        return self.modulate(h, *self.statistics(speaker), mask)


class MixDynamicSpeakerLayerNorm(DynamicSpeakerLayerNorm):
    """DSLN whose statistics are mixed with those of a batch-shuffled speaker."""

    def forward(self, h, speaker, shuffled=None, gamma=None, mask=None):
        weight, bias = self.statistics(speaker)
        if shuffled is not None and gamma is not None:
            weight_s, bias_s = self.statistics(shuffled)
            weight, bias = mix_statistics(weight, weight_s, bias, bias_s, gamma)
        return self.modulate(h, weight, bias, mask)


def dsln(h, speaker, layer: DynamicSpeakerLayerNorm, mask=None):
    return layer.modulate(h, *layer.statistics(speaker), mask)


def mdsln(h, speaker, shuffled, gamma, layer: DynamicSpeakerLayerNorm, mask=None):
    weight, bias = layer.statistics(speaker)
    weight_s, bias_s = layer.statistics(shuffled)
    return layer.modulate(h, *mix_statistics(weight, weight_s, bias, bias_s, gamma), mask)
