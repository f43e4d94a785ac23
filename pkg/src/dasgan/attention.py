"""Self-attention block for feature maps (SAGAN style)."""

from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigurationError
from .spectral import spectral_conv


class SelfAttention2d(nn.Module):
    """Residual self-attention over spatial positions.

    Output is ``x + gamma * attended(x)``; ``gamma`` starts at zero so the
    block begins as the identity map. Query/key channels are the input
    channels divided by ``reduction``.
    """

    def __init__(self, channels: int, reduction: int = 4, use_spectral_norm: bool = True):
        super().__init__()
        if channels % reduction != 0:
            raise ConfigurationError(
                f"channels ({channels}) must be divisible by reduction ({reduction})"
            )
        key_channels = channels // reduction
        self.query = spectral_conv(nn.Conv2d(channels, key_channels, 1), use_spectral_norm)
        self.key = spectral_conv(nn.Conv2d(channels, key_channels, 1), use_spectral_norm)
        self.value = spectral_conv(nn.Conv2d(channels, channels, 1), use_spectral_norm)
        self.gamma = nn.Parameter(torch.zeros(1))

    def attention_weights(self, x: torch.Tensor) -> torch.Tensor:
        """Attention matrix (N, HW, HW); each query row sums to 1."""
        n, _, h, w = x.shape
        q = self.query(x).flatten(2)  # N, K, HW
        k = self.key(x).flatten(2)
        logits = torch.bmm(q.transpose(1, 2), k)  # N, HW(query), HW(key)
        return F.softmax(logits, dim=2)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        n, c, h, w = x.shape
        attn = self.attention_weights(x)
        v = self.value(x).flatten(2)  # N, C, HW
        out = torch.bmm(v, attn.transpose(1, 2)).reshape(n, c, h, w)
        return x + self.gamma * out
