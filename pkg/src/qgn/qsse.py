"""Siamese squeeze-and-excitation: one channel gate computed from both streams."""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F


def squeeze(u: torch.Tensor) -> torch.Tensor:
    """Global average pool over the two trailing spatial axes.

    Accepts ``(C, H, W)`` or ``(B, C, H, W)`` and returns ``(C,)`` / ``(B, C)``.
    """
    if u.dim() < 3 or u.shape[-1] == 0 or u.shape[-2] == 0:
        raise ValueError(f"expected a feature map with positive spatial extent, got {tuple(u.shape)}")
    return u.mean(dim=(-2, -1))


class QSSE(nn.Module):
    """Joint query/gallery channel gate.

    The squeezed descriptors of both streams are concatenated, passed through
    a ``2C -> 2C/r -> C`` bottleneck (ReLU, then sigmoid) and the resulting
    gate scales the residual branch of *both* streams before the skip sum.

    Args:
        channels: channel count ``C`` of the gated feature maps.
        reduction: bottleneck reduction ratio ``r``; ``2C`` must be divisible by it.
        gate_bias: initial bias of the output layer. A positive value starts
            the gate near 1, i.e. close to the ungated residual block.
    """

    def __init__(self, channels: int, reduction: int = 16, gate_bias: float = 0.0):
        super().__init__()
        if reduction < 1 or (2 * channels) % reduction:
            raise ValueError(f"2*channels={2 * channels} not divisible by reduction={reduction}")
        self.channels = channels
        self.reduction = reduction
        hidden = 2 * channels // reduction
        self.fc1 = nn.Linear(2 * channels, hidden)
        self.fc2 = nn.Linear(hidden, channels)
        if gate_bias:
            nn.init.constant_(self.fc2.bias, gate_bias)

    @property
    def hidden(self) -> int:
        return self.fc1.out_features

    def excite(self, z_q: torch.Tensor, z_g: torch.Tensor) -> torch.Tensor:
        if z_q.shape != z_g.shape or z_q.shape[-1] != self.channels:
            raise ValueError(f"descriptor shapes {tuple(z_q.shape)}/{tuple(z_g.shape)} "
                             f"do not match C={self.channels}")
        return torch.sigmoid(self.fc2(F.relu(self.fc1(torch.cat([z_q, z_g], dim=-1)))))

    def forward(self, x_q, x_g, u_q, u_g):
        """Return ``(x_q + s*u_q, x_g + s*u_g, s)`` with ``s = excite(squeeze(u_q), squeeze(u_g))``."""
        shape = x_q.shape
        if not (x_g.shape == u_q.shape == u_g.shape == shape):
            raise ValueError("all four feature maps must share one shape")
        if shape[-3] != self.channels:
            raise ValueError(f"expected {self.channels} channels, got {shape[-3]}")
        s = self.excite(squeeze(u_q), squeeze(u_g))
        gate = s[..., :, None, None]
        return x_q + gate * u_q, x_g + gate * u_g, s


def excite(z_q: torch.Tensor, z_g: torch.Tensor, params: QSSE) -> torch.Tensor:
    return params.excite(z_q, z_g)


def qsse_forward(x_q, x_g, u_q, u_g, params: QSSE):
    return params(x_q, x_g, u_q, u_g)
