"""Siamese residual encoder with query-guided channel gating between the streams."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .qsse import QSSE

# arch -> (stem kind, widths, blocks per stage, strides per stage)
ARCHS = {
    "tiny": ("small", (16, 32, 64), (1, 1, 1), (1, 2, 2)),
    "resnet10": ("imagenet", (64, 128, 256, 512), (1, 1, 1, 1), (1, 2, 2, 2)),
    "resnet18": ("imagenet", (64, 128, 256, 512), (2, 2, 2, 2), (1, 2, 2, 2)),
}


@dataclass
class BackboneConfig:
    arch: str = "tiny"
    embed_dim: int | None = None
    image_size: int = 32
    use_qsse: bool = True
    qsse_stage_mask: Sequence[bool] | None = None
    reduction: int = 16
    gate_bias: float = 0.0
    detection_mode: bool = False
    widths: Sequence[int] | None = None
    in_channels: int = 3

    def __post_init__(self):
        if self.arch not in ARCHS:
            raise ValueError(f"unknown arch {self.arch!r}; choose from {sorted(ARCHS)}")
        if self.image_size <= 0:
            raise ValueError("image_size must be positive")
        n = len(self.stage_widths)
        if self.qsse_stage_mask is None:
            self.qsse_stage_mask = (True,) * n
        self.qsse_stage_mask = tuple(bool(m) for m in self.qsse_stage_mask)
        if len(self.qsse_stage_mask) != n:
            raise ValueError(f"qsse_stage_mask needs {n} entries")
        if self.embed_dim is not None and self.embed_dim <= 0:
            raise ValueError("embed_dim must be positive")

    @property
    def stage_widths(self) -> tuple[int, ...]:
        widths = tuple(self.widths) if self.widths is not None else ARCHS[self.arch][1]
        if self.detection_mode and self.arch != "tiny":
            widths = widths[:3]
        return widths

    @property
    def stage_blocks(self) -> tuple[int, ...]:
        return ARCHS[self.arch][2][: len(self.stage_widths)]

    @property
    def stage_strides(self) -> tuple[int, ...]:
        strides = ARCHS[self.arch][3][: len(self.stage_widths)]
        if self.detection_mode and self.arch == "tiny":
            strides = (2, 2, 2)
        return strides

    @property
    def out_channels(self) -> int:
        return self.stage_widths[-1]

    @property
    def feature_stride(self) -> int:
        stride = 4 if ARCHS[self.arch][0] == "imagenet" else 1
        for s in self.stage_strides:
            stride *= s
        return stride

    @property
    def embedding_dim(self) -> int:
        return self.embed_dim or self.out_channels


@dataclass
class PairFeatures:
    f_q: torch.Tensor
    f_g: torch.Tensor
    pooled_q: torch.Tensor
    pooled_g: torch.Tensor
    map_q: torch.Tensor | None = None
    map_g: torch.Tensor | None = None
    gates: list[torch.Tensor] = field(default_factory=list)


class BasicBlock(nn.Module):
    """Residual block exposing its identity path and residual branch separately."""

    def __init__(self, cin: int, cout: int, stride: int = 1):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(cout)
        self.shortcut = None
        if stride != 1 or cin != cout:
            self.shortcut = nn.Sequential(nn.Conv2d(cin, cout, 1, stride, bias=False),
                                          nn.BatchNorm2d(cout))

    def branches(self, x):
        identity = x if self.shortcut is None else self.shortcut(x)
        u = self.bn2(self.conv2(F.relu(self.bn1(self.conv1(x)))))
        return identity, u

    def forward(self, x, gate: float = 1.0):
        identity, u = self.branches(x)
        return F.relu(identity + gate * u)


class SiameseEncoder(nn.Module):
    """Weight-shared encoder for (query, gallery) image pairs.

    Both streams run as one concatenated batch so convolution and batch-norm
    parameters are shared; at every residual block of a masked stage, a
    :class:`QSSE` gate computed from both streams rescales the residual
    branches. Unmasked blocks (and all blocks when ``use_qsse`` is off) apply
    the constant ``fixed_gate`` instead, 1.0 being a plain ResNet block.
    """

    def __init__(self, config: BackboneConfig):
        super().__init__()
        self.config = config
        stem_kind = ARCHS[config.arch][0]
        w0 = config.stage_widths[0]
        if stem_kind == "imagenet":
            self.stem = nn.Sequential(
                nn.Conv2d(config.in_channels, w0, 7, 2, 3, bias=False), nn.BatchNorm2d(w0),
                nn.ReLU(inplace=True), nn.MaxPool2d(3, 2, 1))
        else:
            self.stem = nn.Sequential(
                nn.Conv2d(config.in_channels, w0, 3, 1, 1, bias=False), nn.BatchNorm2d(w0),
                nn.ReLU(inplace=True))
        self.blocks = nn.ModuleList()
        self.gates = nn.ModuleDict()
        cin = w0
        for si, (w, n, s) in enumerate(zip(config.stage_widths, config.stage_blocks,
                                           config.stage_strides)):
            for bi in range(n):
                idx = len(self.blocks)
                self.blocks.append(BasicBlock(cin, w, s if bi == 0 else 1))
                if config.use_qsse and config.qsse_stage_mask[si]:
                    self.gates[str(idx)] = QSSE(w, config.reduction, config.gate_bias)
                cin = w
        self.project = None
        if config.embedding_dim != config.out_channels:
            self.project = nn.Linear(config.out_channels, config.embedding_dim)

    def _pool(self, fmap):
        pooled = fmap.mean(dim=(-2, -1))
        if self.project is not None:
            pooled = self.project(pooled)
        return pooled

    def encode_single(self, images: torch.Tensor, fixed_gate: float = 1.0):
        """Uncoupled single-stream pass with a constant gate at every block.

        Returns ``(embedding, pooled, feature_map)``.
        """
        x = self.stem(images)
        for block in self.blocks:
            x = block(x, fixed_gate)
        pooled = self._pool(x)
        return F.normalize(pooled, dim=-1), pooled, x

    def forward(self, img_q: torch.Tensor, img_g: torch.Tensor, use_qsse: bool = True,
                fixed_gate: float = 1.0) -> PairFeatures:
        if img_q.shape != img_g.shape:
            raise ValueError(f"query/gallery size mismatch: {tuple(img_q.shape)} vs {tuple(img_g.shape)}")
        b = img_q.shape[0]
        x = self.stem(torch.cat([img_q, img_g], dim=0))
        gates = []
        for idx, block in enumerate(self.blocks):
            key = str(idx)
            if use_qsse and key in self.gates:
                identity, u = block.branches(x)
                xq, xg, s = self.gates[key](identity[:b], identity[b:], u[:b], u[b:])
                x = F.relu(torch.cat([xq, xg], dim=0))
                gates.append(s)
            else:
                x = block(x, fixed_gate)
        pooled = self._pool(x)
        emb = F.normalize(pooled, dim=-1)
        maps = (x[:b], x[b:]) if self.config.detection_mode else (None, None)
        return PairFeatures(emb[:b], emb[b:], pooled[:b], pooled[b:], maps[0], maps[1], gates)


def encode_pair(img_q, img_g, encoder: SiameseEncoder, **kwargs) -> PairFeatures:
    return encoder(img_q, img_g, **kwargs)


def rotate_batch(images: torch.Tensor, labels: torch.Tensor):
    """Stack the batch at 0, 90, 180 and 270 degrees counter-clockwise.

    Returns ``(images, labels, rotation_labels)`` with 4x the batch size,
    grouped by rotation label.
    """
    if images.shape[-1] != images.shape[-2]:
        raise ValueError(f"rotation needs square images, got {tuple(images.shape[-2:])}")
    rotated = torch.cat([torch.rot90(images, k, dims=(-2, -1)) for k in range(4)], dim=0)
    rot_labels = torch.arange(4).repeat_interleave(images.shape[0])
    return rotated, labels.repeat(4), rot_labels


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())
