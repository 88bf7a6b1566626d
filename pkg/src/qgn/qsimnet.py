"""Learned similarity head over query/gallery embedding pairs."""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

# column of the two-way output holding the "same identity" probability
SIMILAR = 1


class QSimNet(nn.Module):
    """Squared difference -> batch-norm -> 2-way linear -> softmax.

    In eval mode the batch-norm uses its frozen running statistics, so a
    single pair can be scored without batch context.
    """

    def __init__(self, embed_dim: int):
        super().__init__()
        self.embed_dim = embed_dim
        self.bn = nn.BatchNorm1d(embed_dim)
        self.fc = nn.Linear(embed_dim, 2)

    def distance(self, f_q: torch.Tensor, f_g: torch.Tensor) -> torch.Tensor:
        if f_q.shape != f_g.shape or f_q.shape[-1] != self.embed_dim:
            raise ValueError(f"embedding shapes {tuple(f_q.shape)}/{tuple(f_g.shape)} "
                             f"do not match embed_dim={self.embed_dim}")
        return (f_q - f_g) ** 2

    def forward(self, f_q: torch.Tensor, f_g: torch.Tensor) -> torch.Tensor:
        """Two-way logits ``(dissimilar, similar)`` for each row pair."""
        d = self.distance(f_q, f_g)
        squeeze = d.dim() == 1
        if squeeze:
            d = d[None]
        logits = self.fc(self.bn(d))
        return logits[0] if squeeze else logits

    def similarity(self, f_q: torch.Tensor, f_g: torch.Tensor) -> torch.Tensor:
        return F.softmax(self(f_q, f_g), dim=-1)[..., SIMILAR]


def sim_score(f_q: torch.Tensor, f_g: torch.Tensor, params: QSimNet):
    """Return ``(p_similar, p_dissimilar)``."""
    probs = F.softmax(params(f_q, f_g), dim=-1)
    return probs[..., SIMILAR], probs[..., 1 - SIMILAR]


def aggregate_shots(query_feats: torch.Tensor, gallery_feats: torch.Tensor,
                    k: int | None = None):
    """Sum the K per-exemplar features of each side and L2-normalise.

    ``query_feats`` and ``gallery_feats`` are ``(K, D)``: row ``i`` of the
    gallery side is the gallery re-encoded together with query exemplar ``i``.
    """
    if query_feats.shape != gallery_feats.shape or query_feats.dim() != 2:
        raise ValueError("expected two (K, D) feature stacks of equal shape")
    if k is not None and query_feats.shape[0] != k:
        raise ValueError(f"expected {k} exemplars, got {query_feats.shape[0]}")
    return (F.normalize(query_feats.sum(dim=0), dim=-1),
            F.normalize(gallery_feats.sum(dim=0), dim=-1))


def aggregate_5shot(query_feats, gallery_feats):
    return aggregate_shots(query_feats, gallery_feats, k=5)


def sim_loss(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean negative log-probability of the true class over the pairs."""
    if logits.numel() == 0:
        raise ValueError("empty pair batch")
    return F.cross_entropy(logits, labels.long())
