"""Query-guided region proposals.

A pooled crop of the query feature map produces a channel gate that is
applied to the gallery map only; a regression-free RPN head then scores every
anchor for query similarity. Its logits are added to the generic RPN's
objectness before ranking and NMS.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from torchvision.ops import roi_pool

from .boxgeom import BBox, Proposal, clip_boxes, decode_deltas, nms_indices

FUSIONS = ("logit", "probability")


def _box_tensor(box, like: torch.Tensor) -> torch.Tensor:
    if isinstance(box, BBox):
        box = box.to_list()
    return torch.as_tensor(box, dtype=like.dtype, device=like.device).reshape(4)


class QueryGate(nn.Module):
    """Channel gate from an ROI-pooled query crop.

    ``FC1`` sees every pixel of every channel of the ``pool_size x pool_size``
    crop (no global squeeze), reducing to ``C/r``; ``FC2`` expands back to ``C``.
    """

    def __init__(self, channels: int, pool_size: int = 7, reduction: int = 16,
                 stride: int = 16):
        super().__init__()
        if reduction < 1 or channels % reduction:
            raise ValueError(f"channels={channels} not divisible by reduction={reduction}")
        self.channels = channels
        self.pool_size = pool_size
        self.stride = stride
        self.fc1 = nn.Linear(channels * pool_size * pool_size, channels // reduction)
        self.fc2 = nn.Linear(channels // reduction, channels)

    def pool_query(self, query_map: torch.Tensor, query_box) -> torch.Tensor:
        if query_map.dim() == 3:
            query_map = query_map[None]
        box = _box_tensor(query_box, query_map)
        h, w = query_map.shape[-2:]
        if (box[0] < 0 or box[1] < 0 or box[2] > w * self.stride or box[3] > h * self.stride
                or box[2] <= box[0] or box[3] <= box[1]):
            raise ValueError(f"query box {box.tolist()} falls outside the "
                             f"{h}x{w} feature map at stride {self.stride}")
        rois = torch.cat([box.new_zeros(1), box])[None]
        return roi_pool(query_map, rois, (self.pool_size, self.pool_size), 1.0 / self.stride)[0]

    def gate_from_pooled(self, pooled: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.fc2(F.relu(self.fc1(pooled.reshape(-1)))))

    def forward(self, gallery_map: torch.Tensor, query_map: torch.Tensor, query_box):
        """Return ``(gate[c] * gallery_map[c], gate)``; the query map is left untouched."""
        gate = self.gate_from_pooled(self.pool_query(query_map, query_box))
        return gallery_map * gate[:, None, None], gate


def query_gate(gallery_map, query_map, query_box, params: QueryGate):
    return params(gallery_map, query_map, query_box)


class RPNHead(nn.Module):
    """3x3 conv trunk with one binary logit per anchor and optional box deltas."""

    def __init__(self, channels: int, num_anchors: int, regression: bool = True,
                 hidden: int | None = None):
        super().__init__()
        hidden = hidden or channels
        self.num_anchors = num_anchors
        self.conv = nn.Conv2d(channels, hidden, 3, 1, 1)
        self.cls = nn.Conv2d(hidden, num_anchors, 1)
        self.reg = nn.Conv2d(hidden, 4 * num_anchors, 1) if regression else None

    def forward(self, fmap: torch.Tensor):
        """Logits ``(H*W*A,)`` and deltas ``(H*W*A, 4)`` (``None`` without regression)."""
        if fmap.dim() == 3:
            fmap = fmap[None]
        if fmap.shape[0] != 1:
            raise ValueError("RPNHead scores one image at a time")
        t = F.relu(self.conv(fmap))
        logits = self.cls(t).permute(0, 2, 3, 1).reshape(-1)
        deltas = None
        if self.reg is not None:
            _, _, h, w = t.shape
            deltas = (self.reg(t).view(1, self.num_anchors, 4, h, w)
                      .permute(0, 3, 4, 1, 2).reshape(-1, 4))
        return logits, deltas


def rpn_star_scores(gated_map: torch.Tensor, anchors, head: RPNHead) -> torch.Tensor:
    logits, _ = head(gated_map)
    if len(logits) != len(anchors):
        raise ValueError(f"{len(logits)} logits for {len(anchors)} anchors")
    return logits


class QRPN(nn.Module):
    def __init__(self, channels: int, num_anchors: int, pool_size: int = 7,
                 reduction: int = 16, stride: int = 16):
        super().__init__()
        self.gate = QueryGate(channels, pool_size, reduction, stride)
        self.head = RPNHead(channels, num_anchors, regression=False)

    def forward(self, gallery_map, query_map, query_box):
        gated, gate = self.gate(gallery_map, query_map, query_box)
        logits, _ = self.head(gated)
        return logits, gate


def fuse_scores(objectness: torch.Tensor, query_similarity: torch.Tensor | None,
                fusion: str = "logit"):
    """Per-anchor ``(objectness, similarity, fused)`` in the chosen fusion space."""
    if fusion not in FUSIONS:
        raise ValueError(f"fusion must be one of {FUSIONS}")
    if query_similarity is not None and query_similarity.shape != objectness.shape:
        raise ValueError("objectness and query similarity must align with the anchors")
    obj, sim = objectness, query_similarity
    if fusion == "probability":
        obj = torch.sigmoid(obj)
        sim = None if sim is None else torch.sigmoid(sim)
    fused = obj if sim is None else obj + sim
    return obj, sim, fused


def propose(objectness: torch.Tensor, query_similarity: torch.Tensor | None,
            anchors: torch.Tensor, regression_offsets: torch.Tensor, image_size: tuple[int, int],
            top_n: int = 100, nms_thresh: float = 0.7, pre_nms_top_n: int = 1000,
            fusion: str = "logit", min_size: float = 1.0):
    """Tensor form of :func:`fuse_and_propose`.

    Returns ``(boxes, objectness, similarity_or_None, fused)`` for the
    survivors, ordered by fused score. ``image_size`` is ``(w, h)``.
    """
    if not (len(objectness) == len(anchors) == len(regression_offsets)):
        raise ValueError("objectness, anchors and offsets must have equal length")
    with torch.no_grad():
        obj, sim, fused = fuse_scores(objectness.detach(),
                                      None if query_similarity is None else query_similarity.detach(),
                                      fusion)
        boxes = decode_deltas(anchors.to(regression_offsets.dtype), regression_offsets.detach())
        boxes = clip_boxes(boxes, *image_size)
        ok = ((boxes[:, 2] - boxes[:, 0]) >= min_size) & ((boxes[:, 3] - boxes[:, 1]) >= min_size)
        idx = torch.nonzero(ok).reshape(-1)
        order = torch.argsort(-fused[idx], stable=True)[:pre_nms_top_n]
        idx = idx[order]
        keep = nms_indices(boxes[idx].double().numpy(), fused[idx].double().numpy(), nms_thresh,
                           limit=top_n)
        idx = idx[torch.as_tensor(keep, dtype=torch.long)]
    return (boxes[idx], obj[idx], None if sim is None else sim[idx], fused[idx])


def fuse_and_propose(objectness, query_similarity, anchors, regression_offsets,
                     top_n: int, nms_thresh: float, image_size: tuple[int, int],
                     fusion: str = "logit", pre_nms_top_n: int = 1000) -> list[Proposal]:
    """Decode the generic RPN's offsets, rank by summed score, NMS, keep ``top_n``."""
    objectness = torch.as_tensor(objectness, dtype=torch.float64)
    if query_similarity is not None:
        query_similarity = torch.as_tensor(query_similarity, dtype=torch.float64)
    if isinstance(anchors, Sequence) and anchors and not isinstance(anchors, np.ndarray):
        anchors = np.array([getattr(a, "box", a).to_list() for a in anchors])
    anchors = torch.as_tensor(np.asarray(anchors), dtype=torch.float64)
    offsets = torch.as_tensor(regression_offsets, dtype=torch.float64)
    boxes, obj, sim, _ = propose(objectness, query_similarity, anchors, offsets, image_size,
                                 top_n, nms_thresh, pre_nms_top_n, fusion)
    return [Proposal(BBox(*b.tolist()), float(o), None if sim is None else float(s))
            for b, o, s in zip(boxes, obj, sim if sim is not None else [None] * len(obj))]


def qrpn_loss(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean binary cross-entropy over the sampled anchors."""
    if logits.numel() == 0:
        raise ValueError("empty anchor batch")
    labels = labels.to(logits.dtype)
    if ((labels != 0) & (labels != 1)).any():
        raise ValueError("labels must be binary")
    return F.binary_cross_entropy_with_logits(logits, labels)
