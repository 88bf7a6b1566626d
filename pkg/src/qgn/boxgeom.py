"""Box algebra for the detection path.

Boxes use the half-open corner convention ``[x1, x2) x [y1, y2)`` so that
``area = (x2 - x1) * (y2 - y1)`` with no ``+1`` terms. Array helpers accept
``(N, 4)`` float arrays in the same ``(x1, y1, x2, y2)`` order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
import torch

SCORE_KEYS = ("objectness", "fused", "similarity")

# log(1000 / 16), the usual clamp on decoded width/height deltas
_BBOX_XFORM_CLIP = math.log(1000.0 / 16)


@dataclass(frozen=True)
class BBox:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        coords = (self.x1, self.y1, self.x2, self.y2)
        if not all(math.isfinite(c) for c in coords):
            raise ValueError(f"non-finite box coordinates: {coords}")
        if not (self.x1 < self.x2 and self.y1 < self.y2):
            raise ValueError(f"degenerate box: {coords}")

    @classmethod
    def from_list(cls, values: Sequence[float]) -> "BBox":
        if len(values) != 4:
            raise ValueError(f"expected 4 numbers, got {len(values)}")
        return cls(*(float(v) for v in values))

    def to_list(self) -> list[float]:
        return [self.x1, self.y1, self.x2, self.y2]

    def as_array(self) -> np.ndarray:
        return np.array(self.to_list(), dtype=np.float64)

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> tuple[float, float]:
        return (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))

    def inside(self, image_w: float, image_h: float) -> bool:
        return self.x1 >= 0 and self.y1 >= 0 and self.x2 <= image_w and self.y2 <= image_h


@dataclass(frozen=True)
class Anchor:
    box: BBox
    scale_index: int
    ratio_index: int
    cell_row: int
    cell_col: int


@dataclass(frozen=True)
class Proposal:
    box: BBox
    objectness: float
    query_similarity: float | None = None

    @property
    def fused_score(self) -> float:
        if self.query_similarity is None:
            return self.objectness
        return self.objectness + self.query_similarity

    def score(self, key: str) -> float:
        if key == "objectness":
            return self.objectness
        if key == "fused":
            return self.fused_score
        if key == "similarity":
            if self.query_similarity is None:
                raise ValueError("proposal has no query similarity score")
            return self.query_similarity
        raise ValueError(f"unknown score key {key!r}; expected one of {SCORE_KEYS}")


def iou(a: BBox, b: BBox) -> float:
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def box_area(boxes: np.ndarray) -> np.ndarray:
    boxes = np.asarray(boxes, dtype=np.float64)
    return (boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1])


def box_iou(boxes1: np.ndarray, boxes2: np.ndarray) -> np.ndarray:
    """Pairwise IoU between two box arrays, shape ``(N, M)``."""
    b1 = np.asarray(boxes1, dtype=np.float64).reshape(-1, 4)
    b2 = np.asarray(boxes2, dtype=np.float64).reshape(-1, 4)
    lt = np.maximum(b1[:, None, :2], b2[None, :, :2])
    rb = np.minimum(b1[:, None, 2:], b2[None, :, 2:])
    wh = np.clip(rb - lt, 0.0, None)
    inter = wh[..., 0] * wh[..., 1]
    union = box_area(b1)[:, None] + box_area(b2)[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)
    return out


def nms_indices(boxes: np.ndarray, scores: np.ndarray, iou_threshold: float,
                limit: int | None = None) -> np.ndarray:
    """Greedy NMS over arrays.

    Returns indices of kept boxes ordered by descending score; equal scores
    keep their input order. ``limit`` stops after that many survivors.
    """
    if not 0.0 < iou_threshold <= 1.0:
        raise ValueError(f"iou_threshold must lie in (0, 1], got {iou_threshold}")
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    order = np.argsort(-scores, kind="stable")
    keep = []
    while len(order) and (limit is None or len(keep) < limit):
        best = order[0]
        keep.append(best)
        rest = order[1:]
        order = rest[box_iou(boxes[best], boxes[rest])[0] <= iou_threshold]
    return np.asarray(keep, dtype=np.int64)


def nms(proposals: Sequence[Proposal], iou_threshold: float = 0.4,
        score_key: str = "fused") -> list[Proposal]:
    if score_key not in SCORE_KEYS:
        raise ValueError(f"unknown score key {score_key!r}; expected one of {SCORE_KEYS}")
    if not 0.0 < iou_threshold <= 1.0:
        raise ValueError(f"iou_threshold must lie in (0, 1], got {iou_threshold}")
    if len(proposals) == 0:
        return []
    boxes = np.array([p.box.to_list() for p in proposals])
    scores = np.array([p.score(score_key) for p in proposals])
    return [proposals[i] for i in nms_indices(boxes, scores, iou_threshold)]


def anchor_boxes(fmap_h: int, fmap_w: int, stride: int, scales: Sequence[float],
                 ratios: Sequence[float]) -> np.ndarray:
    """Anchor corners as an ``(H*W*S*R, 4)`` array.

    Row-major over cells, then scale, then ratio; this matches the
    ``(H, W, A)`` flattening of an RPN head with ``A = S*R`` outputs per cell.
    ``ratio`` is height/width and the anchor area is ``(scale*stride)**2``.
    """
    if fmap_h <= 0 or fmap_w <= 0 or stride <= 0:
        raise ValueError("feature-map dimensions and stride must be positive")
    sizes = []
    for s in scales:
        side = s * stride
        for r in ratios:
            w = side / math.sqrt(r)
            h = side * math.sqrt(r)
            sizes.append((w, h))
    sizes = np.asarray(sizes, dtype=np.float64)
    cy = (np.arange(fmap_h, dtype=np.float64) + 0.5) * stride
    cx = (np.arange(fmap_w, dtype=np.float64) + 0.5) * stride
    cyy, cxx = np.meshgrid(cy, cx, indexing="ij")
    centers = np.stack([cxx, cyy], axis=-1).reshape(-1, 1, 2)
    half = sizes[None, :, :] / 2.0
    boxes = np.concatenate([centers - half, centers + half], axis=-1)
    return boxes.reshape(-1, 4)


def generate_anchors(fmap_h: int, fmap_w: int, stride: int, scales: Sequence[float],
                     ratios: Sequence[float]) -> list[Anchor]:
    boxes = anchor_boxes(fmap_h, fmap_w, stride, scales, ratios)
    anchors = []
    n_s, n_r = len(scales), len(ratios)
    for idx, b in enumerate(boxes):
        cell, rest = divmod(idx, n_s * n_r)
        si, ri = divmod(rest, n_r)
        row, col = divmod(cell, fmap_w)
        anchors.append(Anchor(BBox(*b.tolist()), si, ri, row, col))
    return anchors


def _as_box_array(boxes: Iterable[BBox] | np.ndarray) -> np.ndarray:
    if isinstance(boxes, np.ndarray):
        return boxes.reshape(-1, 4).astype(np.float64)
    items = list(boxes)
    if items and isinstance(items[0], Anchor):
        items = [a.box for a in items]
    return np.array([b.to_list() for b in items], dtype=np.float64).reshape(-1, 4)


def jitter_box(target: BBox, image_w: int, image_h: int, rng: np.random.Generator,
               max_shift_frac: float = 0.2, min_iou: float = 0.5,
               max_tries: int = 100) -> BBox:
    """Move ``target`` randomly in its neighbourhood.

    The center is shifted by at most ``max_shift_frac`` of the box side per
    axis and each side rescaled uniformly by ``1 +/- max_shift_frac / 2``. The result is
    translated (or clipped when larger than the image) to stay inside the image
    and redrawn until its IoU with ``target`` reaches ``min_iou``; the target
    itself is returned if no draw qualifies.
    """
    if max_shift_frac == 0:
        return target
    lo, hi = 1.0 - max_shift_frac / 2, 1.0 + max_shift_frac / 2
    w, h = target.width, target.height
    cx, cy = target.center
    for _ in range(max_tries):
        dx, dy = rng.uniform(-max_shift_frac, max_shift_frac, size=2)
        sw, sh = rng.uniform(lo, hi, size=2)
        nw, nh = min(w * sw, image_w), min(h * sh, image_h)
        ncx, ncy = cx + dx * w, cy + dy * h
        x1 = min(max(ncx - nw / 2, 0.0), image_w - nw)
        y1 = min(max(ncy - nh / 2, 0.0), image_h - nh)
        box = BBox(x1, y1, x1 + nw, y1 + nh)
        if iou(box, target) >= min_iou:
            return box
    return target


@dataclass
class AnchorSample:
    """Labelled anchor batch: ``indices`` into the anchor list with 1/0 ``labels``."""

    indices: np.ndarray
    labels: np.ndarray
    targets: list[BBox] = field(default_factory=list)
    no_positive: bool = False

    @property
    def num_positive(self) -> int:
        return int(self.labels.sum())

    @property
    def positive_fraction(self) -> float:
        return self.num_positive / max(len(self.labels), 1)


def _draw(pool: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    if len(pool) <= n:
        return pool
    return np.sort(rng.choice(pool, size=n, replace=False))


def sample_qrpn_anchors(anchors, target: BBox, other_person_boxes: Sequence[BBox],
                        rng: np.random.Generator, batch: int = 128, pos_iou: float = 0.6,
                        neg_iou: float = 0.3, pos_fraction: float = 0.25, num_jitter: int = 4,
                        image_size: tuple[int, int] | None = None,
                        max_shift_frac: float = 0.2) -> AnchorSample:
    """Label anchors for the query-guided proposal head.

    Positives reach ``pos_iou`` with the target or one of ``num_jitter``
    jittered copies of it. Negatives stay below ``neg_iou`` with the target,
    its copies and every other person, so people who are positives for the
    generic RPN are never pushed down here. ``image_size`` is ``(w, h)``.
    """
    boxes = _as_box_array(anchors)
    targets = [target]
    if num_jitter > 0 and image_size is not None:
        targets += [jitter_box(target, image_size[0], image_size[1], rng, max_shift_frac)
                    for _ in range(num_jitter)]
    t_iou = box_iou(boxes, _as_box_array(targets)).max(axis=1)
    pos_pool = np.flatnonzero(t_iou >= pos_iou)
    neg_mask = t_iou < neg_iou
    if len(other_person_boxes):
        o_iou = box_iou(boxes, _as_box_array(other_person_boxes)).max(axis=1)
        neg_mask &= o_iou < neg_iou
    neg_pool = np.flatnonzero(neg_mask)

    pos = _draw(pos_pool, int(batch * pos_fraction), rng)
    neg = _draw(neg_pool, batch - len(pos), rng)
    indices = np.concatenate([pos, neg]).astype(np.int64)
    labels = np.concatenate([np.ones(len(pos)), np.zeros(len(neg))]).astype(np.int64)
    return AnchorSample(indices, labels, targets, no_positive=len(pos) == 0)


def sample_rpn_anchors(anchors, gt_boxes: Sequence[BBox], rng: np.random.Generator,
                       batch: int = 256, pos_iou: float = 0.7, neg_iou: float = 0.3,
                       pos_fraction: float = 0.5) -> AnchorSample:
    """Standard RPN anchor labelling; every ground-truth box is a positive target.

    Besides the IoU rule, the best-matching anchor of each box is a positive.
    ``targets`` holds, per sampled anchor, the matched ground-truth box.
    """
    boxes = _as_box_array(anchors)
    if len(gt_boxes) == 0:
        neg = _draw(np.arange(len(boxes)), batch, rng)
        return AnchorSample(neg.astype(np.int64), np.zeros(len(neg), dtype=np.int64), [],
                            no_positive=True)
    gts = _as_box_array(gt_boxes)
    ious = box_iou(boxes, gts)
    best = ious.max(axis=1)
    matched = ious.argmax(axis=1)
    pos_mask = best >= pos_iou
    # ties included, as in the usual low-quality-match rule
    best_per_gt = ious.max(axis=0)
    for j in range(len(gts)):
        if best_per_gt[j] > 0:
            hits = np.flatnonzero(ious[:, j] == best_per_gt[j])
            pos_mask[hits] = True
            matched[hits] = j
    neg_mask = (best < neg_iou) & ~pos_mask
    pos = _draw(np.flatnonzero(pos_mask), int(batch * pos_fraction), rng)
    neg = _draw(np.flatnonzero(neg_mask), batch - len(pos), rng)
    indices = np.concatenate([pos, neg]).astype(np.int64)
    labels = np.concatenate([np.ones(len(pos)), np.zeros(len(neg))]).astype(np.int64)
    targets = [gt_boxes[matched[i]] for i in pos]
    return AnchorSample(indices, labels, targets, no_positive=len(pos) == 0)


def encode_deltas(reference: torch.Tensor, gt: torch.Tensor,
                  weights: tuple[float, float, float, float] = (1.0, 1.0, 1.0, 1.0)) -> torch.Tensor:
    """Faster R-CNN box parameterisation ``(dx, dy, dw, dh)`` of ``gt`` w.r.t. ``reference``."""
    wx, wy, ww, wh = weights
    rw = reference[:, 2] - reference[:, 0]
    rh = reference[:, 3] - reference[:, 1]
    rx = reference[:, 0] + 0.5 * rw
    ry = reference[:, 1] + 0.5 * rh
    gw = gt[:, 2] - gt[:, 0]
    gh = gt[:, 3] - gt[:, 1]
    gx = gt[:, 0] + 0.5 * gw
    gy = gt[:, 1] + 0.5 * gh
    return torch.stack([wx * (gx - rx) / rw, wy * (gy - ry) / rh,
                        ww * torch.log(gw / rw), wh * torch.log(gh / rh)], dim=1)


def decode_deltas(reference: torch.Tensor, deltas: torch.Tensor,
                  weights: tuple[float, float, float, float] = (1.0, 1.0, 1.0, 1.0)) -> torch.Tensor:
    wx, wy, ww, wh = weights
    rw = reference[:, 2] - reference[:, 0]
    rh = reference[:, 3] - reference[:, 1]
    rx = reference[:, 0] + 0.5 * rw
    ry = reference[:, 1] + 0.5 * rh
    dx, dy = deltas[:, 0] / wx, deltas[:, 1] / wy
    dw = torch.clamp(deltas[:, 2] / ww, max=_BBOX_XFORM_CLIP)
    dh = torch.clamp(deltas[:, 3] / wh, max=_BBOX_XFORM_CLIP)
    cx, cy = dx * rw + rx, dy * rh + ry
    w, h = torch.exp(dw) * rw, torch.exp(dh) * rh
    return torch.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], dim=1)


def clip_boxes(boxes: torch.Tensor, image_w: int, image_h: int) -> torch.Tensor:
    x = boxes[:, 0::2].clamp(0, image_w)
    y = boxes[:, 1::2].clamp(0, image_h)
    return torch.stack([x[:, 0], y[:, 0], x[:, 1], y[:, 1]], dim=1)
