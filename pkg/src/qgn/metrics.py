"""Person-search retrieval metrics and query-specific proposal counting.

Average precision is the area under the exact precision/recall staircase
(all-points interpolation). Recall is taken against every ground-truth box
of the query, so detector misses lower the AP.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Hashable, Mapping, Sequence

import numpy as np

from .boxgeom import BBox, Proposal, iou

MIN_CLS_SCORE = 0.01


@dataclass(frozen=True)
class Detection:
    image_id: Hashable
    box: BBox
    score: float
    cls_score: float = 1.0


def cmc_topk(ranked_matches: Sequence[Sequence[bool]], k: int) -> float:
    """Fraction of queries with a true match among their first ``k`` results."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if len(ranked_matches) == 0:
        raise ValueError("no queries")
    hits = [any(bool(m) for m in list(r)[:k]) for r in ranked_matches]
    return float(np.mean(hits))


def average_precision(scores: Sequence[float], is_match: Sequence[bool], num_gt: int) -> float:
    if num_gt <= 0:
        raise ValueError("average precision needs at least one ground truth")
    scores = np.asarray(scores, dtype=np.float64)
    is_match = np.asarray(is_match, dtype=bool)
    if len(scores) == 0:
        return 0.0
    order = np.argsort(-scores, kind="stable")
    tp = is_match[order]
    ranks = np.arange(1, len(tp) + 1)
    precision = np.cumsum(tp) / ranks
    return float(precision[tp].sum() / num_gt)


def filter_detections(detections: Sequence[Detection],
                      min_cls_score: float = MIN_CLS_SCORE) -> list[Detection]:
    return [d for d in detections if d.cls_score >= min_cls_score]


def match_detections(detections: Sequence[Detection], ground_truth: Mapping[Hashable, BBox],
                     iou_threshold: float = 0.5):
    """Greedy matching by descending score, one detection per ground-truth box.

    Returns ``(scores, matches)`` in ranked order.
    """
    order = sorted(range(len(detections)), key=lambda i: -detections[i].score)
    used = set()
    scores, matches = [], []
    for i in order:
        d = detections[i]
        gt = ground_truth.get(d.image_id)
        hit = gt is not None and d.image_id not in used and iou(d.box, gt) >= iou_threshold
        if hit:
            used.add(d.image_id)
        scores.append(d.score)
        matches.append(hit)
    return np.asarray(scores, dtype=np.float64), np.asarray(matches, dtype=bool)


def mean_ap(detections_per_query: Sequence[Sequence[Detection]],
            ground_truth_per_query: Sequence[Mapping[Hashable, BBox]],
            iou_threshold: float = 0.5, min_cls_score: float = MIN_CLS_SCORE) -> float:
    """Mean over queries of AP; ``ground_truth_per_query[i]`` maps gallery image -> target box."""
    return search_metrics(detections_per_query, ground_truth_per_query, (),
                          iou_threshold, min_cls_score)["mAP"]


def search_metrics(detections_per_query, ground_truth_per_query, topk=(1, 5),
                   iou_threshold: float = 0.5, min_cls_score: float = MIN_CLS_SCORE) -> dict:
    """mAP and CMC top-k from one greedy matching pass per query."""
    if len(detections_per_query) != len(ground_truth_per_query):
        raise ValueError("detections and ground truth must cover the same queries")
    aps, ranked = [], []
    skipped = 0
    for dets, gt in zip(detections_per_query, ground_truth_per_query):
        scores, matches = match_detections(filter_detections(dets, min_cls_score), gt, iou_threshold)
        ranked.append(matches)
        if len(gt) == 0:
            skipped += 1
            continue
        aps.append(average_precision(scores, matches, len(gt)))
    if skipped:
        warnings.warn(f"{skipped} queries without ground truth excluded from mAP")
    if not aps:
        raise ValueError("no query with ground truth")
    out = {"mAP": float(np.mean(aps))}
    for k in topk:
        out[f"top{k}"] = cmc_topk(ranked, k)
    return out


def query_specific_counts(proposals: Sequence[Proposal | BBox], target: BBox,
                          n_values: Sequence[int] = (10, 50, 100),
                          iou_threshold: float = 0.5) -> dict[int, int]:
    """Count proposals among the top N with IoU >= 0.5 against the target, per N."""
    hits = [iou(getattr(p, "box", p), target) >= iou_threshold for p in proposals]
    return {n: int(sum(hits[:n])) for n in n_values}


def average_counts(per_query: Sequence[Mapping[int, int]]) -> dict[int, float]:
    if not per_query:
        raise ValueError("no queries")
    keys = list(per_query[0])
    return {n: float(np.mean([c[n] for c in per_query])) for n in keys}
