"""Identity, self-supervision and detection losses plus the composite objectives."""

from __future__ import annotations

from typing import Mapping

import torch
import torch.nn as nn
import torch.nn.functional as F

UNLABELED = -1

FEWSHOT_TERMS = ("oim", "sim", "rot")
PERSONSEARCH_TERMS = ("cls", "reg", "rpn_o", "rpn_r", "oim", "qrpn", "sim")


class OIMState(nn.Module):
    """Lookup table of per-identity embeddings plus a circular queue of unlabeled ones.

    Rows of both tables are kept at unit norm. They start as random unit
    vectors drawn from a generator seeded with ``seed``.
    """

    def __init__(self, num_ids: int, embed_dim: int, queue_size: int = 32,
                 momentum: float = 0.5, temperature: float = 0.1, seed: int = 0):
        super().__init__()
        if not 0.0 < momentum < 1.0:
            raise ValueError("momentum must lie in (0, 1)")
        if temperature <= 0:
            raise ValueError("temperature must be positive")
        gen = torch.Generator().manual_seed(seed)
        self.momentum = momentum
        self.temperature = temperature
        self.register_buffer("lut", F.normalize(torch.randn(num_ids, embed_dim, generator=gen), dim=1))
        self.register_buffer("cq", F.normalize(torch.randn(queue_size, embed_dim, generator=gen), dim=1))
        self.register_buffer("cq_ptr", torch.zeros((), dtype=torch.long))

    @property
    def num_ids(self) -> int:
        return self.lut.shape[0]

    @property
    def queue_size(self) -> int:
        return self.cq.shape[0]

    def logits(self, embeddings: torch.Tensor) -> torch.Tensor:
        table = torch.cat([self.lut, self.cq], dim=0).to(embeddings.dtype)
        return embeddings @ table.t() / self.temperature

    @torch.no_grad()
    def update(self, embeddings: torch.Tensor, labels: torch.Tensor) -> None:
        m = self.momentum
        for x, y in zip(embeddings.detach().to(self.lut.dtype), labels.tolist()):
            if y == UNLABELED:
                if self.queue_size:
                    self.cq[self.cq_ptr] = F.normalize(x, dim=0)
                    self.cq_ptr.fill_((int(self.cq_ptr) + 1) % self.queue_size)
            else:
                self.lut[y] = F.normalize(m * self.lut[y] + (1 - m) * x, dim=0)


def oim_loss(embeddings: torch.Tensor, labels: torch.Tensor, state: OIMState,
             update: bool = True):
    """Softmax cross-entropy over scaled cosine similarities to the LUT and queue.

    Unlabeled samples (``UNLABELED``) add no loss term but are pushed to the
    queue. With ``update=False`` the state is left untouched.
    """
    labels = labels.long()
    if (labels >= state.num_ids).any() or (labels < UNLABELED).any():
        raise ValueError(f"labels must lie in [0, {state.num_ids}) or be {UNLABELED}")
    labeled = labels != UNLABELED
    if labeled.any():
        loss = F.cross_entropy(state.logits(embeddings[labeled]), labels[labeled])
    else:
        loss = embeddings.sum() * 0.0
    if update:
        state.update(embeddings, labels)
    return loss, state


def rotation_loss(logits: torch.Tensor, rotation_labels: torch.Tensor) -> torch.Tensor:
    if logits.shape[-1] != 4:
        raise ValueError("rotation logits must be 4-way")
    rotation_labels = rotation_labels.long()
    if ((rotation_labels < 0) | (rotation_labels > 3)).any():
        raise ValueError("rotation labels must lie in {0, 1, 2, 3}")
    return F.cross_entropy(logits, rotation_labels)


class ComponentLosses(dict):
    """Loss-name -> scalar tensor, with ``flags`` naming degenerate terms."""

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self.flags: set[str] = set()


def _box_regression(pred, target, positive, n_sampled, beta):
    if not positive.any():
        return pred.sum() * 0.0, False
    loss = F.smooth_l1_loss(pred[positive], target[positive], beta=beta, reduction="sum")
    return loss / max(n_sampled, 1), True


def detection_losses(cls_logits, cls_labels, reg_pred, reg_targets,
                     rpn_logits, rpn_labels, rpn_reg_pred, rpn_reg_targets,
                     beta: float = 1.0 / 9) -> ComponentLosses:
    """Person/background CE, box smooth-L1 on positives, RPN objectness and RPN regression.

    Regression sums are normalised by the number of sampled items, so a batch
    without positives yields an exact zero and a ``no_positive_*`` flag.
    """
    out = ComponentLosses()
    out["cls"] = F.cross_entropy(cls_logits, cls_labels.long())
    out["reg"], ok = _box_regression(reg_pred, reg_targets, cls_labels > 0, len(cls_labels), beta)
    if not ok:
        out.flags.add("no_positive_roi")
    out["rpn_o"] = F.binary_cross_entropy_with_logits(rpn_logits, rpn_labels.to(rpn_logits.dtype))
    out["rpn_r"], ok = _box_regression(rpn_reg_pred, rpn_reg_targets, rpn_labels > 0,
                                       len(rpn_labels), beta)
    if not ok:
        out.flags.add("no_positive_anchor")
    return out


def _weighted_sum(components: Mapping[str, torch.Tensor], terms, weights):
    missing = [t for t in terms if t not in components]
    if missing:
        raise ValueError(f"missing loss components: {missing}")
    weights = weights or {}
    total = 0.0
    for t in terms:
        total = total + weights.get(t, 1.0) * components[t]
    return total


def fewshot_objective(components: Mapping[str, torch.Tensor],
                      weights: Mapping[str, float] | None = None):
    """``oim + sim + rot``; unit weights unless overridden."""
    return _weighted_sum(components, FEWSHOT_TERMS, weights)


def personsearch_objective(components: Mapping[str, torch.Tensor],
                           weights: Mapping[str, float] | None = None):
    """``cls + reg + rpn_o + rpn_r + oim + qrpn + sim``; unit weights unless overridden."""
    return _weighted_sum(components, PERSONSEARCH_TERMS, weights)
