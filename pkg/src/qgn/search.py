"""Person search: Siamese detector with query-guided proposals, trainer and evaluator.

The detector shares one backbone feature map (stride 8 for the tiny arch)
between a generic RPN, the query-guided proposal head and an ROI head that
emits person/background logits, box refinements and an identity embedding.
Query and gallery scenes always travel through the encoder as a pair, so
QSSE can couple them.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from torchvision.ops import roi_align, roi_pool

from .backbone import BackboneConfig, BasicBlock, SiameseEncoder
from .boxgeom import (BBox, anchor_boxes, box_iou, clip_boxes, decode_deltas, encode_deltas,
                      nms_indices, sample_qrpn_anchors, sample_rpn_anchors)
from .datasets.scenes import UNLABELED, SearchScene
from .fewshot import make_optimizer
from .losses import ComponentLosses, OIMState, detection_losses, oim_loss, personsearch_objective
from .metrics import MIN_CLS_SCORE, Detection, average_counts, query_specific_counts, search_metrics
from .qrpn import QRPN, RPNHead, propose, qrpn_loss
from .qsimnet import QSimNet, sim_loss

log = logging.getLogger(__name__)

ROI_MODES = ("pool7", "pool14", "align14")
FLIP_MODES = ("joint", "independent", "none")
ROI_BOX_WEIGHTS = (10.0, 10.0, 5.0, 5.0)


def _detection_backbone() -> BackboneConfig:
    return BackboneConfig(arch="tiny", detection_mode=True, image_size=96, gate_bias=3.0)


@dataclass
class SearchModelConfig:
    backbone: BackboneConfig = field(default_factory=_detection_backbone)
    embed_dim: int = 64
    anchor_scales: tuple[float, ...] = (3.0, 3.75, 4.5)
    anchor_ratios: tuple[float, ...] = (2.0, 2.6)
    roi: str = "pool7"
    gcat: bool = False
    use_qrpn: bool = True
    use_qsimnet: bool = True
    qrpn_pool: int = 7
    qrpn_reduction: int = 16
    fusion: str = "logit"
    oim_queue: int = 32
    oim_momentum: float = 0.5
    oim_temperature: float = 0.1

    def __post_init__(self):
        if self.roi not in ROI_MODES:
            raise ValueError(f"roi must be one of {ROI_MODES}")
        if not self.backbone.detection_mode:
            raise ValueError("the search model needs a detection-mode backbone")

    @property
    def use_qsse(self) -> bool:
        return self.backbone.use_qsse

    @property
    def num_anchors(self) -> int:
        return len(self.anchor_scales) * len(self.anchor_ratios)


class ROIHead(nn.Module):
    """Pooled box features -> residual block -> GAP -> (person logits, box deltas, embedding).

    With ``gcat`` the globally pooled input crop is concatenated to the
    block output before the three heads.
    """

    def __init__(self, channels: int, embed_dim: int, roi: str = "pool7", gcat: bool = False,
                 stride: int = 8):
        super().__init__()
        if roi not in ROI_MODES:
            raise ValueError(f"roi must be one of {ROI_MODES}")
        self.roi = roi
        self.size = int(roi[-2:]) if roi.endswith("14") else 7
        self.stride = stride
        self.gcat = gcat
        self.block = BasicBlock(channels, 2 * channels, 2 if self.size == 14 else 1)
        feat = 2 * channels + (channels if gcat else 0)
        self.cls = nn.Linear(feat, 2)
        self.reg = nn.Linear(feat, 4)
        self.emb = nn.Linear(feat, embed_dim)

    def pool(self, fmap: torch.Tensor, boxes: torch.Tensor) -> torch.Tensor:
        if fmap.dim() == 3:
            fmap = fmap[None]
        rois = torch.cat([boxes.new_zeros(len(boxes), 1), boxes.to(fmap.dtype)], dim=1)
        size = (self.size, self.size)
        if self.roi.startswith("align"):
            return roi_align(fmap, rois, size, 1.0 / self.stride, sampling_ratio=2, aligned=True)
        return roi_pool(fmap, rois, size, 1.0 / self.stride)

    def forward(self, fmap: torch.Tensor, boxes: torch.Tensor):
        crops = self.pool(fmap, boxes)
        h = self.block(crops).mean(dim=(-2, -1))
        if self.gcat:
            h = torch.cat([h, crops.mean(dim=(-2, -1))], dim=1)
        return self.cls(h), self.reg(h), F.normalize(self.emb(h), dim=-1)


@dataclass
class GalleryResult:
    """Per gallery image: final boxes with similarity and person scores."""

    boxes: torch.Tensor
    similarity: torch.Tensor
    cls_score: torch.Tensor

    def detections(self, image_id) -> list[Detection]:
        return [Detection(image_id, BBox(*b.tolist()), float(s), float(c))
                for b, s, c in zip(self.boxes, self.similarity, self.cls_score)]


class SearchQGN(nn.Module):
    """Siamese detector with QSSE, QRPN and QSimNet, each switchable.

    ``qsse_enabled``, ``qrpn_enabled`` and ``qsimnet_enabled`` are inference
    ablation switches; they can only disable components the config built.
    Without QSimNet, detections are ranked by cosine similarity.
    """

    def __init__(self, config: SearchModelConfig, num_train_ids: int, seed: int = 0):
        super().__init__()
        self.config = config
        self.encoder = SiameseEncoder(config.backbone)
        c = config.backbone.out_channels
        self.stride = config.backbone.feature_stride
        a = config.num_anchors
        self.rpn = RPNHead(c, a)
        self.qrpn = (QRPN(c, a, config.qrpn_pool, config.qrpn_reduction, self.stride)
                     if config.use_qrpn else None)
        self.roi_head = ROIHead(c, config.embed_dim, config.roi, config.gcat, self.stride)
        self.qsim = QSimNet(config.embed_dim) if config.use_qsimnet else None
        self.oim = OIMState(num_train_ids, config.embed_dim, config.oim_queue,
                            config.oim_momentum, config.oim_temperature, seed=seed)
        self.qsse_enabled = config.use_qsse
        self.qrpn_enabled = config.use_qrpn
        self.qsimnet_enabled = config.use_qsimnet
        self._anchor_cache: dict[tuple[int, int], torch.Tensor] = {}

    def anchors(self, fmap_h: int, fmap_w: int) -> torch.Tensor:
        key = (fmap_h, fmap_w)
        if key not in self._anchor_cache:
            self._anchor_cache[key] = torch.from_numpy(anchor_boxes(
                fmap_h, fmap_w, self.stride, self.config.anchor_scales,
                self.config.anchor_ratios)).float()
        return self._anchor_cache[key]

    def encode(self, img_q: torch.Tensor, img_g: torch.Tensor, use_qsse: bool | None = None):
        if use_qsse is None:
            use_qsse = self.qsse_enabled
        feats = self.encoder(img_q, img_g, use_qsse=use_qsse)
        return feats.map_q, feats.map_g

    def similarity(self, f_q: torch.Tensor, f_g: torch.Tensor) -> torch.Tensor:
        if self.qsim is not None and self.qsimnet_enabled:
            return self.qsim.similarity(f_q, f_g)
        return (f_q * f_g).sum(dim=-1)

    def query_embedding(self, map_q: torch.Tensor, query_box: torch.Tensor) -> torch.Tensor:
        return self.roi_head(map_q, query_box.reshape(1, 4))[2][0]

    def rpn_outputs(self, map_g, map_q=None, query_box=None, use_qrpn: bool | None = None):
        """Anchors, objectness, deltas and (optionally) query-similarity logits for one gallery map."""
        if use_qrpn is None:
            use_qrpn = self.qrpn_enabled
        anchors = self.anchors(*map_g.shape[-2:])
        obj, deltas = self.rpn(map_g)
        sim = None
        if use_qrpn and self.qrpn is not None and map_q is not None:
            sim, _ = self.qrpn(map_g, map_q, query_box)
        return anchors, obj, deltas, sim

    def proposals(self, map_g, image_size, map_q=None, query_box=None,
                  use_qrpn: bool | None = None, top_n: int = 100, nms_thresh: float = 0.7,
                  pre_nms_top_n: int = 600) -> torch.Tensor:
        """Proposal boxes for one gallery map, best first."""
        anchors, obj, deltas, sim = self.rpn_outputs(map_g, map_q, query_box, use_qrpn)
        boxes, _, _, _ = propose(obj, sim, anchors, deltas, image_size, top_n, nms_thresh,
                                 pre_nms_top_n, self.config.fusion)
        return boxes

    @torch.no_grad()
    def search(self, img_q: torch.Tensor, query_box, gallery: torch.Tensor,
               top_n: int = 100, nms_thresh: float = 0.7, final_nms: float = 0.4,
               min_cls_score: float = MIN_CLS_SCORE, pre_nms_top_n: int = 600) -> list[GalleryResult]:
        """Detect and score the query person in every gallery image (``(G, 3, H, W)``)."""
        self.eval()
        qbox = torch.as_tensor(query_box, dtype=torch.float32).reshape(4)
        g = gallery.shape[0]
        map_q, map_g = self.encode(img_q[None].expand(g, -1, -1, -1), gallery)
        f_q = self.query_embedding(map_q[:1], qbox)
        h, w = gallery.shape[-2:]
        out = []
        for i in range(g):
            props = self.proposals(map_g[i], (w, h), map_q[i], qbox, top_n=top_n,
                                   nms_thresh=nms_thresh, pre_nms_top_n=pre_nms_top_n)
            if len(props) == 0:
                out.append(GalleryResult(torch.zeros(0, 4), torch.zeros(0), torch.zeros(0)))
                continue
            cls, deltas, emb = self.roi_head(map_g[i], props)
            boxes = clip_boxes(decode_deltas(props, deltas, ROI_BOX_WEIGHTS), w, h)
            person = cls.softmax(dim=1)[:, 1]
            sim = self.similarity(f_q.expand_as(emb), emb)
            valid = (person >= min_cls_score) & ((boxes[:, 2] - boxes[:, 0]) > 0) \
                & ((boxes[:, 3] - boxes[:, 1]) > 0)
            boxes, sim, person = boxes[valid], sim[valid], person[valid]
            keep = nms_indices(boxes.double().numpy(), sim.double().numpy(), final_nms)
            keep = torch.as_tensor(keep, dtype=torch.long)
            out.append(GalleryResult(boxes[keep], sim[keep], person[keep]))
        return out


# ---------------------------------------------------------------- training


@dataclass
class PairSample:
    """One training pair: two scenes that both show identity ``pid``."""

    img_q: torch.Tensor
    img_g: torch.Tensor
    persons_q: list[tuple[BBox, int]]
    persons_g: list[tuple[BBox, int]]
    pid: int


def flip_persons(persons, width: float):
    return [(BBox(width - b.x2, b.y1, width - b.x1, b.y2), p) for b, p in persons]


def resize_scene(image: torch.Tensor, persons, min_side: int | None):
    """Rescale so the shorter image side equals ``min_side`` (``None`` keeps the size)."""
    if min_side is None:
        return image, persons
    h, w = image.shape[-2:]
    s = min_side / min(h, w)
    if s == 1.0:
        return image, persons
    size = (int(round(h * s)), int(round(w * s)))
    image = F.interpolate(image[None], size=size, mode="bilinear", align_corners=False)[0]
    return image, [(BBox(b.x1 * s, b.y1 * s, b.x2 * s, b.y2 * s), p) for b, p in persons]


def _boxes(persons) -> torch.Tensor:
    return torch.tensor([b.to_list() for b, _ in persons], dtype=torch.float32).reshape(-1, 4)


@dataclass
class SearchTrainConfig:
    # phase 2 (all components); defaults follow the reference schedule
    epochs: int = 4
    optimizer: str = "sgd"
    lr: float = 1e-3
    lr_drop_fraction: float = 0.5
    # phase 1 (baseline losses, QSSE bypassed, RPN-only proposals)
    pretrain_epochs: int = 4
    pretrain_optimizer: str = "sgd"
    pretrain_lr: float = 1e-3
    steps_per_epoch: int | None = None
    batch_pairs: int = 2
    min_side: int | None = 600
    flip: str = "joint"
    weight_decay: float = 0.0
    rpn_batch: int = 256
    qrpn_batch: int = 128
    roi_batch: int = 64
    roi_fg_fraction: float = 0.25
    roi_fg_iou: float = 0.5
    train_proposals: int = 128
    pre_nms_top_n: int = 600
    proposal_nms: float = 0.7
    qrpn_jitter: int = 4
    loss_weights: dict = field(default_factory=dict)
    checkpoint_every: int = 0
    seed: int = 0

    def validate(self) -> list[str]:
        errors = []
        if self.epochs < 0 or self.pretrain_epochs < 0 or self.epochs + self.pretrain_epochs == 0:
            errors.append("train.epochs + train.pretrain_epochs must be >= 1")
        for name in ("optimizer", "pretrain_optimizer"):
            if getattr(self, name) not in ("adam", "sgd"):
                errors.append(f"train.{name} must be 'adam' or 'sgd'")
        if self.lr <= 0 or self.pretrain_lr <= 0:
            errors.append("train.lr and train.pretrain_lr must be positive")
        if self.flip not in FLIP_MODES:
            errors.append(f"train.flip must be one of {FLIP_MODES}")
        if self.batch_pairs < 1:
            errors.append("train.batch_pairs must be >= 1")
        if not 0 < self.roi_fg_fraction <= 1:
            errors.append("train.roi_fg_fraction must lie in (0, 1]")
        if self.min_side is not None and self.min_side < 16:
            errors.append("train.min_side must be >= 16")
        return errors


def train_pairs(scenes: Sequence[SearchScene]) -> list[tuple[int, int, int]]:
    """All ordered ``(query scene, gallery scene, pid)`` triples sharing a labelled identity."""
    where: dict[int, list[int]] = {}
    for si, sc in enumerate(scenes):
        for _, pid in sc.persons:
            if pid != UNLABELED:
                where.setdefault(pid, []).append(si)
    return [(a, b, pid) for pid in sorted(where) for a in where[pid] for b in where[pid] if a != b]


class SearchTrainer:
    """Two-phase training of :class:`SearchQGN`.

    Phase 1 optimizes the baseline detector and OIM losses with QSSE bypassed
    and proposals from the generic RPN only. Phase 2 switches on every built
    component and optimizes the full seven-term objective, dropping the
    learning rate tenfold after ``lr_drop_fraction`` of its steps.
    """

    def __init__(self, model: SearchQGN, scenes: Sequence[SearchScene], load_image: Callable,
                 config: SearchTrainConfig):
        errors = config.validate()
        if errors:
            raise ValueError("; ".join(errors))
        self.model = model
        self.config = config
        self.scenes = list(scenes)
        self.load_image = load_image
        self.pairs = train_pairs(self.scenes)
        if not self.pairs:
            raise ValueError("no identity appears in two training scenes")
        ids = sorted({p for _, _, p in self.pairs})
        self.id_rows = {pid: i for i, pid in enumerate(ids)}
        if len(ids) > model.oim.num_ids:
            raise ValueError(f"{len(ids)} training identities exceed the OIM table size {model.oim.num_ids}")
        self.rng = np.random.default_rng([config.seed, 23])
        self.steps_per_epoch = config.steps_per_epoch or max(1, len(self.pairs) // config.batch_pairs)
        self.phase1_steps = config.pretrain_epochs * self.steps_per_epoch
        self.phase2_steps = config.epochs * self.steps_per_epoch
        self.step = 0
        self.optimizer = None
        self._build_optimizer(self.phase)

    @property
    def total_steps(self) -> int:
        return self.phase1_steps + self.phase2_steps

    @property
    def phase(self) -> int:
        return 1 if self.step < self.phase1_steps else 2

    def _build_optimizer(self, phase: int) -> None:
        cfg = self.config
        name, lr = (cfg.pretrain_optimizer, cfg.pretrain_lr) if phase == 1 else (cfg.optimizer, cfg.lr)
        self.optimizer = make_optimizer(self.model.parameters(), name, lr)
        if cfg.weight_decay:
            for g in self.optimizer.param_groups:
                g["weight_decay"] = cfg.weight_decay
        self._opt_phase = phase

    def current_lr(self) -> float:
        cfg = self.config
        if self.phase == 1:
            return cfg.pretrain_lr
        done = self.step - self.phase1_steps
        return cfg.lr * (0.1 if done >= int(cfg.lr_drop_fraction * self.phase2_steps) else 1.0)

    def state_dict(self) -> dict:
        return {"optimizer": self.optimizer.state_dict(), "step": self.step,
                "rng": self.rng.bit_generator.state, "phase": self._opt_phase}

    def load_state_dict(self, state: Mapping) -> None:
        self.step = int(state["step"])
        self._build_optimizer(int(state["phase"]))
        self.optimizer.load_state_dict(state["optimizer"])
        self.rng.bit_generator.state = state["rng"]

    def _scene(self, si: int):
        sc = self.scenes[si]
        return resize_scene(self.load_image(sc.path), sc.persons, self.config.min_side)

    def sample(self) -> list[PairSample]:
        out = []
        for _ in range(self.config.batch_pairs):
            qi, gi, pid = self.pairs[int(self.rng.integers(len(self.pairs)))]
            img_q, pq = self._scene(qi)
            img_g, pg = self._scene(gi)
            flip_q = flip_g = False
            if self.config.flip == "joint":
                flip_q = flip_g = bool(self.rng.random() < 0.5)
            elif self.config.flip == "independent":
                flip_q, flip_g = (bool(v) for v in self.rng.random(2) < 0.5)
            if flip_q:
                img_q, pq = torch.flip(img_q, dims=(-1,)), flip_persons(pq, img_q.shape[-1])
            if flip_g:
                img_g, pg = torch.flip(img_g, dims=(-1,)), flip_persons(pg, img_g.shape[-1])
            out.append(PairSample(img_q, img_g, pq, pg, pid))
        return out

    def _oim_label(self, pid: int) -> int:
        return self.id_rows.get(pid, UNLABELED) if pid != UNLABELED else UNLABELED

    def _image_losses(self, fmap, persons, image_size, use_qrpn_props: bool,
                      map_q=None, query_box=None):
        """RPN sampling, proposals, ROI sampling and ROI head outputs for one image."""
        cfg = self.config
        model = self.model
        gt = _boxes(persons)
        anchors, obj, deltas, sim = model.rpn_outputs(fmap, map_q, query_box, use_qrpn_props)
        rs = sample_rpn_anchors(anchors.numpy(), [b for b, _ in persons], self.rng, cfg.rpn_batch)
        idx = torch.as_tensor(rs.indices)
        rpn_t = torch.zeros(len(idx), 4)
        if rs.num_positive:
            pos = idx[: rs.num_positive]
            rpn_t[: rs.num_positive] = encode_deltas(anchors[pos], _boxes([(b, 0) for b in rs.targets]))
        w, h = image_size
        props, _, _, _ = propose(obj, sim, anchors, deltas, (w, h), cfg.train_proposals,
                                 cfg.proposal_nms, cfg.pre_nms_top_n, model.config.fusion)
        props = torch.cat([props, gt])
        ious = torch.from_numpy(box_iou(props.double().numpy(), gt.double().numpy()))
        best, match = ious.max(dim=1)
        fg_pool = np.flatnonzero((best >= cfg.roi_fg_iou).numpy())
        bg_pool = np.flatnonzero((best < cfg.roi_fg_iou).numpy())
        n_fg = min(len(fg_pool), int(cfg.roi_batch * cfg.roi_fg_fraction))
        fg = np.sort(self.rng.choice(fg_pool, n_fg, replace=False)) if n_fg else fg_pool[:0]
        n_bg = min(len(bg_pool), cfg.roi_batch - n_fg)
        bg = np.sort(self.rng.choice(bg_pool, n_bg, replace=False)) if n_bg else bg_pool[:0]
        sel = torch.as_tensor(np.concatenate([fg, bg]), dtype=torch.long)
        rois = props[sel]
        labels = torch.zeros(len(sel), dtype=torch.long)
        labels[:n_fg] = 1
        cls, reg, emb = model.roi_head(fmap, rois)
        reg_t = torch.zeros(len(sel), 4)
        pids = torch.full((len(sel),), UNLABELED, dtype=torch.long)
        if n_fg:
            m = match[sel[:n_fg]]
            reg_t[:n_fg] = encode_deltas(rois[:n_fg], gt[m], ROI_BOX_WEIGHTS)
            pids[:n_fg] = torch.tensor([persons[int(j)][1] for j in m])
        return {"cls": cls, "cls_labels": labels, "reg": reg, "reg_t": reg_t,
                "rpn_logits": obj[idx], "rpn_labels": torch.as_tensor(rs.labels),
                "rpn_reg": deltas[idx], "rpn_reg_t": rpn_t, "emb": emb[:n_fg], "pids": pids[:n_fg],
                "anchors": anchors}

    def losses(self, batch: Sequence[PairSample], phase: int) -> ComponentLosses:
        model = self.model
        full = phase == 2
        img_q = torch.stack([s.img_q for s in batch])
        img_g = torch.stack([s.img_g for s in batch])
        map_q, map_g = model.encode(img_q, img_g, use_qsse=full and model.qsse_enabled)
        use_qrpn = full and model.qrpn is not None and model.qrpn_enabled
        h, w = img_g.shape[-2:]
        parts = []
        qrpn_terms, sim_logits, sim_labels = [], [], []
        for i, s in enumerate(batch):
            qbox = torch.tensor(next(b for b, p in s.persons_q if p == s.pid).to_list())
            parts.append(self._image_losses(map_q[i], s.persons_q, (w, h), False))
            g = self._image_losses(map_g[i], s.persons_g, (w, h), use_qrpn, map_q[i], qbox)
            parts.append(g)
            if use_qrpn:
                target = next(b for b, p in s.persons_g if p == s.pid)
                others = [b for b, p in s.persons_g if b != target]
                qs = sample_qrpn_anchors(g["anchors"].numpy(), target, others, self.rng,
                                         self.config.qrpn_batch, num_jitter=self.config.qrpn_jitter,
                                         image_size=(w, h))
                logits, _ = model.qrpn(map_g[i], map_q[i], qbox)
                qrpn_terms.append(qrpn_loss(logits[torch.as_tensor(qs.indices)],
                                            torch.as_tensor(qs.labels)))
            if full and model.qsim is not None and len(g["pids"]):
                f_q = model.query_embedding(map_q[i], qbox)
                sim_logits.append(model.qsim(f_q.expand_as(g["emb"]), g["emb"]))
                sim_labels.append((g["pids"] == s.pid).long())

        cat = lambda key: torch.cat([p[key] for p in parts])  # noqa: E731
        out = detection_losses(cat("cls"), cat("cls_labels"), cat("reg"), cat("reg_t"),
                               cat("rpn_logits"), cat("rpn_labels"), cat("rpn_reg"), cat("rpn_reg_t"))
        flags = set(out.flags)
        embs = cat("emb")
        rows = torch.tensor([self._oim_label(int(p)) for p in cat("pids")], dtype=torch.long)
        if len(rows):
            out["oim"], _ = oim_loss(embs, rows, model.oim, update=model.training)
        else:
            out["oim"] = map_g.sum() * 0.0
            flags.add("no_positive_roi")
        zero = map_g.sum() * 0.0
        out["qrpn"] = torch.stack(qrpn_terms).mean() if qrpn_terms else zero
        out["sim"] = sim_loss(torch.cat(sim_logits), torch.cat(sim_labels)) if sim_logits else zero
        out.flags = flags
        return out

    def train_step(self) -> dict:
        phase = self.phase
        if phase != self._opt_phase:
            self._build_optimizer(phase)
        self.model.train()
        for g in self.optimizer.param_groups:
            g["lr"] = self.current_lr()
        batch = self.sample()
        comps = self.losses(batch, phase)
        loss = personsearch_objective(comps, self.config.loss_weights)
        self.optimizer.zero_grad()
        loss.backward()
        self.optimizer.step()
        self.step += 1
        rec = {"step": self.step, "phase": phase, "loss": loss.item(),
               "lr": self.optimizer.param_groups[0]["lr"]}
        rec.update({k: v.item() for k, v in comps.items()})
        if comps.flags:
            rec["flags"] = sorted(comps.flags)
        return rec

    def fit(self, log_path: Path | None = None, on_epoch_end: Callable[[int], None] | None = None,
            max_steps: int | None = None) -> list[dict]:
        total = self.total_steps if max_steps is None else min(self.total_steps, max_steps)
        records = []
        fh = open(log_path, "a") if log_path else None
        t0 = time.time()
        try:
            while self.step < total:
                rec = self.train_step()
                rec["time"] = round(time.time() - t0, 3)
                records.append(rec)
                if fh:
                    fh.write(json.dumps(rec) + "\n")
                if self.step % self.steps_per_epoch == 0:
                    epoch = self.step // self.steps_per_epoch
                    log.info("epoch %d phase %d loss %.4f", epoch, rec["phase"], rec["loss"])
                    if on_epoch_end:
                        on_epoch_end(epoch)
        finally:
            if fh:
                fh.close()
        return records


# -------------------------------------------------------------- evaluation


@dataclass
class SearchEvalConfig:
    top_n: int = 100
    pre_nms_top_n: int = 600
    proposal_nms: float = 0.7
    final_nms: float = 0.4
    min_cls_score: float = MIN_CLS_SCORE
    iou_threshold: float = 0.5
    min_side: int | None = 600
    count_n: tuple[int, ...] = (10, 50, 100)
    max_queries: int | None = None


class SearchEvaluator:
    """Runs the query/gallery protocol and the query-specific proposal count."""

    def __init__(self, model: SearchQGN, scenes: Sequence[SearchScene], protocol: Sequence[dict],
                 load_image: Callable, config: SearchEvalConfig | None = None):
        self.model = model.eval()
        self.config = config or SearchEvalConfig()
        self.by_path = {s.path: s for s in scenes}
        self.protocol = list(protocol)
        if self.config.max_queries is not None:
            self.protocol = self.protocol[: self.config.max_queries]
        self.load_image = load_image

    def _scene(self, path: str):
        sc = self.by_path[path]
        return resize_scene(self.load_image(path), sc.persons, self.config.min_side)

    def _query(self, q: dict):
        img_q, persons = self._scene(q["query_image"])
        target = next(b for b, p in persons if p == q["id"])
        return img_q, target

    def _gallery(self, q: dict):
        imgs, truth = [], {}
        for path in q["gallery"]:
            img, persons = self._scene(path)
            imgs.append(img)
            hit = [b for b, p in persons if p == q["id"]]
            if hit:
                truth[path] = hit[0]
        return torch.stack(imgs), truth

    @torch.no_grad()
    def run_query(self, q: dict) -> tuple[list[Detection], dict]:
        cfg = self.config
        img_q, target = self._query(q)
        gallery, truth = self._gallery(q)
        results = self.model.search(img_q, target.to_list(), gallery, cfg.top_n, cfg.proposal_nms,
                                    cfg.final_nms, cfg.min_cls_score, cfg.pre_nms_top_n)
        dets = [d for path, r in zip(q["gallery"], results) for d in r.detections(path)]
        return dets, truth

    def evaluate(self, topk=(1, 5)) -> dict:
        dets, truths = [], []
        for q in self.protocol:
            d, t = self.run_query(q)
            dets.append(d)
            truths.append(t)
        out = search_metrics(dets, truths, topk, self.config.iou_threshold, self.config.min_cls_score)
        out["queries"] = len(self.protocol)
        return out

    @torch.no_grad()
    def proposal_counts(self) -> dict[str, dict[int, float]]:
        """Mean query-specific proposals in the top N, with and without QRPN scores.

        Every gallery image containing the query person contributes one count;
        counts are averaged per query first, then across queries.
        """
        cfg = self.config
        model = self.model
        per_mode = {"rpn": [], "rpn+qrpn": []}
        for q in self.protocol:
            img_q, target = self._query(q)
            qbox = torch.tensor(target.to_list())
            paths, imgs, targets = [], [], []
            for path in q["gallery"]:
                img, persons = self._scene(path)
                hit = [b for b, p in persons if p == q["id"]]
                if hit:
                    paths.append(path)
                    imgs.append(img)
                    targets.append(hit[0])
            if not imgs:
                continue
            gallery = torch.stack(imgs)
            map_q, map_g = model.encode(img_q[None].expand(len(imgs), -1, -1, -1), gallery)
            h, w = gallery.shape[-2:]
            for mode, use_qrpn in (("rpn", False), ("rpn+qrpn", True)):
                counts = []
                for i, t in enumerate(targets):
                    boxes = model.proposals(map_g[i], (w, h), map_q[i], qbox, use_qrpn=use_qrpn,
                                            top_n=max(cfg.count_n), nms_thresh=cfg.proposal_nms,
                                            pre_nms_top_n=cfg.pre_nms_top_n)
                    counts.append(query_specific_counts([BBox(*b.tolist()) for b in boxes], t,
                                                        cfg.count_n))
                per_mode[mode].append(average_counts(counts))
        return {mode: average_counts(v) for mode, v in per_mode.items() if v}
