"""Few-shot fine-grained classification: model, non-episodic trainer, episode scorer."""

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

from .backbone import BackboneConfig, PairFeatures, SiameseEncoder, rotate_batch
from .episodic import DatasetSplit, Episode, make_train_pairs
from .losses import ComponentLosses, OIMState, fewshot_objective, oim_loss, rotation_loss
from .qsimnet import QSimNet, aggregate_shots, sim_loss

log = logging.getLogger(__name__)

STREAMS = ("query", "gallery", "both")


@dataclass
class FewShotModelConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    use_qsimnet: bool = True
    rotation: bool = True
    rotation_streams: str = "both"
    oim_streams: str = "both"
    oim_momentum: float = 0.5
    oim_temperature: float = 0.1

    def __post_init__(self):
        for name in ("rotation_streams", "oim_streams"):
            if getattr(self, name) not in STREAMS:
                raise ValueError(f"{name} must be one of {STREAMS}")

    @property
    def use_qsse(self) -> bool:
        return self.backbone.use_qsse


class FewShotQGN(nn.Module):
    """Siamese encoder (+QSSE) with QSimNet, OIM identity table and rotation head.

    With ``use_qsse`` and ``use_qsimnet`` both off this is the OIM + rotation
    baseline, which scores pairs by cosine similarity.
    """

    def __init__(self, config: FewShotModelConfig, num_train_classes: int, seed: int = 0):
        super().__init__()
        self.config = config
        self.encoder = SiameseEncoder(config.backbone)
        dim = config.backbone.embedding_dim
        self.rot_head = nn.Linear(dim, 4) if config.rotation else None
        self.qsim = QSimNet(dim) if config.use_qsimnet else None
        self.oim = OIMState(num_train_classes, dim, queue_size=0, momentum=config.oim_momentum,
                            temperature=config.oim_temperature, seed=seed)
        # inference-time ablation switches; they never add modules
        self.qsse_enabled = config.use_qsse
        self.qsimnet_enabled = config.use_qsimnet

    def forward(self, img_q, img_g) -> PairFeatures:
        return self.encoder(img_q, img_g, use_qsse=self.qsse_enabled)

    def pair_logits(self, f_q, f_g):
        return self.qsim(f_q, f_g)

    def pair_similarity(self, f_q: torch.Tensor, f_g: torch.Tensor) -> torch.Tensor:
        if self.qsim is not None and self.qsimnet_enabled:
            return self.qsim.similarity(f_q, f_g)
        return (f_q * f_g).sum(dim=-1)

    def training_losses(self, img_q, img_g, label_q, label_g) -> ComponentLosses:
        """Per-term losses on a pair batch (labels are OIM table rows).

        The pairs are expanded to four rotations; the rotation head sees all of
        them, identity and similarity terms only the upright copies, because
        a quarter turn changes stripe orientation and hence the class.
        """
        b = img_q.shape[0]
        cfg = self.config
        if cfg.rotation:
            img_q, _, rot = rotate_batch(img_q, label_q)
            img_g, _, _ = rotate_batch(img_g, label_g)
        feats = self(img_q, img_g)
        f_q, f_g = feats.f_q[:b], feats.f_g[:b]
        out = ComponentLosses()

        embs, labels = [], []
        if cfg.oim_streams in ("query", "both"):
            embs.append(f_q)
            labels.append(label_q)
        if cfg.oim_streams in ("gallery", "both"):
            embs.append(f_g)
            labels.append(label_g)
        out["oim"], _ = oim_loss(torch.cat(embs), torch.cat(labels), self.oim, update=self.training)

        if self.qsim is not None:
            out["sim"] = sim_loss(self.qsim(f_q, f_g), (label_q == label_g).long())
        else:
            out["sim"] = f_q.sum() * 0.0

        if cfg.rotation:
            pooled, rots = [], []
            if cfg.rotation_streams in ("query", "both"):
                pooled.append(feats.pooled_q)
                rots.append(rot)
            if cfg.rotation_streams in ("gallery", "both"):
                pooled.append(feats.pooled_g)
                rots.append(rot)
            out["rot"] = rotation_loss(self.rot_head(torch.cat(pooled)), torch.cat(rots))
        else:
            out["rot"] = f_q.sum() * 0.0
        return out


def augment(images: torch.Tensor, rng: np.random.Generator, pad: int = 2,
            jitter: float = 0.1, flip: bool = True) -> torch.Tensor:
    """Random crop (reflect-padded), brightness/contrast jitter and horizontal flip."""
    out = []
    h, w = images.shape[-2:]
    padded = F.pad(images, (pad, pad, pad, pad), mode="reflect") if pad else images
    for i in range(images.shape[0]):
        dy, dx = rng.integers(0, 2 * pad + 1, size=2) if pad else (0, 0)
        x = padded[i, :, dy:dy + h, dx:dx + w]
        if jitter:
            a, b = rng.uniform(1 - jitter, 1 + jitter), rng.uniform(-jitter, jitter) / 0.25
            x = x * float(a) + float(b)
        if flip and rng.random() < 0.5:
            x = torch.flip(x, dims=(-1,))
        out.append(x)
    return torch.stack(out)


@dataclass
class FewShotTrainConfig:
    epochs: int = 120
    steps_per_epoch: int | None = None
    lr: float = 1e-3
    optimizer: str = "adam"
    batch_pairs: int = 8
    neg_ratio: int = 3
    crop_pad: int = 2
    jitter: float = 0.1
    flip: bool = True
    # decoupled decay on the similarity head only; it overfits the few base classes otherwise
    qsim_weight_decay: float = 0.5
    checkpoint_every: int = 0
    loss_weights: dict = field(default_factory=dict)
    seed: int = 0

    def validate(self) -> list[str]:
        errors = []
        if self.epochs < 1:
            errors.append("train.epochs must be >= 1")
        if self.lr <= 0:
            errors.append("train.lr must be positive")
        if self.optimizer not in ("adam", "sgd"):
            errors.append("train.optimizer must be 'adam' or 'sgd'")
        if self.batch_pairs < 2 or self.batch_pairs % (self.neg_ratio + 1):
            errors.append("train.batch_pairs must be a multiple of neg_ratio + 1")
        if self.qsim_weight_decay < 0:
            errors.append("train.qsim_weight_decay must be >= 0")
        return errors


def make_optimizer(params, name: str, lr: float):
    """Adam or SGD with momentum; Adam becomes AdamW when any group carries weight decay."""
    if name == "adam":
        params = list(params)
        if any(isinstance(g, dict) and g.get("weight_decay") for g in params):
            return torch.optim.AdamW(params, lr=lr, weight_decay=0.0)
        return torch.optim.Adam(params, lr=lr)
    return torch.optim.SGD(params, lr=lr, momentum=0.9)


class FewShotTrainer:
    """Non-episodic pair training of :class:`FewShotQGN`.

    The pair sampler and augmentation draw from one numpy generator whose
    state is checkpointed with the weights, so a resumed run replays the
    loss trajectory of an uninterrupted one.
    """

    def __init__(self, model: FewShotQGN, split: DatasetSplit, load_image: Callable,
                 config: FewShotTrainConfig):
        errors = config.validate()
        if errors:
            raise ValueError("; ".join(errors))
        self.model = model
        self.config = config
        self.load_image = load_image
        self.pool = split.train
        self.class_rows = {c: i for i, c in enumerate(sorted(self.pool))}
        self.rng = np.random.default_rng([config.seed, 17])
        self.optimizer = make_optimizer(self._param_groups(), config.optimizer, config.lr)
        n_items = sum(len(v) for v in self.pool.values())
        self.steps_per_epoch = config.steps_per_epoch or max(1, n_items // config.batch_pairs)
        self.step = 0

    def _param_groups(self) -> list[dict]:
        qsim = [] if self.model.qsim is None else list(self.model.qsim.parameters())
        ids = {id(p) for p in qsim}
        rest = [p for p in self.model.parameters() if id(p) not in ids]
        groups = [{"params": rest, "weight_decay": 0.0}]
        if qsim:
            groups.append({"params": qsim, "weight_decay": self.config.qsim_weight_decay})
        return groups

    def state_dict(self) -> dict:
        return {"optimizer": self.optimizer.state_dict(), "step": self.step,
                "rng": self.rng.bit_generator.state}

    def load_state_dict(self, state: Mapping) -> None:
        self.optimizer.load_state_dict(state["optimizer"])
        self.step = int(state["step"])
        self.rng.bit_generator.state = state["rng"]

    def batch(self):
        pairs = make_train_pairs(self.pool, self.config.batch_pairs, self.config.neg_ratio, self.rng)
        cfg = self.config
        q = augment(torch.stack([self.load_image(p.query) for p in pairs]), self.rng,
                    cfg.crop_pad, cfg.jitter, cfg.flip)
        g = augment(torch.stack([self.load_image(p.gallery) for p in pairs]), self.rng,
                    cfg.crop_pad, cfg.jitter, cfg.flip)
        lq = torch.tensor([self.class_rows[p.query_class] for p in pairs])
        lg = torch.tensor([self.class_rows[p.gallery_class] for p in pairs])
        return q, g, lq, lg

    def train_step(self) -> dict:
        self.model.train()
        q, g, lq, lg = self.batch()
        comps = self.model.training_losses(q, g, lq, lg)
        loss = fewshot_objective(comps, self.config.loss_weights)
        self.optimizer.zero_grad()
        loss.backward()
        self.optimizer.step()
        self.step += 1
        rec = {"step": self.step, "epoch": (self.step - 1) // self.steps_per_epoch + 1,
               "loss": loss.item(), "lr": self.optimizer.param_groups[0]["lr"]}
        rec.update({k: v.item() for k, v in comps.items()})
        return rec

    def fit(self, log_path: Path | None = None, on_epoch_end: Callable[[int], None] | None = None,
            max_steps: int | None = None) -> list[dict]:
        total = self.config.epochs * self.steps_per_epoch
        if max_steps is not None:
            total = min(total, max_steps)
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
                    log.info("epoch %d step %d loss %.4f", epoch, self.step, rec["loss"])
                    if on_epoch_end:
                        on_epoch_end(epoch)
        finally:
            if fh:
                fh.close()
        return records


class EpisodeEvaluator:
    """Scores episodes with a frozen model, caching per-pair features.

    Query-gallery coupling through QSSE means a gallery item has a different
    embedding for every query exemplar, so features are cached per ordered
    pair. Without QSSE they are cached per image.
    """

    def __init__(self, model: FewShotQGN, load_image: Callable, batch_size: int = 256):
        self.model = model.eval()
        self.load_image = load_image
        self.batch_size = batch_size
        self._pairs: dict[tuple, tuple[torch.Tensor, torch.Tensor]] = {}
        self._single: dict = {}

    @property
    def coupled(self) -> bool:
        return self.model.qsse_enabled and len(self.model.encoder.gates) > 0

    @torch.no_grad()
    def _fill_single(self, refs: Sequence) -> None:
        todo = [r for r in dict.fromkeys(refs) if r not in self._single]
        for i in range(0, len(todo), self.batch_size):
            chunk = todo[i:i + self.batch_size]
            imgs = torch.stack([self.load_image(r) for r in chunk])
            emb, _, _ = self.model.encoder.encode_single(imgs)
            self._single.update(zip(chunk, emb))

    @torch.no_grad()
    def _fill_pairs(self, pairs: Sequence[tuple]) -> None:
        todo = [p for p in dict.fromkeys(pairs) if p not in self._pairs]
        for i in range(0, len(todo), self.batch_size):
            chunk = todo[i:i + self.batch_size]
            q = torch.stack([self.load_image(a) for a, _ in chunk])
            g = torch.stack([self.load_image(b) for _, b in chunk])
            feats = self.model(q, g)
            self._pairs.update(zip(chunk, zip(feats.f_q, feats.f_g)))

    def pair_features(self, q_ref, g_ref):
        if self.coupled:
            self._fill_pairs([(q_ref, g_ref)])
            return self._pairs[(q_ref, g_ref)]
        self._fill_single([q_ref, g_ref])
        return self._single[q_ref], self._single[g_ref]

    @torch.no_grad()
    def episode_scores(self, episode: Episode) -> np.ndarray:
        gallery = [ref for _, ref in episode.gallery]
        shots = {c: episode.queries_for(c) for c in episode.classes}
        if self.coupled:
            self._fill_pairs([(q, g) for qs in shots.values() for q in qs for g in gallery])
        else:
            self._fill_single(gallery + [q for qs in shots.values() for q in qs])
        fq_rows, fg_rows = [], []
        for g in gallery:
            for c in episode.classes:
                feats = [self.pair_features(q, g) for q in shots[c]]
                fq, fg = aggregate_shots(torch.stack([a for a, _ in feats]),
                                         torch.stack([b for _, b in feats]))
                fq_rows.append(fq)
                fg_rows.append(fg)
        sims = self.model.pair_similarity(torch.stack(fq_rows), torch.stack(fg_rows))
        return sims.reshape(len(gallery), len(episode.classes)).double().numpy()
