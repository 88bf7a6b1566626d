"""Episode sampling, training-pair construction and N-way K-shot evaluation.

Terminology follows person search: *queries* are the labelled exemplars,
*gallery* items are what gets classified.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Hashable, Mapping, Protocol, Sequence

import numpy as np

Item = Hashable


@dataclass
class DatasetSplit:
    """Class id -> item references for each split; class sets must be disjoint."""

    train: dict[int, list[Item]]
    val: dict[int, list[Item]] = field(default_factory=dict)
    test: dict[int, list[Item]] = field(default_factory=dict)
    root: Path | None = None

    def __post_init__(self):
        names = ("train", "val", "test")
        for i, a in enumerate(names):
            for b in names[i + 1:]:
                shared = set(getattr(self, a)) & set(getattr(self, b))
                if shared:
                    raise ValueError(f"classes {sorted(shared)[:5]} appear in both {a} and {b}")

    def pool(self, name: str) -> dict[int, list[Item]]:
        if name not in ("train", "val", "test"):
            raise ValueError(f"unknown split {name!r}")
        return getattr(self, name)


@dataclass(frozen=True)
class Episode:
    classes: tuple[int, ...]
    queries: tuple[tuple[int, Item], ...]
    gallery: tuple[tuple[int, Item], ...]
    k: int
    l: int
    seed: int

    def queries_for(self, cls: int) -> list[Item]:
        return [ref for c, ref in self.queries if c == cls]

    def gallery_targets(self) -> np.ndarray:
        """Index into ``classes`` of each gallery item's true class."""
        pos = {c: i for i, c in enumerate(self.classes)}
        return np.array([pos[c] for c, _ in self.gallery], dtype=np.int64)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["queries"] = [list(q) for q in self.queries]
        d["gallery"] = [list(g) for g in self.gallery]
        return d


def sample_episode(pool: Mapping[int, Sequence[Item]], c_novel: int = 5, k: int = 1,
                   l: int = 15, seed: int = 0) -> Episode:
    """Draw ``c_novel`` classes with ``k`` query and ``l`` gallery items each.

    Classes with fewer than ``k + l`` items are skipped; too few eligible
    classes is an error.
    """
    eligible = sorted(c for c, items in pool.items() if len(items) >= k + l)
    if len(eligible) < c_novel:
        raise ValueError(f"only {len(eligible)} classes have >= {k + l} items; need {c_novel}")
    rng = np.random.default_rng(seed)
    classes = [eligible[i] for i in rng.choice(len(eligible), size=c_novel, replace=False)]
    queries, gallery = [], []
    for c in classes:
        items = list(pool[c])
        picked = rng.choice(len(items), size=k + l, replace=False)
        queries += [(c, items[i]) for i in picked[:k]]
        gallery += [(c, items[i]) for i in picked[k:]]
    return Episode(tuple(classes), tuple(queries), tuple(gallery), k, l, seed)


@dataclass(frozen=True)
class TrainPair:
    query: Item
    gallery: Item
    query_class: int
    gallery_class: int

    @property
    def same(self) -> bool:
        return self.query_class == self.gallery_class


def make_train_pairs(pool: Mapping[int, Sequence[Item]], batch: int = 8, neg_ratio: int = 3,
                     rng: np.random.Generator | None = None) -> list[TrainPair]:
    """A batch of query/gallery pairs with ``neg_ratio`` negatives per positive."""
    if rng is None:
        rng = np.random.default_rng()
    classes = sorted(pool)
    if len(classes) < 2:
        raise ValueError("pair sampling needs at least two classes")
    if batch % (neg_ratio + 1):
        raise ValueError(f"batch {batch} is not a multiple of {neg_ratio + 1}")
    n_pos = batch // (neg_ratio + 1)
    pairs = []
    for i in range(batch):
        if i < n_pos:
            c = classes[rng.integers(len(classes))]
            items = pool[c]
            a, b = (rng.choice(len(items), size=2, replace=False) if len(items) > 1 else (0, 0))
            pairs.append(TrainPair(items[a], items[b], c, c))
        else:
            ci, cj = rng.choice(len(classes), size=2, replace=False)
            cq, cg = classes[ci], classes[cj]
            pairs.append(TrainPair(pool[cq][rng.integers(len(pool[cq]))],
                                   pool[cg][rng.integers(len(pool[cg]))], cq, cg))
    order = rng.permutation(batch)
    return [pairs[i] for i in order]


class EpisodeScorer(Protocol):
    def episode_scores(self, episode: Episode) -> np.ndarray:
        """Similarity of every gallery item (rows) to every episode class (columns)."""


@dataclass
class EpisodeResult:
    predictions: np.ndarray
    accuracy: float


def classify_scores(scores: np.ndarray, targets: np.ndarray) -> EpisodeResult:
    """Arg-max class per row; ``np.argmax`` breaks ties toward the lowest index."""
    scores = np.asarray(scores)
    preds = np.argmax(scores, axis=1)
    return EpisodeResult(preds, float(np.mean(preds == targets)))


def classify_episode(model: EpisodeScorer, episode: Episode) -> EpisodeResult:
    return classify_scores(model.episode_scores(episode), episode.gallery_targets())


@dataclass
class ProtocolResult:
    mean: float
    ci95: float
    accuracies: np.ndarray
    k: int
    c_novel: int

    def to_dict(self) -> dict:
        return {"k": self.k, "c_novel": self.c_novel, "episodes": len(self.accuracies),
                "mean_accuracy": self.mean, "ci95": self.ci95}


def episode_seeds(seed: int, episodes: int) -> list[int]:
    return [int(s) for s in np.random.default_rng(seed).integers(0, 2**31 - 1, size=episodes)]


def summarize(accuracies: Sequence[float]) -> tuple[float, float]:
    """Mean and 95% half-width ``1.96 * std / sqrt(n)`` (population std)."""
    acc = np.asarray(accuracies, dtype=np.float64)
    if len(acc) == 0:
        raise ValueError("zero episodes")
    return float(acc.mean()), float(1.96 * acc.std() / np.sqrt(len(acc)))


def evaluate_protocol(model: EpisodeScorer, pool: Mapping[int, Sequence[Item]],
                      episodes: int = 600, c_novel: int = 5, k: int = 1, l: int = 15,
                      seed: int = 0) -> ProtocolResult:
    if episodes <= 0:
        raise ValueError("zero episodes")
    accs = [classify_episode(model, sample_episode(pool, c_novel, k, l, s)).accuracy
            for s in episode_seeds(seed, episodes)]
    mean, ci = summarize(accs)
    return ProtocolResult(mean, ci, np.asarray(accs), k, c_novel)


def write_manifest(episodes: Sequence[Episode], path: str | Path) -> None:
    Path(path).write_text(json.dumps({"schema": 1, "episodes": [e.to_dict() for e in episodes]},
                                     indent=1))
