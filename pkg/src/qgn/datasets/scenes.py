"""Procedural person-search scenes.

An identity is a clothing combination (top hue, bottom hue, top pattern,
head tone). A scene holds a few people over a cluttered background; train and
test identities are disjoint. The test protocol lists, for each query
(a scene plus the queried person's box), a gallery of scenes: every other
scene showing that identity plus random negatives up to the gallery size.
"""

from __future__ import annotations

import colorsys
import itertools
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

from ..boxgeom import BBox, iou
from .io import SCHEMA, read_annotations, save_png, write_json

PERSON_HUES = (0.0, 0.08, 0.16, 0.3, 0.5, 0.62, 0.75, 0.88)
PATTERNS = ("plain", "stripes", "split")
UNLABELED = -1


@dataclass
class SearchSceneSpec:
    image_w: int = 128
    image_h: int = 96
    num_train_ids: int = 60
    num_test_ids: int = 100
    appearances: int = 3
    persons_per_scene: tuple[int, int] = (2, 4)
    gallery_size: int = 20
    queries_per_id: int = 2
    hue_share_prob: float = 0.4
    unlabeled_prob: float = 0.3
    person_height: tuple[int, int] = (38, 54)
    noise: float = 6.0
    seed: int = 0

    def validate(self) -> None:
        combos = len(PERSON_HUES) ** 2 * len(PATTERNS)
        if self.num_train_ids + self.num_test_ids > combos:
            raise ValueError(f"at most {combos} distinct identities available")
        if self.appearances < 2:
            raise ValueError("each identity needs >= 2 appearances (query + gallery)")
        lo, hi = self.persons_per_scene
        if not 1 <= lo <= hi or hi * self.person_height[1] * 0.45 > self.image_w:
            raise ValueError("persons_per_scene does not fit the image width")
        if self.gallery_size < 2:
            raise ValueError("gallery_size must be >= 2")


@dataclass(frozen=True)
class Identity:
    top: int
    bottom: int
    pattern: str
    tone: float


@dataclass
class SearchScene:
    path: str
    persons: list[tuple[BBox, int]]

    def boxes_of(self, pid: int) -> list[BBox]:
        return [b for b, p in self.persons if p == pid]


def make_identities(spec: SearchSceneSpec) -> dict[int, Identity]:
    spec.validate()
    rng = np.random.default_rng([spec.seed, 3])
    combos = list(itertools.product(range(len(PERSON_HUES)), range(len(PERSON_HUES)), PATTERNS))
    picked = rng.choice(len(combos), size=spec.num_train_ids + spec.num_test_ids, replace=False)
    return {i: Identity(combos[c][0], combos[c][1], combos[c][2], float(rng.uniform(0.55, 0.9)))
            for i, c in enumerate(picked)}


def _rgb(hue: float, sat: float, val: float) -> tuple[int, int, int]:
    return tuple(int(255 * c) for c in colorsys.hsv_to_rgb(hue % 1.0, sat, val))


def draw_person(draw: ImageDraw.ImageDraw, box: BBox, ident: Identity, rng: np.random.Generator):
    x1, y1, x2, y2 = box.to_list()
    w, h = x2 - x1, y2 - y1
    light = rng.uniform(0.8, 1.0)
    top = _rgb(PERSON_HUES[ident.top] + rng.uniform(-0.01, 0.01), 0.75, 0.9 * light)
    bottom = _rgb(PERSON_HUES[ident.bottom] + rng.uniform(-0.01, 0.01), 0.7, 0.6 * light)
    tone = int(255 * ident.tone * light)
    skin = (tone, int(tone * 0.8), int(tone * 0.65))
    head_h = 0.2 * h
    torso_b = y1 + 0.58 * h
    draw.ellipse([x1 + 0.28 * w, y1, x2 - 0.28 * w, y1 + head_h], fill=skin)
    draw.rectangle([x1, y1 + head_h, x2 - 1, torso_b], fill=top)
    if ident.pattern == "stripes":
        dark = tuple(int(0.4 * c) for c in top)
        step = max(4, int(h / 12))
        for yy in np.arange(y1 + head_h + step / 2, torso_b - 1, step):
            draw.rectangle([x1, yy, x2 - 1, yy + step // 2 - 1], fill=dark)
    elif ident.pattern == "split":
        light_top = tuple(min(255, int(c * 0.45 + 140)) for c in top)
        draw.rectangle([x1 + w / 2, y1 + head_h, x2 - 1, torso_b], fill=light_top)
    draw.rectangle([x1 + 0.1 * w, torso_b, x1 + 0.46 * w, y2 - 1], fill=bottom)
    draw.rectangle([x1 + 0.54 * w, torso_b, x2 - 0.1 * w - 1, y2 - 1], fill=bottom)


def _background(spec: SearchSceneSpec, rng: np.random.Generator) -> Image.Image:
    base = rng.uniform(90, 170)
    img = Image.new("RGB", (spec.image_w, spec.image_h), (int(base),) * 3)
    d = ImageDraw.Draw(img)
    for _ in range(rng.integers(3, 7)):
        x, y = rng.uniform(0, spec.image_w), rng.uniform(0, spec.image_h)
        w, h = rng.uniform(10, 50), rng.uniform(5, 30)
        g = int(np.clip(base + rng.uniform(-50, 50), 0, 255))
        d.rectangle([x, y, x + w, y + h], fill=(g, g, int(np.clip(g + rng.uniform(-15, 15), 0, 255))))
    return img


def _place(n: int, spec: SearchSceneSpec, rng: np.random.Generator) -> list[BBox]:
    """Non-overlapping person boxes, left to right."""
    for _ in range(200):
        boxes = []
        for _ in range(n):
            h = float(rng.integers(spec.person_height[0], spec.person_height[1] + 1))
            w = float(round(h * rng.uniform(0.36, 0.44)))
            x = float(rng.integers(0, int(spec.image_w - w) + 1))
            y = float(rng.integers(0, int(spec.image_h - h) + 1))
            boxes.append(BBox(x, y, x + w, y + h))
        if all(iou(a, b) == 0 for a, b in itertools.combinations(boxes, 2)):
            return sorted(boxes, key=lambda b: b.x1)
    raise RuntimeError("could not place persons without overlap")


def _compose(ids: list[int], identities: dict[int, Identity], spec: SearchSceneSpec,
             rng: np.random.Generator) -> list[list[int]]:
    """Group ``appearances`` copies of every id into scenes with distinct members."""
    pending = [i for i in ids for _ in range(spec.appearances)]
    rng.shuffle(pending)
    scenes = []
    lo, hi = spec.persons_per_scene
    while pending:
        size = min(int(rng.integers(lo, hi + 1)), len(pending))
        scene = [pending.pop(0)]
        while len(scene) < size and pending:
            anchor = identities[scene[0]]
            share = [j for j, p in enumerate(pending) if p not in scene
                     and (identities[p].top == anchor.top or identities[p].bottom == anchor.bottom)]
            other = [j for j, p in enumerate(pending) if p not in scene]
            if not other:
                break
            pool = share if share and rng.random() < spec.hue_share_prob else other
            scene.append(pending.pop(pool[int(rng.integers(len(pool)))]))
        scenes.append(scene)
    return scenes


def _render_split(name: str, ids: list[int], identities, spec, out: Path, rng) -> list[SearchScene]:
    scenes = []
    for si, members in enumerate(_compose(ids, identities, spec, rng)):
        srng = np.random.default_rng([spec.seed, 5, 0 if name == "train" else 1, si])
        people = list(members)
        if srng.random() < spec.unlabeled_prob and len(people) < spec.persons_per_scene[1]:
            people.append(UNLABELED)
        boxes = _place(len(people), spec, srng)
        order = srng.permutation(len(people))
        img = _background(spec, srng)
        d = ImageDraw.Draw(img)
        persons = []
        for b, k in zip(boxes, order):
            pid = people[k]
            ident = identities[pid] if pid != UNLABELED else Identity(
                int(srng.integers(len(PERSON_HUES))), int(srng.integers(len(PERSON_HUES))),
                PATTERNS[int(srng.integers(len(PATTERNS)))], float(srng.uniform(0.55, 0.9)))
            draw_person(d, b, ident, srng)
            persons.append((b, pid))
        arr = np.asarray(img).astype(np.float64) + srng.normal(0, spec.noise, (spec.image_h, spec.image_w, 3))
        rel = f"scenes/{name}/{si:05d}.png"
        save_png(np.clip(np.rint(arr), 0, 255).astype(np.uint8), out / rel)
        scenes.append(SearchScene(rel, persons))
    return scenes


def build_protocol(scenes: list[SearchScene], spec: SearchSceneSpec, rng) -> list[dict]:
    by_id: dict[int, list[int]] = {}
    for si, sc in enumerate(scenes):
        for _, pid in sc.persons:
            if pid != UNLABELED:
                by_id.setdefault(pid, []).append(si)
    queries = []
    for pid in sorted(by_id):
        where = by_id[pid]
        if len(where) < 2:
            raise ValueError(f"identity {pid} has no gallery appearance")
        for qs in where[: spec.queries_per_id]:
            positives = [s for s in where if s != qs]
            negatives = [s for s in range(len(scenes)) if s != qs and s not in where]
            n_neg = max(0, spec.gallery_size - len(positives))
            negs = sorted(rng.choice(negatives, size=n_neg, replace=False).tolist())
            gallery = sorted(positives[: spec.gallery_size] + negs)
            queries.append({"id": pid, "query_image": scenes[qs].path,
                            "query_box": scenes[qs].boxes_of(pid)[0].to_list(),
                            "gallery": [scenes[s].path for s in gallery]})
    return queries


def _scene_entries(scenes: list[SearchScene]) -> list[dict]:
    return [{"path": s.path, "persons": [{"box": b.to_list(), "id": p} for b, p in s.persons]}
            for s in scenes]


def gen_search_scenes(spec: SearchSceneSpec, out_dir: str | Path) -> dict:
    """Render train/test scenes and the test query/gallery protocol under ``out_dir``."""
    out = Path(out_dir)
    identities = make_identities(spec)
    train_ids = list(range(spec.num_train_ids))
    test_ids = list(range(spec.num_train_ids, spec.num_train_ids + spec.num_test_ids))
    rng = np.random.default_rng([spec.seed, 9])
    train = _render_split("train", train_ids, identities, spec, out, rng)
    test = _render_split("test", test_ids, identities, spec, out, rng)
    protocol = build_protocol(test, spec, rng)
    for name, scenes in (("train", train), ("test", test)):
        write_json(out / f"{name}.json", {"schema": SCHEMA, "task": "search", "split": name,
                                         "images": _scene_entries(scenes)})
    write_json(out / "protocol.json", {"schema": SCHEMA, "task": "search",
                                       "gallery_size": spec.gallery_size, "queries": protocol})
    write_json(out / "dataset.json", {"schema": SCHEMA, "task": "search",
                                      "generator": "synthetic-scenes", "spec": asdict(spec),
                                      "identities": {str(k): asdict(v) for k, v in identities.items()}})
    return {"train": train, "test": test, "protocol": protocol, "identities": identities}


def load_scenes(root: str | Path, split: str) -> list[SearchScene]:
    data = read_annotations(Path(root) / f"{split}.json")
    if data.get("task") != "search":
        raise ValueError(f"{root}/{split}.json is not a search split")
    return [SearchScene(e["path"], [(BBox.from_list(p["box"]), int(p["id"])) for p in e["persons"]])
            for e in data["images"]]


def load_protocol(root: str | Path) -> list[dict]:
    return read_annotations(Path(root) / "protocol.json")["queries"]


def hue_share_fraction(scenes: list[SearchScene], identities: dict[int, Identity]) -> float:
    """Fraction of scenes where two labelled people share a top or bottom hue."""
    hits = 0
    for sc in scenes:
        ids = [identities[p] for _, p in sc.persons if p != UNLABELED]
        if any(a.top == b.top or a.bottom == b.bottom for a, b in itertools.combinations(ids, 2)):
            hits += 1
    return hits / max(len(scenes), 1)
