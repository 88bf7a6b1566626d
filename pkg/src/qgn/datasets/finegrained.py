"""Procedural fine-grained classification data.

A class is a combination of four attributes: silhouette, stripe pattern,
hue and accent mark. Intra-class variation comes from position, small
rotation, size, lighting and pixel noise. Every image draws from its own
seed, derived from ``(seed, class, index)``, so output is byte-identical
across runs and independent of generation order.
"""

from __future__ import annotations

import colorsys
import itertools
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

from ..episodic import DatasetSplit
from .io import SCHEMA, SPLITS, read_annotations, save_png, write_json

SHAPES = ("circle", "square", "triangle", "diamond")
STRIPES = ("none", "horizontal", "vertical", "diagonal")
HUES = (0.0, 0.09, 0.17, 0.33, 0.5, 0.6, 0.72, 0.85)
ACCENTS = ("none", "dot", "bar")

_SUPERSAMPLE = 4


@dataclass
class SyntheticFinegrainedSpec:
    num_classes: int = 20
    images_per_class: int = 30
    image_size: int = 32
    split_ratio: tuple[int, int, int] = (2, 1, 1)
    seed: int = 0
    shapes: tuple[str, ...] = SHAPES
    stripes: tuple[str, ...] = STRIPES
    hues: tuple[float, ...] = HUES
    accents: tuple[str, ...] = ACCENTS
    max_shift: float = 0.12
    max_rotation: float = 20.0
    noise: float = 16.0
    hue_jitter: float = 0.04
    size_range: tuple[float, float] = (0.2, 0.34)
    class_attributes: list[dict] = field(default_factory=list, repr=False)

    def validate(self) -> None:
        combos = len(self.shapes) * len(self.stripes) * len(self.hues) * len(self.accents)
        if self.num_classes > combos:
            raise ValueError(f"{self.num_classes} classes requested but only {combos} "
                             "distinct attribute combinations exist")
        if self.num_classes < len(self.split_ratio):
            raise ValueError("need at least one class per split")
        if self.images_per_class < 1 or self.image_size < 8:
            raise ValueError("degenerate spec: images_per_class >= 1 and image_size >= 8 required")
        unknown = (set(self.shapes) - set(SHAPES)) | (set(self.stripes) - set(STRIPES)) \
            | (set(self.accents) - set(ACCENTS))
        if unknown:
            raise ValueError(f"unknown attribute values {sorted(unknown)}")


def class_attributes(spec: SyntheticFinegrainedSpec) -> list[dict]:
    """Distinct attribute combinations, one per class, chosen under ``spec.seed``."""
    spec.validate()
    combos = list(itertools.product(spec.shapes, spec.stripes, range(len(spec.hues)), spec.accents))
    rng = np.random.default_rng([spec.seed, 7])
    picked = rng.choice(len(combos), size=spec.num_classes, replace=False)
    return [dict(zip(("shape", "stripe", "hue", "accent"), combos[i])) for i in picked]


def split_classes(spec: SyntheticFinegrainedSpec) -> dict[str, list[int]]:
    rng = np.random.default_rng([spec.seed, 11])
    order = [int(c) for c in rng.permutation(spec.num_classes)]
    total = sum(spec.split_ratio)
    n_train = max(1, round(spec.num_classes * spec.split_ratio[0] / total))
    n_val = max(1, round(spec.num_classes * spec.split_ratio[1] / total))
    n_train = min(n_train, spec.num_classes - 2)
    n_val = min(n_val, spec.num_classes - n_train - 1)
    return {"train": sorted(order[:n_train]), "val": sorted(order[n_train:n_train + n_val]),
            "test": sorted(order[n_train + n_val:])}


def _polygon(shape: str, r: float) -> list[tuple[float, float]] | None:
    if shape == "square":
        return [(-r, -r), (r, -r), (r, r), (-r, r)]
    if shape == "triangle":
        return [(r * math.cos(a), r * math.sin(a))
                for a in (-math.pi / 2, math.pi / 6, 5 * math.pi / 6)]
    if shape == "diamond":
        return [(0, -r), (r * 0.8, 0), (0, r), (-r * 0.8, 0)]
    return None


def render_object(attrs: dict, spec: SyntheticFinegrainedSpec, rng: np.random.Generator):
    """Render one image; returns ``(uint8 HxWx3 array, [x1, y1, x2, y2])``."""
    s = spec.image_size
    big = s * _SUPERSAMPLE
    light = rng.uniform(0.75, 1.05)
    bg = np.clip(rng.uniform(0.35, 0.6) * 255 * light, 0, 255)
    canvas = Image.new("RGB", (big, big), (int(bg), int(bg), int(bg * rng.uniform(0.9, 1.1))))

    r = big * rng.uniform(*spec.size_range)
    cx = big / 2 + rng.uniform(-spec.max_shift, spec.max_shift) * big
    cy = big / 2 + rng.uniform(-spec.max_shift, spec.max_shift) * big
    hue = spec.hues[attrs["hue"]] + rng.uniform(-spec.hue_jitter, spec.hue_jitter)
    sat = rng.uniform(0.65, 0.85)
    fill = tuple(int(255 * c) for c in colorsys.hsv_to_rgb(hue % 1.0, sat, 0.9 * light))
    dark = tuple(int(0.35 * c) for c in fill)

    side = int(2 * r) + 8
    layer = Image.new("RGB", (side, side), fill)
    mask = Image.new("L", (side, side), 0)
    md = ImageDraw.Draw(mask)
    c0 = side / 2
    poly = _polygon(attrs["shape"], r)
    if poly is None:
        md.ellipse([c0 - r, c0 - r, c0 + r, c0 + r], fill=255)
    else:
        md.polygon([(c0 + x, c0 + y) for x, y in poly], fill=255)

    ld = ImageDraw.Draw(layer)
    period = max(4, int(r / 2.2))
    width = max(2, period // 2 - 1)
    if attrs["stripe"] == "horizontal":
        for y in range(0, side, period):
            ld.rectangle([0, y, side, y + width - 1], fill=dark)
    elif attrs["stripe"] == "vertical":
        for x in range(0, side, period):
            ld.rectangle([x, 0, x + width - 1, side], fill=dark)
    elif attrs["stripe"] == "diagonal":
        for o in range(-side, side, period):
            ld.line([(o, 0), (o + side, side)], fill=dark, width=width)

    ar = r * 0.22
    mark = (250, 250, 250) if light * 0.9 * sum(fill) / 3 < 150 else (15, 15, 15)
    if attrs["accent"] == "dot":
        ld.ellipse([c0 - ar, c0 - ar, c0 + ar, c0 + ar], fill=mark)
    elif attrs["accent"] == "bar":
        ld.rectangle([c0 - 2.2 * ar, c0 - 0.6 * ar, c0 + 2.2 * ar, c0 + 0.6 * ar], fill=mark)

    angle = rng.uniform(-spec.max_rotation, spec.max_rotation)
    layer = layer.rotate(angle, resample=Image.BILINEAR)
    mask = mask.rotate(angle, resample=Image.BILINEAR)
    ox, oy = int(round(cx - c0)), int(round(cy - c0))
    canvas.paste(layer, (ox, oy), mask)

    small = canvas.resize((s, s), Image.BOX)
    arr = np.asarray(small).astype(np.float64)
    arr += rng.normal(0.0, spec.noise, size=arr.shape)
    arr = np.clip(np.rint(arr), 0, 255).astype(np.uint8)

    bbox = mask.getbbox()
    x1, y1, x2, y2 = bbox if bbox else (0, 0, side, side)
    box = [max(0.0, (ox + x1) / _SUPERSAMPLE), max(0.0, (oy + y1) / _SUPERSAMPLE),
           min(float(s), (ox + x2) / _SUPERSAMPLE), min(float(s), (oy + y2) / _SUPERSAMPLE)]
    return arr, box


def image_seed(spec: SyntheticFinegrainedSpec, cls: int, index: int) -> np.random.Generator:
    return np.random.default_rng([spec.seed, 1, cls, index])


def render_class_image(spec: SyntheticFinegrainedSpec, attrs: dict, cls: int, index: int):
    return render_object(attrs, spec, image_seed(spec, cls, index))


def gen_finegrained(spec: SyntheticFinegrainedSpec, out_dir: str | Path) -> DatasetSplit:
    """Render the dataset under ``out_dir`` and return its split."""
    out = Path(out_dir)
    attrs = class_attributes(spec)
    spec.class_attributes = attrs
    splits = split_classes(spec)
    entries = {name: [] for name in SPLITS}
    split_of = {c: name for name, cs in splits.items() for c in cs}
    for cls, a in enumerate(attrs):
        for i in range(spec.images_per_class):
            arr, box = render_class_image(spec, a, cls, i)
            rel = f"images/c{cls:03d}/{i:04d}.png"
            save_png(arr, out / rel)
            entries[split_of[cls]].append({"path": rel, "class": cls,
                                           "boxes": [[round(v, 4) for v in box]]})
    for name in SPLITS:
        write_json(out / f"{name}.json", {"schema": SCHEMA, "task": "finegrained", "split": name,
                                         "images": entries[name]})
    meta = asdict(spec)
    write_json(out / "dataset.json", {"schema": SCHEMA, "task": "finegrained",
                                      "generator": "synthetic-finegrained", "spec": meta})
    return load_split(out)


def load_split(root: str | Path) -> DatasetSplit:
    """Read ``train/val/test.json`` annotation files into a :class:`DatasetSplit`."""
    root = Path(root)
    pools = {}
    for name in SPLITS:
        path = root / f"{name}.json"
        pool: dict[int, list[str]] = {}
        if path.exists():
            data = read_annotations(path)
            if data.get("task") != "finegrained":
                raise ValueError(f"{path} is not a classification split")
            for item in data["images"]:
                pool.setdefault(int(item["class"]), []).append(item["path"])
        pools[name] = pool
    return DatasetSplit(pools["train"], pools["val"], pools["test"], root=root)
