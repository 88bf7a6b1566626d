"""CUB-200-2011 ingestion into a class-disjoint 100/50/50 split.

Expected layout: ``<root>/images/<class_dir>/*.jpg`` (the ``images/`` level
is optional). The split file is JSON ``{"train": [...], "val": [...],
"test": [...]}`` listing class directory names. Without one, the usual rule
over the sorted class directories applies: index ``i % 2 == 0`` -> train,
``i % 4 == 1`` -> val, ``i % 4 == 3`` -> test.
"""

from __future__ import annotations

import json
import warnings
from pathlib import Path

from ..episodic import DatasetSplit

CUB_NUM_CLASSES = 200
CUB_NUM_IMAGES = 11788
CUB_SPLIT_SIZES = {"train": 100, "val": 50, "test": 50}
IMAGE_SUFFIXES = {".jpg", ".jpeg", ".png"}


def _image_root(root: Path) -> Path:
    return root / "images" if (root / "images").is_dir() else root


def default_split(class_dirs: list[str]) -> dict[str, list[str]]:
    out = {"train": [], "val": [], "test": []}
    for i, name in enumerate(sorted(class_dirs)):
        if i % 2 == 0:
            out["train"].append(name)
        elif i % 4 == 1:
            out["val"].append(name)
        else:
            out["test"].append(name)
    return out


def ingest_cub(root: str | Path, split_file: str | Path | None = None) -> DatasetSplit:
    """Load CUB as a :class:`DatasetSplit` whose items are paths relative to ``root``.

    Class ids are the positions of the class directories in sorted order.
    Class directories named by the split but absent on disk raise an error
    that lists all of them.
    """
    root = Path(root)
    images = _image_root(root)
    if not images.is_dir():
        raise FileNotFoundError(f"no image directory under {root}")
    present = sorted(p.name for p in images.iterdir() if p.is_dir())
    if split_file is not None:
        wanted = json.loads(Path(split_file).read_text())
    else:
        wanted = default_split(present)
    listed = sorted({c for name in ("train", "val", "test") for c in wanted.get(name, [])})
    missing = [c for c in listed if c not in present]
    if missing:
        raise FileNotFoundError(f"{len(missing)} class directories missing: {missing}")
    class_id = {c: i for i, c in enumerate(listed)}
    pools = {}
    n_images = 0
    for name in ("train", "val", "test"):
        pool = {}
        for c in wanted.get(name, []):
            files = sorted(str(p.relative_to(root)) for p in (images / c).iterdir()
                           if p.suffix.lower() in IMAGE_SUFFIXES)
            pool[class_id[c]] = files
            n_images += len(files)
        pools[name] = pool
    split = DatasetSplit(pools["train"], pools["val"], pools["test"], root=root)
    if len(listed) == CUB_NUM_CLASSES:
        sizes = {k: len(v) for k, v in pools.items()}
        if sizes != CUB_SPLIT_SIZES or n_images != CUB_NUM_IMAGES:
            warnings.warn(f"full CUB expected {CUB_SPLIT_SIZES} classes / {CUB_NUM_IMAGES} images, "
                          f"found {sizes} / {n_images}")
    return split


def count_images(split: DatasetSplit) -> int:
    return sum(len(v) for name in ("train", "val", "test") for v in split.pool(name).values())
