"""On-disk annotation schema shared by every dataset source.

Each split is one JSON file ``<split>.json``::

    {"schema": "qgn-dataset/1", "task": "finegrained" | "search", "split": "train",
     "images": [{"path": "images/c003/0007.png", "class": 3,
                 "boxes": [[x1, y1, x2, y2]]}, ...]}

Search splits carry ``"persons": [{"box": [x1, y1, x2, y2], "id": int}]``
per image instead of ``class``/``boxes``; ``id == -1`` marks an unlabeled
person. Boxes are half-open pixel corners.
"""

from __future__ import annotations

import json
from functools import lru_cache
from pathlib import Path

import numpy as np
import torch
from PIL import Image

SCHEMA = "qgn-dataset/1"
SPLITS = ("train", "val", "test")

# fixed per-channel normalisation applied when images become tensors
MEAN = 0.5
STD = 0.25


def write_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, indent=1, sort_keys=True) + "\n")


def read_annotations(path: str | Path) -> dict:
    data = json.loads(Path(path).read_text())
    if data.get("schema") != SCHEMA:
        raise ValueError(f"{path}: unsupported schema {data.get('schema')!r}, expected {SCHEMA}")
    return data


def save_png(array: np.ndarray, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(array).save(path, format="PNG", optimize=False)


def to_tensor(array: np.ndarray) -> torch.Tensor:
    t = torch.from_numpy(np.array(array, dtype=np.uint8, copy=True)).permute(2, 0, 1).float() / 255.0
    return (t - MEAN) / STD


class ImageStore:
    """Loads images under ``root`` as normalised ``(3, H, W)`` float tensors, cached."""

    def __init__(self, root: str | Path, size: int | None = None):
        self.root = Path(root)
        self.size = size
        self._load = lru_cache(maxsize=None)(self._read)

    def _read(self, ref: str) -> torch.Tensor:
        with Image.open(self.root / ref) as im:
            im = im.convert("RGB")
            if self.size is not None and im.size != (self.size, self.size):
                im = im.resize((self.size, self.size), Image.BILINEAR)
            return to_tensor(np.asarray(im))

    def __call__(self, ref: str) -> torch.Tensor:
        return self._load(ref)

    def batch(self, refs) -> torch.Tensor:
        return torch.stack([self(r) for r in refs])
