"""Self-describing checkpoints that refuse to load into a mismatched model."""

from __future__ import annotations

from pathlib import Path
from typing import Any, Mapping

import torch

from .fewshot import FewShotQGN
from .search import SearchQGN

SCHEMA_VERSION = 1
KINDS = ("fewshot", "search")


class CheckpointMismatch(ValueError):
    pass


def _components(model) -> dict[str, bool]:
    cfg = model.config
    return {"qsse": cfg.use_qsse, "qsimnet": cfg.use_qsimnet,
            "qrpn": bool(getattr(cfg, "use_qrpn", False))}


def describe(model) -> dict:
    if isinstance(model, FewShotQGN):
        kind, embed = "fewshot", model.config.backbone.embedding_dim
    elif isinstance(model, SearchQGN):
        kind, embed = "search", model.config.embed_dim
    else:
        raise TypeError(f"cannot checkpoint {type(model).__name__}")
    return {"schema_version": SCHEMA_VERSION, "kind": kind,
            "arch": model.config.backbone.arch, "embed_dim": embed,
            "components": _components(model), "num_ids": model.oim.num_ids}


def save_checkpoint(path: str | Path, model, config: Mapping, trainer_state: Mapping | None = None,
                    extra: Mapping | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {**describe(model), "config": dict(config), "state_dict": model.state_dict(),
               "trainer": trainer_state, "extra": dict(extra or {})}
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)
    return path


def read_checkpoint(path: str | Path) -> dict:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if not isinstance(payload, dict) or "schema_version" not in payload:
        raise CheckpointMismatch(f"{path} is not a checkpoint written by this package")
    if payload["schema_version"] != SCHEMA_VERSION:
        raise CheckpointMismatch(f"{path}: schema version {payload['schema_version']}, "
                                 f"this build reads {SCHEMA_VERSION}")
    return payload


def check_compatible(header: Mapping, expected: Mapping[str, Any]) -> None:
    """Raise unless every expected header field matches.

    ``expected["components"]`` lists components the caller wants active; each
    must have been built into the checkpointed model.
    """
    problems = []
    for key in ("kind", "arch", "embed_dim"):
        if key in expected and expected[key] is not None and expected[key] != header[key]:
            problems.append(f"{key}: checkpoint has {header[key]!r}, expected {expected[key]!r}")
    for name, wanted in (expected.get("components") or {}).items():
        if wanted and not header["components"].get(name, False):
            problems.append(f"component {name} requested but absent from the checkpoint")
    if problems:
        raise CheckpointMismatch("; ".join(problems))


def load_model(path: str | Path, build, expected: Mapping[str, Any] | None = None):
    """Rebuild a model via ``build(header)`` and load its weights strictly.

    Returns ``(model, payload)``.
    """
    payload = read_checkpoint(path)
    check_compatible(payload, expected or {})
    model = build(payload)
    got = describe(model)
    for key in ("kind", "arch", "embed_dim", "components"):
        if got[key] != payload[key]:
            raise CheckpointMismatch(f"{key}: checkpoint has {payload[key]!r}, "
                                     f"rebuilt model has {got[key]!r}")
    model.load_state_dict(payload["state_dict"], strict=True)
    return model, payload
