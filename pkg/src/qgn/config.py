"""Run configuration: YAML with full-depth keys, defaults, overrides and builders.

Precedence, lowest to highest: built-in defaults, the ``--config`` file,
``--set key.path=value`` overrides, then the dedicated CLI flags
(``--seed``, ``--no-qsse``, ``--no-qrpn``, ``--no-qsimnet``).
"""

from __future__ import annotations

import copy
from dataclasses import fields
from pathlib import Path
from typing import Any, Mapping

import yaml

from .backbone import BackboneConfig
from .datasets.finegrained import SyntheticFinegrainedSpec
from .datasets.scenes import SearchSceneSpec
from .fewshot import FewShotModelConfig, FewShotTrainConfig
from .search import SearchEvalConfig, SearchModelConfig, SearchTrainConfig

SNAPSHOT_NAME = "config.resolved.yaml"


def _spec_defaults(cls, skip=()) -> dict:
    obj = cls()
    out = {}
    for f in fields(cls):
        if f.name in skip:
            continue
        v = getattr(obj, f.name)
        out[f.name] = list(v) if isinstance(v, tuple) else v
    return out


def defaults() -> dict:
    fs_train = _spec_defaults(FewShotTrainConfig, skip=("seed",))
    ps_train = _spec_defaults(SearchTrainConfig, skip=("seed",))
    ps_eval = _spec_defaults(SearchEvalConfig)
    return {
        "seed": 0,
        "data": {
            "finegrained": {"root": "data/finegrained",
                            **_spec_defaults(SyntheticFinegrainedSpec, skip=("class_attributes", "seed"))},
            "search": {"root": "data/search", **_spec_defaults(SearchSceneSpec, skip=("seed",))},
            "cub": {"root": None, "split_file": None, "image_size": 84},
        },
        "model": {
            "use_qsse": True,
            "use_qsimnet": True,
            "use_qrpn": True,
            "reduction": 16,
            "gate_bias": 3.0,
            "fewshot": {"arch": "tiny", "embed_dim": None, "qsse_stage_mask": None,
                        "rotation": True, "rotation_streams": "both", "oim_streams": "both",
                        "oim_momentum": 0.5, "oim_temperature": 0.1},
            "search": {"arch": "tiny", "embed_dim": 64, "qsse_stage_mask": None,
                       **{k: v for k, v in _spec_defaults(SearchModelConfig).items()
                          if k not in ("backbone", "embed_dim", "use_qrpn", "use_qsimnet")}},
        },
        "train": {"fewshot": fs_train, "search": ps_train},
        "eval": {
            "fewshot": {"episodes": 600, "shots": [1, 5], "c_novel": 5, "l": 15, "seed": 1,
                        "split": "test", "batch_size": 256},
            "search": ps_eval,
        },
    }


class ConfigError(ValueError):
    def __init__(self, errors: list[str]):
        super().__init__("invalid configuration:\n  " + "\n  ".join(errors))
        self.errors = errors


def _merge(base: dict, update: Mapping, path: str, errors: list[str]) -> None:
    for key, value in update.items():
        where = f"{path}.{key}" if path else str(key)
        if key not in base:
            errors.append(f"unknown key {where}")
        elif isinstance(base[key], dict) and base[key] and not isinstance(value, Mapping):
            errors.append(f"{where} must be a mapping")
        elif isinstance(base[key], dict) and base[key]:
            _merge(base[key], value, where, errors)
        else:
            base[key] = value


def parse_override(text: str) -> tuple[str, Any]:
    if "=" not in text:
        raise ConfigError([f"override {text!r} is not key.path=value"])
    key, raw = text.split("=", 1)
    return key.strip(), yaml.safe_load(raw)


def set_path(cfg: dict, dotted: str, value: Any) -> None:
    node = cfg
    parts = dotted.split(".")
    for p in parts[:-1]:
        if not isinstance(node.get(p), dict):
            raise ConfigError([f"unknown key {dotted}"])
        node = node[p]
    if parts[-1] not in node:
        raise ConfigError([f"unknown key {dotted}"])
    node[parts[-1]] = value


def get_path(cfg: Mapping, dotted: str) -> Any:
    node = cfg
    for p in dotted.split("."):
        node = node[p]
    return node


def load_config(path: str | Path | None = None, overrides: Mapping[str, Any] | None = None) -> dict:
    cfg = defaults()
    errors: list[str] = []
    if path is not None:
        data = yaml.safe_load(Path(path).read_text()) or {}
        if not isinstance(data, Mapping):
            raise ConfigError([f"{path}: top level must be a mapping"])
        _merge(cfg, data, "", errors)
    if errors:
        raise ConfigError(errors)
    for key, value in (overrides or {}).items():
        set_path(cfg, key, value)
    return cfg


def validate(cfg: Mapping) -> list[str]:
    """Every problem found, as ``key.path: message`` strings."""
    errors = []
    try:
        fewshot_train_config(cfg)
    except (TypeError, ValueError) as e:
        errors.append(f"train.fewshot: {e}")
    else:
        errors += [e for e in fewshot_train_config(cfg).validate()]
    try:
        errors += search_train_config(cfg).validate()
    except (TypeError, ValueError) as e:
        errors.append(f"train.search: {e}")
    for name, build in (("model.fewshot", fewshot_model_config), ("model.search", search_model_config),
                        ("data.finegrained", finegrained_spec), ("data.search", scene_spec)):
        try:
            obj = build(cfg)
            if hasattr(obj, "validate") and name.startswith("data"):
                obj.validate()
        except (TypeError, ValueError) as e:
            errors.append(f"{name}: {e}")
    ev = cfg["eval"]["fewshot"]
    if ev["episodes"] < 1:
        errors.append("eval.fewshot.episodes must be >= 1")
    if not ev["shots"] or any(k < 1 for k in ev["shots"]):
        errors.append("eval.fewshot.shots must list positive shot counts")
    if ev["split"] not in ("val", "test"):
        errors.append("eval.fewshot.split must be 'val' or 'test'")
    if not isinstance(cfg["seed"], int):
        errors.append("seed must be an integer")
    return errors


def check(cfg: Mapping) -> dict:
    errors = validate(cfg)
    if errors:
        raise ConfigError(errors)
    return dict(cfg)


def write_snapshot(cfg: Mapping, out_dir: str | Path) -> Path:
    path = Path(out_dir) / SNAPSHOT_NAME
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(yaml.safe_dump(copy.deepcopy(dict(cfg)), sort_keys=True))
    return path


# ---------------------------------------------------------------- builders


def _tuple(v):
    return tuple(v) if isinstance(v, list) else v


def finegrained_spec(cfg: Mapping) -> SyntheticFinegrainedSpec:
    d = {k: _tuple(v) for k, v in cfg["data"]["finegrained"].items() if k != "root"}
    return SyntheticFinegrainedSpec(seed=cfg["seed"], **d)


def scene_spec(cfg: Mapping) -> SearchSceneSpec:
    d = {k: _tuple(v) for k, v in cfg["data"]["search"].items() if k != "root"}
    return SearchSceneSpec(seed=cfg["seed"], **d)


def fewshot_model_config(cfg: Mapping) -> FewShotModelConfig:
    m = cfg["model"]
    fs = m["fewshot"]
    image_size = cfg["data"]["cub"]["image_size"] if cfg["data"]["cub"]["root"] else \
        cfg["data"]["finegrained"]["image_size"]
    bb = BackboneConfig(arch=fs["arch"], embed_dim=fs["embed_dim"], image_size=image_size,
                        use_qsse=m["use_qsse"], qsse_stage_mask=fs["qsse_stage_mask"],
                        reduction=m["reduction"], gate_bias=m["gate_bias"])
    return FewShotModelConfig(bb, use_qsimnet=m["use_qsimnet"], rotation=fs["rotation"],
                              rotation_streams=fs["rotation_streams"], oim_streams=fs["oim_streams"],
                              oim_momentum=fs["oim_momentum"], oim_temperature=fs["oim_temperature"])


def search_model_config(cfg: Mapping) -> SearchModelConfig:
    m = cfg["model"]
    ps = dict(m["search"])
    bb = BackboneConfig(arch=ps.pop("arch"), detection_mode=True,
                        image_size=cfg["data"]["search"]["image_h"], use_qsse=m["use_qsse"],
                        qsse_stage_mask=ps.pop("qsse_stage_mask"), reduction=m["reduction"],
                        gate_bias=m["gate_bias"])
    return SearchModelConfig(backbone=bb, use_qrpn=m["use_qrpn"], use_qsimnet=m["use_qsimnet"],
                             **{k: _tuple(v) for k, v in ps.items()})


def fewshot_train_config(cfg: Mapping) -> FewShotTrainConfig:
    return FewShotTrainConfig(seed=cfg["seed"], **cfg["train"]["fewshot"])


def search_train_config(cfg: Mapping) -> SearchTrainConfig:
    return SearchTrainConfig(seed=cfg["seed"], **cfg["train"]["search"])


def search_eval_config(cfg: Mapping) -> SearchEvalConfig:
    return SearchEvalConfig(**{k: _tuple(v) for k, v in cfg["eval"]["search"].items()})
