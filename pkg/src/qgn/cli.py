"""``qgn`` command line: gen-data, train-fewshot, train-search, eval, report."""

from __future__ import annotations

import argparse
import itertools
import json
import logging
import sys
from pathlib import Path
from typing import Mapping

import torch

from . import config as C
from .checkpoint import CheckpointMismatch, load_model, read_checkpoint, save_checkpoint
from .datasets import (ImageStore, gen_finegrained, gen_search_scenes, ingest_cub, load_protocol,
                       load_scenes, load_split)
from .datasets.scenes import hue_share_fraction, make_identities
from .episodic import evaluate_protocol
from .fewshot import EpisodeEvaluator, FewShotQGN, FewShotTrainer
from .reports import (count_rows, plot_accuracy, plot_losses, plot_proposal_counts, read_jsonl,
                      write_csv)
from .search import SearchEvaluator, SearchQGN, SearchTrainer

log = logging.getLogger("qgn")

COMPONENTS = {"fewshot": ("qsse", "qsimnet"), "search": ("qsse", "qrpn", "qsimnet")}


def ablation_combos(components) -> list[dict[str, bool]]:
    """Every on/off assignment of ``components``, all-off first."""
    return [dict(zip(components, bits)) for bits in itertools.product((False, True), repeat=len(components))]


def combo_label(combo: Mapping[str, bool]) -> str:
    on = [k for k, v in combo.items() if v]
    return "+".join(on) if on else "baseline"


# ------------------------------------------------------------------ config


def resolve(args) -> dict:
    overrides = dict(C.parse_override(s) for s in args.set or [])
    cfg = C.load_config(args.config, overrides)
    if args.seed is not None:
        cfg["seed"] = args.seed
    for name in ("qsse", "qrpn", "qsimnet"):
        if getattr(args, f"no_{name}", False):
            cfg["model"][f"use_{name}"] = False
    return C.check(cfg)


def _out(args, default: str) -> Path:
    out = Path(args.out or default)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _setup_logging(out: Path) -> None:
    root = logging.getLogger()
    # repeated in-process runs must not keep writing into earlier run logs
    for h in [h for h in root.handlers if getattr(h, "qgn_run_log", False)]:
        root.removeHandler(h)
        h.close()
    handler = logging.FileHandler(out / "run.log")
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
    handler.qgn_run_log = True
    root.addHandler(handler)
    root.setLevel(logging.INFO)


def _requested(cfg) -> dict[str, bool]:
    return {k: cfg["model"][f"use_{k}"] for k in ("qsse", "qrpn", "qsimnet")}


# ---------------------------------------------------------------- gen-data


def cmd_gen_data(args) -> int:
    cfg = resolve(args)
    base = Path(args.out) if args.out else None
    summary = {}
    if args.task in ("fewshot", "all"):
        root = base / "finegrained" if base else Path(cfg["data"]["finegrained"]["root"])
        split = gen_finegrained(C.finegrained_spec(cfg), root)
        summary["finegrained"] = {
            "root": str(root),
            **{name: {"classes": len(split.pool(name)),
                      "images": sum(len(v) for v in split.pool(name).values())}
               for name in ("train", "val", "test")}}
        C.write_snapshot(cfg, root)
    if args.task in ("search", "all"):
        root = base / "search" if base else Path(cfg["data"]["search"]["root"])
        spec = C.scene_spec(cfg)
        out = gen_search_scenes(spec, root)
        summary["search"] = {"root": str(root), "train_scenes": len(out["train"]),
                             "test_scenes": len(out["test"]), "queries": len(out["protocol"]),
                             "hue_share_fraction": round(hue_share_fraction(out["test"],
                                                                            make_identities(spec)), 4)}
        C.write_snapshot(cfg, root)
    print(json.dumps(summary, indent=1))
    return 0


# ---------------------------------------------------------------- few-shot


def fewshot_data(cfg):
    cub = cfg["data"]["cub"]
    if cub["root"]:
        return ingest_cub(cub["root"], cub["split_file"]), ImageStore(cub["root"], cub["image_size"])
    root = Path(cfg["data"]["finegrained"]["root"])
    if not (root / "train.json").exists():
        raise FileNotFoundError(f"no fine-grained dataset at {root}; run `qgn gen-data` first")
    size = cfg["data"]["finegrained"]["image_size"]
    return load_split(root), ImageStore(root, size)


def build_fewshot(cfg, num_ids: int) -> FewShotQGN:
    torch.manual_seed(cfg["seed"])
    return FewShotQGN(C.fewshot_model_config(cfg), num_ids, seed=cfg["seed"])


def cmd_train_fewshot(args) -> int:
    cfg = resolve(args)
    out = _out(args, "runs/fewshot")
    _setup_logging(out)
    C.write_snapshot(cfg, out)
    split, store = fewshot_data(cfg)
    if args.resume:
        model, payload = load_model(args.resume, lambda p: build_fewshot(p["config"], p["num_ids"]))
    else:
        model = build_fewshot(cfg, len(split.train))
    trainer = FewShotTrainer(model, split, store, C.fewshot_train_config(cfg))
    if args.resume:
        trainer.load_state_dict(payload["trainer"])
    ckpt = out / "checkpoint.pt"
    every = cfg["train"]["fewshot"]["checkpoint_every"]

    def on_epoch_end(epoch):
        if every and epoch % every == 0:
            save_checkpoint(out / f"checkpoint_epoch{epoch:04d}.pt", model, cfg, trainer.state_dict())

    records = trainer.fit(out / "train_log.jsonl", on_epoch_end, args.max_steps)
    save_checkpoint(ckpt, model, cfg, trainer.state_dict())
    if records:
        plot_losses(records, ("loss", "oim", "sim", "rot"), out / "losses.png")
    print(json.dumps({"checkpoint": str(ckpt), "steps": trainer.step,
                      "final_loss": records[-1]["loss"] if records else None}))
    return 0


def eval_fewshot(model: FewShotQGN, cfg, out: Path, combos) -> list[dict]:
    split, store = fewshot_data(cfg)
    ev_cfg = cfg["eval"]["fewshot"]
    pool = split.pool(ev_cfg["split"])
    built = {"qsse": model.config.use_qsse, "qsimnet": model.config.use_qsimnet}
    rows = []
    for combo in combos:
        model.qsse_enabled = built["qsse"] and combo["qsse"]
        model.qsimnet_enabled = built["qsimnet"] and combo["qsimnet"]
        scorer = EpisodeEvaluator(model, store, ev_cfg["batch_size"])
        for k in ev_cfg["shots"]:
            res = evaluate_protocol(scorer, pool, ev_cfg["episodes"], ev_cfg["c_novel"], k,
                                    ev_cfg["l"], ev_cfg["seed"])
            rows.append({"config": combo_label(combo), **res.to_dict()})
            log.info("%s %d-shot %.4f +- %.4f", combo_label(combo), k, res.mean, res.ci95)
    write_csv(rows, out / "eval_fewshot.csv")
    plot_accuracy(rows, out / "eval_fewshot.png")
    return rows


# ------------------------------------------------------------------ search


def search_data(cfg):
    root = Path(cfg["data"]["search"]["root"])
    if not (root / "protocol.json").exists():
        raise FileNotFoundError(f"no search dataset at {root}; run `qgn gen-data` first")
    return root, ImageStore(root)


def build_search(cfg, num_ids: int) -> SearchQGN:
    torch.manual_seed(cfg["seed"])
    return SearchQGN(C.search_model_config(cfg), num_ids, seed=cfg["seed"])


def cmd_train_search(args) -> int:
    cfg = resolve(args)
    out = _out(args, "runs/search")
    _setup_logging(out)
    C.write_snapshot(cfg, out)
    root, store = search_data(cfg)
    scenes = load_scenes(root, "train")
    num_ids = len({p for s in scenes for _, p in s.persons if p >= 0})
    if args.resume:
        model, payload = load_model(args.resume, lambda p: build_search(p["config"], p["num_ids"]))
    else:
        model = build_search(cfg, num_ids)
    trainer = SearchTrainer(model, scenes, store, C.search_train_config(cfg))
    if args.resume:
        trainer.load_state_dict(payload["trainer"])
    every = cfg["train"]["search"]["checkpoint_every"]

    def on_epoch_end(epoch):
        if every and epoch % every == 0:
            save_checkpoint(out / f"checkpoint_epoch{epoch:04d}.pt", model, cfg, trainer.state_dict())

    records = trainer.fit(out / "train_log.jsonl", on_epoch_end, args.max_steps)
    ckpt = save_checkpoint(out / "checkpoint.pt", model, cfg, trainer.state_dict())
    if records:
        plot_losses(records, ("loss", "cls", "reg", "rpn_o", "rpn_r", "oim", "qrpn", "sim"),
                    out / "losses.png")
    print(json.dumps({"checkpoint": str(ckpt), "steps": trainer.step,
                      "final_loss": records[-1]["loss"] if records else None}))
    return 0


def eval_search(model: SearchQGN, cfg, out: Path, combos) -> dict:
    root, store = search_data(cfg)
    scenes = load_scenes(root, "test")
    protocol = load_protocol(root)
    built = {"qsse": model.config.use_qsse, "qrpn": model.config.use_qrpn,
             "qsimnet": model.config.use_qsimnet}
    ev = SearchEvaluator(model, scenes, protocol, store, C.search_eval_config(cfg))
    rows = []
    for combo in combos:
        model.qsse_enabled = built["qsse"] and combo["qsse"]
        model.qrpn_enabled = built["qrpn"] and combo["qrpn"]
        model.qsimnet_enabled = built["qsimnet"] and combo["qsimnet"]
        m = ev.evaluate()
        rows.append({"config": combo_label(combo), **m})
        log.info("%s mAP %.4f top1 %.4f", combo_label(combo), m["mAP"], m["top1"])
    write_csv(rows, out / "eval_search.csv")
    model.qsse_enabled = built["qsse"]
    counts = {}
    if built["qrpn"]:
        counts = ev.proposal_counts()
        write_csv(count_rows(counts), out / "proposal_counts.csv")
        plot_proposal_counts(counts, out / "proposal_counts.png")
    return {"rows": rows, "proposal_counts": {m: {str(n): v for n, v in c.items()}
                                              for m, c in counts.items()}}


# -------------------------------------------------------------------- eval


def cmd_eval(args) -> int:
    cfg = resolve(args)
    out = _out(args, "runs/eval")
    _setup_logging(out)
    C.write_snapshot(cfg, out)
    header = read_checkpoint(args.checkpoint)
    kind = header["kind"]
    run_cfg = header["config"]
    # data and eval sections come from the current config, the model from the checkpoint
    run_cfg = {**run_cfg, "data": cfg["data"], "eval": cfg["eval"]}
    requested = {k: v for k, v in _requested(cfg).items() if k in COMPONENTS[kind]}
    builder = build_fewshot if kind == "fewshot" else build_search
    section = cfg["model"][kind]
    expected = {"kind": kind, "arch": section["arch"], "embed_dim": section["embed_dim"],
                "components": requested}
    model, _ = load_model(args.checkpoint, lambda p: builder(p["config"], p["num_ids"]), expected)
    built = {k: header["components"][k] for k in COMPONENTS[kind]}
    if args.ablation_grid:
        combos = ablation_combos(COMPONENTS[kind])
    else:
        combos = [{k: built[k] and requested.get(k, True) for k in COMPONENTS[kind]}]
    if kind == "fewshot":
        rows = eval_fewshot(model, run_cfg, out, combos)
        result = {"kind": kind, "rows": rows}
    else:
        result = {"kind": kind, **eval_search(model, run_cfg, out, combos)}
    result["built_components"] = built
    (out / "metrics.json").write_text(json.dumps(result, indent=1, sort_keys=True) + "\n")
    print(json.dumps(result, indent=1, sort_keys=True))
    return 0


# ------------------------------------------------------------------ report


def cmd_report(args) -> int:
    out = _out(args, "runs/report")
    fewshot, search, counts = [], [], []
    for run in args.runs:
        run = Path(run)
        path = run / "metrics.json"
        if not path.exists():
            print(f"warning: {path} missing, skipped", file=sys.stderr)
            continue
        m = json.loads(path.read_text())
        for r in m["rows"]:
            (fewshot if m["kind"] == "fewshot" else search).append({"run": run.name, **r})
        for mode, per_n in m.get("proposal_counts", {}).items():
            counts += [{"run": run.name, "proposals": mode, "N": int(n), "mean_query_specific": v}
                       for n, v in per_n.items()]
        log_path = run / "train_log.jsonl"
        if log_path.exists():
            recs = read_jsonl(log_path)
            terms = [k for k in recs[0] if k not in ("step", "epoch", "phase", "lr", "time", "flags")]
            plot_losses(recs, terms, out / f"{run.name}_losses.png")
    if fewshot:
        write_csv(fewshot, out / "fewshot.csv")
        plot_accuracy([{**r, "config": f"{r['run']}:{r['config']}"} for r in fewshot],
                      out / "fewshot.png")
    if search:
        write_csv(search, out / "search.csv")
    if counts:
        write_csv(counts, out / "proposal_counts.csv")
        for run in sorted({c["run"] for c in counts}):
            per = {}
            for c in counts:
                if c["run"] == run:
                    per.setdefault(c["proposals"], {})[c["N"]] = c["mean_query_specific"]
            plot_proposal_counts(per, out / f"{run}_proposal_counts.png")
    print(json.dumps({"fewshot_rows": len(fewshot), "search_rows": len(search),
                      "count_rows": len(counts), "out": str(out)}))
    return 0


# -------------------------------------------------------------------- main


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="qgn", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", type=Path, help="YAML config with full-depth keys")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", type=str, help="output directory")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override one config key, e.g. train.fewshot.epochs=2")
        for name in ("qsse", "qrpn", "qsimnet"):
            sp.add_argument(f"--no-{name}", action="store_true", help=f"disable {name.upper()}")
        return sp

    g = common(sub.add_parser("gen-data", help="render synthetic datasets"))
    g.add_argument("--task", choices=("fewshot", "search", "all"), default="all")
    g.set_defaults(func=cmd_gen_data)

    for name, func in (("train-fewshot", cmd_train_fewshot), ("train-search", cmd_train_search)):
        t = common(sub.add_parser(name))
        t.add_argument("--resume", type=Path, help="checkpoint to continue from")
        t.add_argument("--max-steps", type=int, help="stop after this many optimizer steps")
        t.set_defaults(func=func)

    e = common(sub.add_parser("eval", help="evaluate a checkpoint"))
    e.add_argument("--checkpoint", type=Path, required=True)
    e.add_argument("--ablation-grid", action="store_true",
                   help="evaluate every on/off combination of the task's components")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("report", help="collect metrics of finished runs into tables and plots")
    r.add_argument("runs", nargs="+", help="run directories holding metrics.json")
    r.add_argument("--out", type=str)
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (C.ConfigError, FileNotFoundError, CheckpointMismatch) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
