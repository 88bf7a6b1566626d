import json

import numpy as np
import pytest
import yaml

from qgn import config as C
from qgn.checkpoint import CheckpointMismatch, check_compatible, read_checkpoint
from qgn.cli import COMPONENTS, ablation_combos, combo_label, main
from qgn.reports import read_csv, read_jsonl

FEWSHOT_DATA = ["data.finegrained.num_classes=12", "data.finegrained.images_per_class=20",
                "eval.fewshot.c_novel=3", "eval.fewshot.l=5", "eval.fewshot.episodes=4"]


def sets(*items):
    return [a for s in items for a in ("--set", s)]


@pytest.fixture(scope="module")
def fewshot_run(tmp_path_factory):
    base = tmp_path_factory.mktemp("cli")
    data = base / "fg"
    common = sets(*FEWSHOT_DATA, f"data.finegrained.root={data}")
    assert main(["gen-data", "--task", "fewshot", *common]) == 0
    run = base / "run"
    train = sets("train.fewshot.epochs=2", "train.fewshot.steps_per_epoch=20")
    assert main(["train-fewshot", *common, *train, "--out", str(run)]) == 0
    return base, common, train, run


class TestConfig:
    def test_defaults_match_reference_recipes(self):
        cfg = C.defaults()
        fs = cfg["train"]["fewshot"]
        assert (fs["optimizer"], fs["lr"], fs["batch_pairs"], fs["neg_ratio"], fs["epochs"]) == \
            ("adam", 1e-3, 8, 3, 120)
        ps = cfg["train"]["search"]
        assert (ps["optimizer"], ps["lr"], ps["epochs"], ps["lr_drop_fraction"], ps["min_side"]) == \
            ("sgd", 1e-3, 4, 0.5, 600)
        assert cfg["eval"]["fewshot"]["episodes"] == 600 and cfg["eval"]["fewshot"]["shots"] == [1, 5]
        assert C.validate(cfg) == []

    def test_precedence(self, tmp_path):
        path = tmp_path / "c.yaml"
        path.write_text(yaml.safe_dump({"seed": 3, "train": {"fewshot": {"lr": 0.01, "epochs": 7}}}))
        cfg = C.load_config(path, {"train.fewshot.lr": 0.02})
        assert cfg["seed"] == 3 and cfg["train"]["fewshot"]["epochs"] == 7
        assert cfg["train"]["fewshot"]["lr"] == 0.02

    def test_errors_are_enumerated(self, tmp_path):
        path = tmp_path / "bad.yaml"
        path.write_text(yaml.safe_dump({"train": {"fewshot": {"lrr": 1}}, "modle": {}}))
        with pytest.raises(C.ConfigError) as err:
            C.load_config(path)
        assert len(err.value.errors) == 2
        cfg = C.load_config(None, {"train.fewshot.lr": -1, "train.search.optimizer": "rmsprop",
                                   "eval.fewshot.episodes": 0})
        assert len(C.validate(cfg)) == 3
        with pytest.raises(C.ConfigError):
            C.load_config(None, {"train.nothing": 1})

    def test_parse_override(self):
        assert C.parse_override("a.b=3") == ("a.b", 3)
        assert C.parse_override("a.b=[1, 2]") == ("a.b", [1, 2])
        assert C.parse_override("a.b=null") == ("a.b", None)
        with pytest.raises(C.ConfigError):
            C.parse_override("a.b")

    def test_builders(self):
        cfg = C.load_config(None, {"model.search.roi": "align14", "model.search.gcat": True})
        m = C.search_model_config(cfg)
        assert m.roi == "align14" and m.gcat and m.backbone.detection_mode
        assert C.fewshot_model_config(cfg).backbone.gate_bias == 3.0


class TestAblation:
    def test_combination_counts(self):
        assert len(ablation_combos(COMPONENTS["search"])) == 8
        assert len(ablation_combos(COMPONENTS["fewshot"])) == 4
        labels = {combo_label(c) for c in ablation_combos(COMPONENTS["search"])}
        assert len(labels) == 8 and "baseline" in labels and "qsse+qrpn+qsimnet" in labels


class TestCli:
    def test_train_outputs(self, fewshot_run):
        _, _, _, run = fewshot_run
        for name in ("config.resolved.yaml", "train_log.jsonl", "checkpoint.pt", "losses.png", "run.log"):
            assert (run / name).exists(), name
        recs = read_jsonl(run / "train_log.jsonl")
        assert len(recs) == 40 and {"step", "loss", "oim", "sim", "rot", "lr"} <= set(recs[0])
        first = np.mean([r["loss"] for r in recs[:8]])
        last = np.mean([r["loss"] for r in recs[-8:]])
        assert last < first
        header = read_checkpoint(run / "checkpoint.pt")
        assert header["components"] == {"qsse": True, "qsimnet": True, "qrpn": False}
        assert header["arch"] == "tiny" and header["num_ids"] == 6

    def test_resume_reproduces_trajectory(self, fewshot_run, tmp_path):
        _, common, _, _ = fewshot_run
        train = sets("train.fewshot.epochs=2", "train.fewshot.steps_per_epoch=6",
                     "train.fewshot.checkpoint_every=1")
        full, part = tmp_path / "full", tmp_path / "part"
        assert main(["train-fewshot", *common, *train, "--out", str(full)]) == 0
        assert main(["train-fewshot", *common, *train, "--out", str(part),
                     "--resume", str(full / "checkpoint_epoch0001.pt")]) == 0
        a = [r["loss"] for r in read_jsonl(full / "train_log.jsonl")][6:]
        b = [r["loss"] for r in read_jsonl(part / "train_log.jsonl")]
        assert len(b) == 6 and np.allclose(a, b, rtol=0, atol=1e-6)

    def test_eval_and_report(self, fewshot_run, capsys):
        base, common, _, run = fewshot_run
        out = base / "eval"
        assert main(["eval", *common, "--checkpoint", str(run / "checkpoint.pt"),
                     "--out", str(out), "--ablation-grid"]) == 0
        metrics = json.loads((out / "metrics.json").read_text())
        assert metrics["kind"] == "fewshot" and len(metrics["rows"]) == 8  # 4 combos x 2 shots
        rows = read_csv(out / "eval_fewshot.csv")
        assert {r["k"] for r in rows} == {"1", "5"}
        assert all(0.0 <= float(r["mean_accuracy"]) <= 1.0 for r in rows)
        assert (out / "config.resolved.yaml").exists()
        rep = base / "report"
        assert main(["report", str(out), str(run), "--out", str(rep)]) == 0
        assert len(read_csv(rep / "fewshot.csv")) == 8

    def test_eval_repeatable(self, fewshot_run):
        base, common, _, run = fewshot_run
        results = []
        for name in ("r1", "r2"):
            assert main(["eval", *common, "--checkpoint", str(run / "checkpoint.pt"),
                         "--out", str(base / name)]) == 0
            results.append(json.loads((base / name / "metrics.json").read_text())["rows"])
        for a, b in zip(*results):
            assert abs(a["mean_accuracy"] - b["mean_accuracy"]) < 1e-6

    def test_mismatched_checkpoint_refused(self, fewshot_run, tmp_path, capsys):
        _, common, train, _ = fewshot_run
        plain = tmp_path / "plain"
        assert main(["train-fewshot", *common, *sets("train.fewshot.epochs=1",
                                                      "train.fewshot.steps_per_epoch=2"),
                     "--no-qsse", "--out", str(plain)]) == 0
        ckpt = str(plain / "checkpoint.pt")
        assert main(["eval", *common, "--checkpoint", ckpt, "--out", str(tmp_path / "e")]) == 2
        assert "qsse requested but absent" in capsys.readouterr().err
        assert main(["eval", *common, "--checkpoint", ckpt, "--no-qsse",
                     "--out", str(tmp_path / "e")]) == 0
        assert main(["eval", *common, *sets("model.fewshot.arch=resnet10"), "--no-qsse",
                     "--checkpoint", ckpt, "--out", str(tmp_path / "e")]) == 2

    def test_missing_data_and_bad_config(self, tmp_path, capsys):
        assert main(["train-fewshot", *sets(f"data.finegrained.root={tmp_path / 'none'}"),
                     "--out", str(tmp_path / "x")]) == 2
        assert main(["train-fewshot", *sets("train.fewshot.lr=-1"), "--out", str(tmp_path / "y")]) == 2
        assert "train.lr must be positive" in capsys.readouterr().err

    def test_foreign_file_refused(self, tmp_path):
        import torch
        torch.save({"weights": 1}, tmp_path / "x.pt")
        with pytest.raises(CheckpointMismatch):
            read_checkpoint(tmp_path / "x.pt")
        with pytest.raises(CheckpointMismatch):
            check_compatible({"kind": "search", "arch": "tiny", "embed_dim": 64, "components": {}},
                             {"kind": "fewshot"})
