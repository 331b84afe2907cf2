import csv
import json
import shutil
import time
from pathlib import Path

import jsonschema
import numpy as np
import pytest
import torch

from dygraft import cli
from dygraft.cli import main, report_schema
from dygraft.evaluation import build_queries
from dygraft.ingest import load_dataset
from dygraft.training import subsystem_seed

FIXTURES = Path(__file__).parent / "fixtures"


@pytest.fixture
def workdir(tmp_path):
    for name in ("nodes.tsv", "edges.tsv", "dgt_d.json", "dgt_c.json"):
        shutil.copy(FIXTURES / name, tmp_path / name)
    return tmp_path


def edit_config(path, **changes):
    cfg = json.loads(path.read_text())
    for dotted, value in changes.items():
        node = cfg
        *parents, leaf = dotted.split("__")
        for p in parents:
            node = node.setdefault(p, {})
        node[leaf] = value
    out = path.with_name(path.stem + "_edited.json")
    out.write_text(json.dumps(cfg))
    return out


def read_tsv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh, delimiter="\t"))


class TestGenerate:
    def test_generate_deterministic(self, tmp_path):
        cfg = tmp_path / "g.json"
        cfg.write_text(json.dumps({"seed": 2, "generator": {"n_scientists": 10, "n_timesteps": 6, "clique_size": 5}}))
        assert main(["generate", "--config", str(cfg), "--out", str(tmp_path / "a")]) == 0
        assert main(["generate", "--config", str(cfg), "--out", str(tmp_path / "b")]) == 0
        for f in ("nodes.tsv", "edges.tsv"):
            assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
        assert main(["generate", "--config", str(cfg), "--out", str(tmp_path / "c"), "--seed", "3"]) == 0
        assert (tmp_path / "c" / "edges.tsv").read_bytes() != (tmp_path / "a" / "edges.tsv").read_bytes()

    def test_generate_into_dataset_paths(self, tmp_path):
        cfg = tmp_path / "g.json"
        cfg.write_text(json.dumps({"generator": {"n_scientists": 10, "n_timesteps": 6, "clique_size": 5},
                                   "dataset": {"nodes": "d/my_nodes.tsv", "edges": "d/my_edges.tsv"}}))
        assert main(["generate", "--config", str(cfg)]) == 0
        assert (tmp_path / "d" / "my_nodes.tsv").exists() and (tmp_path / "d" / "my_edges.tsv").exists()

    @pytest.mark.parametrize("bad", [
        {"generator": {"repeat_prob": 2.0}},
        {"generator": {"n_people": 3}},
        {"genrator": {}},
        {},
    ])
    def test_invalid_config(self, tmp_path, bad, capsys):
        cfg = tmp_path / "g.json"
        cfg.write_text(json.dumps(bad))
        assert main(["generate", "--config", str(cfg), "--out", str(tmp_path)]) == 2
        assert "error" in capsys.readouterr().err


class TestUsage:
    def test_missing_config_file(self, tmp_path):
        assert main(["train", "--config", str(tmp_path / "none.json")]) == 2

    def test_bad_json(self, tmp_path):
        p = tmp_path / "x.json"
        p.write_text("{")
        assert main(["ingest", "--config", str(p)]) == 2

    def test_unknown_subcommand(self):
        assert main(["fly"]) == 2

    def test_unknown_model_param(self, workdir):
        cfg = edit_config(workdir / "dgt_d.json", model__params__width=3)
        assert main(["train", "--config", str(cfg)]) == 2

    def test_seed_in_optim_block(self, workdir):
        cfg = edit_config(workdir / "dgt_d.json", optim__seed=3)
        assert main(["train", "--config", str(cfg)]) == 2

    def test_missing_dataset(self, workdir):
        cfg = edit_config(workdir / "dgt_d.json", dataset__edges="nowhere.tsv")
        assert main(["train", "--config", str(cfg)]) == 2

    def test_runtime_failure(self, workdir, monkeypatch):
        def boom(*a, **k):
            raise RuntimeError("disk on fire")

        monkeypatch.setattr(cli, "train_discrete", boom)
        assert main(["train", "--config", str(workdir / "dgt_d.json")]) == 1

    def test_thread_cap(self, workdir, monkeypatch):
        before = torch.get_num_threads()
        monkeypatch.setenv("DYGRAFT_THREADS", "1")
        try:
            assert main(["ingest", "--config", str(workdir / "dgt_d.json")]) == 0
            assert torch.get_num_threads() == 1
        finally:
            torch.set_num_threads(before)


class TestIngest:
    def test_report(self, workdir):
        assert main(["ingest", "--config", str(workdir / "dgt_d.json")]) == 0
        rep = json.loads((workdir / "run_dgt_d" / "dataset_report.json").read_text())
        assert rep["n_events"] == 50
        assert sum(rep["splits"][p]["n_events"] for p in ("train", "valid", "test")) == 50

    def test_default_split(self, workdir):
        cfg = edit_config(workdir / "dgt_d.json", dataset__splits=None)
        assert main(["ingest", "--config", str(cfg)]) == 0
        rep = json.loads((workdir / "run_dgt_d" / "dataset_report.json").read_text())
        assert rep["splits_used"] == {"train_end": 5, "valid_end": 6, "test_end": 7}


@pytest.mark.parametrize("kind", ["dgt_d", "dgt_c"])
class TestTrainEvaluateForecast:
    def test_train_smoke_and_resume(self, workdir, kind):
        cfg = workdir / f"{kind}.json"
        start = time.perf_counter()
        assert main(["train", "--config", str(cfg)]) == 0
        assert time.perf_counter() - start < 60
        out = workdir / f"run_{kind}"
        first = [float(r["loss"]) for r in read_tsv(out / "loss_curve.tsv")]
        assert len(first) == 4 and all(np.isfinite(first))
        assert (out / "loss_curve.png").stat().st_size > 0

        longer = edit_config(cfg, optim__epochs=8)
        shutil.copy(out / "checkpoint.pt", workdir / "resume.pt")
        assert main(["train", "--config", str(longer), "--checkpoint", str(workdir / "resume.pt")]) == 0
        resumed = [float(r["loss"]) for r in read_tsv(out / "loss_curve.tsv")]
        assert resumed[:4] == first
        assert len(resumed) == 8
        straight = edit_config(cfg, optim__epochs=8, out="straight")
        assert main(["train", "--config", str(straight)]) == 0
        reference = [float(r["loss"]) for r in read_tsv(workdir / "straight" / "loss_curve.tsv")]
        # resuming must not jump away from the uninterrupted trajectory
        assert abs(resumed[4] - reference[4]) / reference[4] <= 0.10
        assert resumed == pytest.approx(reference, rel=1e-6)

    def test_mismatched_checkpoint(self, workdir, kind):
        cfg = workdir / f"{kind}.json"
        assert main(["train", "--config", str(cfg)]) == 0
        ckpt = str(workdir / f"run_{kind}" / "checkpoint.pt")
        key = "model__params__n_heads"
        assert main(["evaluate", "--config", str(edit_config(cfg, **{key: 4})), "--checkpoint", ckpt]) == 2
        other = "dgt_c" if kind == "dgt_d" else "dgt_d"
        assert main(["evaluate", "--config", str(workdir / f"{other}.json"), "--checkpoint", ckpt]) == 2

    def test_evaluate_and_forecast(self, workdir, kind):
        cfg = workdir / f"{kind}.json"
        out = workdir / f"run_{kind}"
        assert main(["train", "--config", str(cfg)]) == 0
        ckpt = str(out / "checkpoint.pt")
        assert main(["evaluate", "--config", str(cfg), "--checkpoint", ckpt]) == 0
        metrics = json.loads((out / "metrics.json").read_text())
        jsonschema.validate(metrics, report_schema())
        results = read_tsv(out / "results.tsv")
        assert metrics["overall"]["count"] == len(results)

        # forecast over every candidate so its top-1 can be compared with evaluation
        wide = edit_config(cfg, forecast__top_k=1000)
        assert main(["forecast", "--config", str(wide), "--checkpoint", ckpt, "--horizon", "1"]) == 0
        fc = read_tsv(out / "forecast.tsv")
        scores = {}
        for r in fc:
            scores[(int(r["head"]), r["relation"], int(r["tail"]))] = float(r["score"])
        store, split = load_dataset(workdir / "edges.tsv", workdir / "nodes.tsv",
                                    json.loads(cfg.read_text())["dataset"])
        queries = build_queries(store, split, "test", subsystem_seed(0, "eval.negatives"))
        t0 = split.valid_end + 1
        checked = 0
        for q, r in zip(queries, results):
            assert int(r["query_id"]) == q.query_id
            if q.t != t0 or q.direction != "predict_tail":
                continue
            name = store.schema[q.relation].name
            cand_scores = [scores[(q.known, name, int(c))] for c in q.candidates]
            assert int(q.candidates[int(np.argmax(cand_scores))]) == int(r["top1"])
            checked += 1
        assert checked > 0

    def test_forecast_sorted_and_empty(self, workdir, kind):
        cfg = workdir / f"{kind}.json"
        out = workdir / f"run_{kind}"
        assert main(["train", "--config", str(cfg)]) == 0
        ckpt = str(out / "checkpoint.pt")
        store, _ = load_dataset(workdir / "edges.tsv", workdir / "nodes.tsv",
                                json.loads(cfg.read_text())["dataset"])
        rel_id = {rel.name: i for i, rel in enumerate(store.schema)}
        for mode in ("teacher", "auto"):
            assert main(["forecast", "--config", str(cfg), "--checkpoint", ckpt, "--mode", mode]) == 0
            rows = read_tsv(out / "forecast.tsv")
            assert rows
            keys = [(int(r["t"]), int(r["head"]), rel_id[r["relation"]], -float(r["score"]), int(r["tail"]))
                    for r in rows]
            assert keys == sorted(keys)
            assert {int(r["t"]) for r in rows} <= {6, 7}
        assert main(["forecast", "--config", str(cfg), "--checkpoint", ckpt, "--horizon", "0"]) == 0
        assert read_tsv(out / "forecast.tsv") == []

    def test_forecast_needs_checkpoint(self, workdir, kind):
        assert main(["forecast", "--config", str(workdir / f"{kind}.json")]) == 2


class TestEvaluateBaselines:
    def test_oracle_plugin(self, workdir):
        cfg = edit_config(workdir / "dgt_d.json", eval__baseline="oracle")
        assert main(["evaluate", "--config", str(cfg)]) == 0
        metrics = json.loads((workdir / "run_dgt_d" / "metrics.json").read_text())
        assert metrics["overall"]["mrr"] == 1.0
        assert metrics["overall"]["hits@1"] == 1.0
        jsonschema.validate(metrics, report_schema())

    def test_country_groups_by_hand(self, workdir):
        cfg = edit_config(workdir / "dgt_d.json", eval__baseline="frequency")
        assert main(["evaluate", "--config", str(cfg)]) == 0
        out = workdir / "run_dgt_d"
        rows = read_tsv(out / "results.tsv")
        metrics = json.loads((out / "metrics.json").read_text())
        assert len(rows) <= 40
        by_pair = {}
        for r in rows:
            by_pair.setdefault(r["country_pair"], []).append(1.0 / float(r["rank"]))
        for pair, rr in by_pair.items():
            assert metrics["groups"]["country_pair"][pair]["mrr"] == pytest.approx(sum(rr) / len(rr), abs=1e-15)
            assert metrics["groups"]["country_pair"][pair]["count"] == len(rr)

    def test_evaluate_needs_checkpoint(self, workdir):
        assert main(["evaluate", "--config", str(workdir / "dgt_d.json")]) == 2


class TestReport:
    def _metrics(self, workdir, baseline, name):
        cfg = edit_config(workdir / "dgt_d.json", eval__baseline=baseline, out=name)
        assert main(["evaluate", "--config", str(cfg)]) == 0
        return workdir / name / "metrics.json"

    def test_single_input_equals_json(self, workdir, capsys):
        m = self._metrics(workdir, "frequency", "freq")
        assert main(["report", str(m), "--out", str(workdir / "rep")]) == 0
        data = json.loads(m.read_text())
        rows = list(csv.DictReader(open(workdir / "rep" / "report.csv")))
        for r in rows:
            want = data["overall"] if r["group"] == "overall" else data["groups"][r["group"]][r["value"]]
            assert float(r["freq"]) == want[r["metric"]]
        n_cells = len(data["overall"]) * (1 + sum(len(v) for v in data["groups"].values()))
        assert len(rows) == n_cells
        assert "overall" in capsys.readouterr().out
        assert (workdir / "rep" / "figures" / "category.png").stat().st_size > 0

    def test_two_runs_and_missing_cells(self, workdir):
        a = self._metrics(workdir, "frequency", "freq")
        b = self._metrics(workdir, "random", "rand")
        data = json.loads(b.read_text())
        data["groups"]["relation"].pop("collab")
        b.write_text(json.dumps(data))
        assert main(["report", str(a), str(b), "--out", str(workdir / "rep")]) == 0
        rows = list(csv.DictReader(open(workdir / "rep" / "report.csv")))
        assert set(rows[0]) == {"group", "value", "metric", "freq", "rand"}
        missing = [r for r in rows if r["group"] == "relation" and r["value"] == "collab"]
        assert missing and all(r["rand"] == "—" and r["freq"] != "—" for r in missing)
        assert "—" in (workdir / "rep" / "report.txt").read_text()

    def test_not_a_report(self, workdir):
        bad = workdir / "bad.json"
        bad.write_text(json.dumps({"overall": {}}))
        assert main(["report", str(bad), "--out", str(workdir / "rep")]) == 2
        assert main(["report", "--out", str(workdir / "rep")]) == 2
