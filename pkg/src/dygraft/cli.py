"""Command-line entry point: generate, ingest, train, evaluate, forecast, report.

Exit codes: 0 success, 1 runtime failure, 2 configuration or usage error.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from importlib import resources
from pathlib import Path
from typing import Any, Literal, Sequence

import jsonschema
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from . import __version__
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .continuous import ContinuousModelConfig, ContinuousScorer, rollout_continuous, train_continuous
from .discrete import DiscreteModelConfig, DiscreteScorer, rollout_discrete, train_discrete
from .evaluation import (
    DEFAULT_GROUP_KEYS,
    DEFAULT_KS,
    N_NEGATIVES,
    ConstantScorer,
    FrequencyScorer,
    MetricReport,
    OracleScorer,
    RandomScorer,
    RecencyScorer,
    build_queries,
    evaluate,
    write_results_tsv,
)
from .ingest import (
    DatasetError,
    SplitSpec,
    SyntheticConfig,
    augment,
    categorize_edges,
    dataset_report,
    default_splits,
    generate_synthetic,
    load_dataset,
    read_edges,
    read_nodes,
)
from .plotting import plot_group, plot_loss_curve
from .store import StoreError, build_store
from .training import ConfigError, OptimConfig, apply_thread_cap, config_from_mapping, subsystem_seed

log = logging.getLogger("dygraft")

MISSING = "—"
MODES = {"teacher": "teacher_forced", "auto": "autoregressive"}
BASELINES = {
    "frequency": lambda store, seed: FrequencyScorer(store),
    "recency": lambda store, seed: RecencyScorer(store),
    "random": lambda store, seed: RandomScorer(subsystem_seed(seed, "eval.random_scorer")),
    "constant": lambda store, seed: ConstantScorer(),
    "oracle": lambda store, seed: OracleScorer(),
}


class UsageError(Exception):
    """Bad flags, config or inputs: exit code 2."""


# -- run configuration ---------------------------------------------------------

class _Block(BaseModel):
    model_config = ConfigDict(extra="forbid")


class DatasetBlock(_Block):
    nodes: Path | None = None
    edges: Path | None = None
    splits: dict[str, int] | None = None


class ModelBlock(_Block):
    kind: Literal["dgt_d", "dgt_c"] = "dgt_d"
    params: dict[str, Any] = Field(default_factory=dict)


class EvalBlock(_Block):
    part: Literal["valid", "test"] = "test"
    ks: list[int] = Field(default_factory=lambda: list(DEFAULT_KS))
    group_keys: list[str] = Field(default_factory=lambda: list(DEFAULT_GROUP_KEYS))
    n_negatives: int = Field(N_NEGATIVES, ge=1)
    baseline: Literal["frequency", "recency", "random", "constant", "oracle"] | None = None


class ForecastBlock(_Block):
    from_t: int | None = None
    horizon: int = Field(1, ge=0)
    mode: Literal["teacher", "auto"] = "teacher"
    top_k: int = Field(10, ge=0)


class RunConfig(_Block):
    seed: int = 0
    out: Path = Path("runs")
    dataset: DatasetBlock = Field(default_factory=DatasetBlock)
    generator: dict[str, Any] | None = None
    model: ModelBlock = Field(default_factory=ModelBlock)
    optim: dict[str, Any] = Field(default_factory=dict)
    eval: EvalBlock = Field(default_factory=EvalBlock)
    forecast: ForecastBlock = Field(default_factory=ForecastBlock)

    def model_config_obj(self):
        cls = DiscreteModelConfig if self.model.kind == "dgt_d" else ContinuousModelConfig
        return config_from_mapping(cls, self.model.params)

    def optim_config(self) -> OptimConfig:
        if "seed" in self.optim:
            raise ConfigError("set the seed at the top level of the config, not in the optim block")
        return config_from_mapping(OptimConfig, {**self.optim, "seed": self.seed})

    def generator_config(self) -> SyntheticConfig:
        if self.generator is None:
            raise ConfigError("config has no 'generator' block")
        data = dict(self.generator)
        data.setdefault("seed", self.seed)
        return config_from_mapping(SyntheticConfig, data)


def load_run_config(path: str | None, overrides: argparse.Namespace) -> RunConfig:
    if path is None:
        raise UsageError("--config is required")
    cfg_path = Path(path)
    try:
        data = json.loads(cfg_path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise UsageError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: invalid JSON: {exc}") from None
    if getattr(overrides, "seed", None) is not None:
        data["seed"] = overrides.seed
    cfg = RunConfig.model_validate(data)
    base = cfg_path.resolve().parent

    def rel(p: Path | None) -> Path | None:
        return None if p is None or p.is_absolute() else base / p

    ds = cfg.dataset
    cfg.dataset = DatasetBlock(nodes=rel(ds.nodes) or ds.nodes, edges=rel(ds.edges) or ds.edges,
                               splits=ds.splits)
    out = Path(overrides.out) if getattr(overrides, "out", None) else (rel(cfg.out) or cfg.out)
    cfg.out = out
    # fail early on bad blocks, before any work
    cfg.model_config_obj()
    cfg.optim_config()
    if cfg.generator is not None:
        cfg.generator_config()
    return cfg


def _dataset(cfg: RunConfig):
    ds = cfg.dataset
    if ds.nodes is None or ds.edges is None:
        raise UsageError("config 'dataset' needs both 'nodes' and 'edges'")
    for p in (ds.nodes, ds.edges):
        if not p.exists():
            raise UsageError(f"dataset file not found: {p}")
    if ds.splits is not None:
        return load_dataset(ds.edges, ds.nodes, {"splits": ds.splits})
    # no explicit split: 70/15/15 over the observed time range
    store = build_store(read_nodes(ds.nodes), [q for _, q in read_edges(ds.edges)])
    if len(store) == 0:
        raise DatasetError("dataset has no events")
    split = default_splits(store.time_range[1] + 1)
    return load_dataset(ds.edges, ds.nodes, {"splits": split.to_dict()})


def _out_dir(cfg: RunConfig) -> Path:
    cfg.out.mkdir(parents=True, exist_ok=True)
    return cfg.out


# -- commands ------------------------------------------------------------------

def cmd_generate(cfg: RunConfig, args) -> int:
    gen = cfg.generator_config()
    if cfg.dataset.nodes is not None and cfg.dataset.edges is not None:
        out = cfg.dataset.edges.parent
        node_file, edge_file = generate_synthetic(gen, out)
        # honor custom file names
        if node_file != cfg.dataset.nodes:
            node_file.replace(cfg.dataset.nodes)
        if edge_file != cfg.dataset.edges:
            edge_file.replace(cfg.dataset.edges)
        node_file, edge_file = cfg.dataset.nodes, cfg.dataset.edges
    else:
        node_file, edge_file = generate_synthetic(gen, _out_dir(cfg))
    print(f"wrote {node_file} and {edge_file}")
    return 0


def cmd_ingest(cfg: RunConfig, args) -> int:
    store, split = _dataset(cfg)
    report = dataset_report(store, split)
    report["splits_used"] = split.to_dict()
    path = _out_dir(cfg) / "dataset_report.json"
    text = json.dumps(report, indent=2, sort_keys=True)
    path.write_text(text + "\n", encoding="utf-8")
    print(text)
    return 0


def _write_loss_curve(path: Path, losses: Sequence[float]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["epoch", "loss"])
        for i, loss in enumerate(losses, 1):
            w.writerow([i, repr(float(loss))])


def cmd_train(cfg: RunConfig, args) -> int:
    store, split = _dataset(cfg)
    kind = cfg.model.kind
    mcfg = cfg.model_config_obj()
    optim = cfg.optim_config()
    out = _out_dir(cfg)
    ckpt_path = out / "checkpoint.pt"
    resume = {}
    if args.checkpoint:
        ck = _load_ckpt(args.checkpoint, cfg)
        resume = dict(model=ck.build_model(store).train(), optimizer_state=ck.optimizer,
                      start_epoch=ck.epoch, loss_curve=ck.loss_curve)
        log.info("resuming %s from epoch %d", kind, ck.epoch)

    if kind == "dgt_d":
        def on_ckpt(epoch, model, opt, losses):
            save_checkpoint(ckpt_path, kind, model, optim, opt, epoch, losses, store=store)

        model, losses, opt = train_discrete(store, split, mcfg, optim, on_checkpoint=on_ckpt, **resume)
        memory = None
    else:
        def on_ckpt(epoch, model, opt, losses, memory):
            save_checkpoint(ckpt_path, kind, model, optim, opt, epoch, losses, memory, store)

        model, memory, losses, opt = train_continuous(store, split, mcfg, optim, on_checkpoint=on_ckpt, **resume)
    save_checkpoint(ckpt_path, kind, model, optim, opt, max(optim.epochs, resume.get("start_epoch", 0)),
                    losses, memory, store)
    _write_loss_curve(out / "loss_curve.tsv", losses)
    if losses:
        plot_loss_curve(losses, out / "loss_curve.png")
    print(f"trained {kind} for {len(losses)} epochs; final loss {losses[-1] if losses else float('nan'):.6f}")
    return 0


def _load_ckpt(path: str, cfg: RunConfig):
    if not Path(path).exists():
        raise UsageError(f"checkpoint not found: {path}")
    return load_checkpoint(path, cfg.model.kind, cfg.model_config_obj().to_dict())


def _scorer(cfg: RunConfig, args, store):
    if cfg.eval.baseline is not None:
        return BASELINES[cfg.eval.baseline](store, cfg.seed)
    if not args.checkpoint:
        raise UsageError("evaluate needs --checkpoint (or an eval.baseline in the config)")
    ck = _load_ckpt(args.checkpoint, cfg)
    model = ck.build_model(store)
    if ck.kind == "dgt_d":
        return DiscreteScorer(model, store)
    return ContinuousScorer(model, store, ck.node_memory())


def report_schema() -> dict[str, Any]:
    return json.loads(resources.files("dygraft").joinpath("report_schema.json").read_text(encoding="utf-8"))


def cmd_evaluate(cfg: RunConfig, args) -> int:
    store, split = _dataset(cfg)
    ev = cfg.eval
    scorer = _scorer(cfg, args, store)
    queries = build_queries(store, split, ev.part, subsystem_seed(cfg.seed, "eval.negatives"), ev.n_negatives)
    if not queries:
        raise DatasetError(f"no {ev.part} events to evaluate")
    categories = categorize_edges(store, split, ev.part)
    report, results = evaluate(scorer, queries, store, categories, augment(store), ev.group_keys, ev.ks)
    jsonschema.validate(report.to_dict(), report_schema())
    out = _out_dir(cfg)
    report.write(out / "metrics.json")
    write_results_tsv(out / "results.tsv", queries, results, ev.ks)
    o = report.overall
    print(f"{len(queries)} queries: MRR {o['mrr']:.4f} "
          + " ".join(f"hits@{k} {o[f'hits@{k}']:.4f}" for k in ev.ks))
    return 0


def cmd_forecast(cfg: RunConfig, args) -> int:
    store, split = _dataset(cfg)
    fc = cfg.forecast
    horizon = fc.horizon if args.horizon is None else args.horizon
    if horizon < 0:
        raise UsageError("--horizon must be >= 0")
    mode = MODES[args.mode or fc.mode]
    from_t = fc.from_t if fc.from_t is not None else split.bounds(cfg.eval.part)[0]
    if not args.checkpoint:
        raise UsageError("forecast needs --checkpoint")
    ck = _load_ckpt(args.checkpoint, cfg)
    model = ck.build_model(store)
    if horizon == 0:
        steps = []
    elif ck.kind == "dgt_d":
        steps = rollout_discrete(model, store, from_t, horizon, mode, fc.top_k)
    else:
        steps = rollout_continuous(model, ck.node_memory(), store, from_t, horizon, mode, fc.top_k)
    rows = [(s.t, h, r, tl, sc) for s in steps for h, r, tl, sc in s.edges]
    rows.sort(key=lambda x: (x[0], x[1], x[2], -x[4], x[3]))
    path = _out_dir(cfg) / "forecast.tsv"
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["t", "head", "relation", "tail", "score"])
        for t, h, r, tl, sc in rows:
            w.writerow([t, h, store.schema[r].name, tl, repr(sc)])
    print(f"wrote {len(rows)} predicted edges over {horizon} steps to {path}")
    return 0


def _run_names(paths: Sequence[Path]) -> list[str]:
    names = [p.parent.name if p.stem == "metrics" and p.parent.name else p.stem for p in paths]
    seen: dict[str, int] = {}
    out = []
    for n in names:
        seen[n] = seen.get(n, 0) + 1
        out.append(n if names.count(n) == 1 else f"{n}#{seen[n]}")
    return out


def comparison_rows(reports: dict[str, MetricReport]) -> tuple[list[str], list[list[Any]]]:
    """Rows ``[group_key, value, metric, run1, run2, ...]``; missing cells are ``None``."""
    runs = list(reports)
    metrics: list[str] = []
    for rep in reports.values():
        for m in rep.overall:
            if m not in metrics:
                metrics.append(m)
    keys: list[str] = []
    for rep in reports.values():
        for k in rep.groups:
            if k not in keys:
                keys.append(k)
    rows = []
    for m in metrics:
        rows.append(["overall", "", m] + [reports[r].overall.get(m) for r in runs])
    for k in keys:
        values = sorted({v for rep in reports.values() for v in rep.groups.get(k, {})})
        for v in values:
            for m in metrics:
                rows.append([k, v, m] + [reports[r].groups.get(k, {}).get(v, {}).get(m) for r in runs])
    return ["group", "value", "metric"] + runs, rows


def _cell(x: Any, precise: bool) -> str:
    if x is None:
        return MISSING
    if isinstance(x, float):
        return repr(x) if precise else f"{x:.4f}"
    return str(x)


def cmd_report(args) -> int:
    if not args.metrics:
        raise UsageError("report needs at least one metrics JSON file")
    paths = [Path(p) for p in args.metrics]
    reports = {}
    for name, p in zip(_run_names(paths), paths):
        try:
            data = json.loads(p.read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise UsageError(f"metrics file not found: {p}") from None
        except json.JSONDecodeError as exc:
            raise UsageError(f"{p}: invalid JSON: {exc}") from None
        try:
            jsonschema.validate(data, report_schema())
        except jsonschema.ValidationError as exc:
            raise UsageError(f"{p}: not a metric report: {exc.message}") from None
        reports[name] = MetricReport.from_dict(data)
    header, rows = comparison_rows(reports)
    out = Path(args.out or "report")
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "report.csv", "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_cell(x, True) for x in row])
    text_rows = [header] + [[_cell(x, False) for x in row] for row in rows]
    widths = [max(len(r[i]) for r in text_rows) for i in range(len(header))]
    lines = ["  ".join(c.ljust(wd) for c, wd in zip(r, widths)).rstrip() for r in text_rows]
    text = "\n".join(lines) + "\n"
    (out / "report.txt").write_text(text, encoding="utf-8")
    fig_dir = out / "figures"
    fig_dir.mkdir(exist_ok=True)
    keys = sorted({k for rep in reports.values() for k in rep.groups})
    for k in keys:
        plot_group(k, reports, fig_dir / f"{_safe(k)}.png")
    sys.stdout.write(text)
    return 0


def _safe(name: str) -> str:
    return "".join(c if c.isalnum() or c in "-_." else "_" for c in name)


# -- entry point ---------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dygraft", description="Dynamic graph transformers for edge forecasting.")
    p.add_argument("--version", action="version", version=f"dygraft {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, checkpoint=False):
        sp.add_argument("--config", required=True, help="run configuration (JSON)")
        sp.add_argument("--out", help="output directory (overrides the config)")
        sp.add_argument("--seed", type=int, help="run seed (overrides the config)")
        if checkpoint:
            sp.add_argument("--checkpoint", help="model checkpoint")
        return sp

    common(sub.add_parser("generate", help="write a synthetic dataset"))
    common(sub.add_parser("ingest", help="validate a dataset and report split statistics"))
    common(sub.add_parser("train", help="train a model (resume with --checkpoint)"), checkpoint=True)
    common(sub.add_parser("evaluate", help="ranking evaluation with grouped metrics"), checkpoint=True)
    fc = common(sub.add_parser("forecast", help="multi-step edge forecasts"), checkpoint=True)
    fc.add_argument("--horizon", type=int, help="number of future steps")
    fc.add_argument("--mode", choices=sorted(MODES), help="feed ground truth (teacher) or predictions (auto)")
    rp = sub.add_parser("report", help="compare metric reports across runs")
    rp.add_argument("metrics", nargs="*", help="metrics.json files")
    rp.add_argument("--out", help="output directory")
    return p


COMMANDS = {
    "generate": cmd_generate,
    "ingest": cmd_ingest,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "forecast": cmd_forecast,
}


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    apply_thread_cap()
    try:
        if args.command == "report":
            return cmd_report(args)
        cfg = load_run_config(args.config, args)
        return COMMANDS[args.command](cfg, args)
    except (UsageError, ConfigError, DatasetError, StoreError, CheckpointError, ValidationError) as exc:
        print(f"dygraft: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure
        log.debug("runtime failure", exc_info=True)
        print(f"dygraft: runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
