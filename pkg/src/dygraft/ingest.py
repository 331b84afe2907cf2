"""Dataset files, time-based splits, edge categories and synthetic data."""
from __future__ import annotations

import csv
import enum
import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from .store import (
    ACADEMIC_SCHEMA,
    GraphStore,
    NodeKind,
    NodeRecord,
    Quadruplet,
    StoreError,
    build_store,
)

NODE_COLUMNS = ("id", "kind", "country", "name", "sector")
EDGE_COLUMNS = ("head_id", "relation", "tail_id", "time")


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class SplitSpec:
    train_end: int
    valid_end: int
    test_end: int

    def __post_init__(self):
        if not self.train_end < self.valid_end < self.test_end:
            raise DatasetError(
                f"split boundaries must satisfy train_end < valid_end < test_end, got {self}"
            )

    def bounds(self, part: str) -> tuple[int, int]:
        """Inclusive ``(first, last)`` timestamps of a split part."""
        if part == "train":
            return 0, self.train_end
        if part == "valid":
            return self.train_end + 1, self.valid_end
        if part == "test":
            return self.valid_end + 1, self.test_end
        raise ValueError(f"unknown split part {part!r}")

    def part_of(self, t: int) -> str:
        if t <= self.train_end:
            return "train"
        if t <= self.valid_end:
            return "valid"
        return "test"

    @classmethod
    def from_mapping(cls, cfg: Mapping[str, Any]) -> "SplitSpec":
        try:
            return cls(int(cfg["train_end"]), int(cfg["valid_end"]), int(cfg["test_end"]))
        except KeyError as exc:
            raise DatasetError(f"split config missing {exc.args[0]!r}") from None

    def to_dict(self) -> dict[str, int]:
        return {"train_end": self.train_end, "valid_end": self.valid_end, "test_end": self.test_end}


def part_mask(store: GraphStore, split: SplitSpec, part: str) -> np.ndarray:
    lo, hi = split.bounds(part)
    return (store.times >= lo) & (store.times <= hi)


def validate_split(store: GraphStore, split: SplitSpec) -> None:
    rng = store.time_range
    if rng is None:
        return
    lo, hi = rng
    if hi > split.test_end:
        raise DatasetError(f"events at time {hi} fall after test_end={split.test_end}")
    if split.train_end < lo:
        raise DatasetError(f"train_end={split.train_end} precedes the first event time {lo}")


class EdgeCategory(str, enum.Enum):
    TRANSDUCTIVE_REPEATED = "TransductiveRepeated"
    SEMI_TRANSDUCTIVE_FIRST_TIME = "SemiTransductiveFirstTime"
    INDUCTIVE = "Inductive"


# -- file io -----------------------------------------------------------------

def _read_tsv(path: Path, required: tuple[str, ...]) -> tuple[list[str], list[tuple[int, list[str]]]]:
    with open(path, encoding="utf-8", newline="") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise DatasetError(f"{path}: empty file, header row required")
    header = lines[0].split("\t")
    missing = [c for c in required if c not in header]
    if missing:
        raise DatasetError(f"{path}: line 1: header missing columns {missing}")
    rows = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        fields = line.split("\t")
        if len(fields) != len(header):
            raise DatasetError(f"{path}: line {lineno}: expected {len(header)} fields, got {len(fields)}")
        rows.append((lineno, fields))
    return header, rows


def read_nodes(path: str | os.PathLike) -> list[NodeRecord]:
    path = Path(path)
    header, rows = _read_tsv(path, NODE_COLUMNS)
    col = {name: i for i, name in enumerate(header)}
    records = []
    for lineno, fields in rows:
        try:
            nid = int(fields[col["id"]])
            kind = NodeKind.parse(fields[col["kind"]])
        except ValueError as exc:
            raise DatasetError(f"{path}: line {lineno}: {exc}") from None
        meta = {name: fields[i] for name, i in col.items() if name not in ("id", "kind")}
        records.append((lineno, NodeRecord(nid, kind, meta)))
    records.sort(key=lambda r: r[1].id)
    for pos, (lineno, rec) in enumerate(records):
        if rec.id != pos:
            raise DatasetError(f"{path}: line {lineno}: node ids must be unique and contiguous from 0 (saw {rec.id})")
    return [rec for _, rec in records]


def read_edges(path: str | os.PathLike, schema=ACADEMIC_SCHEMA) -> list[tuple[int, Quadruplet]]:
    path = Path(path)
    header, rows = _read_tsv(path, EDGE_COLUMNS)
    col = {name: i for i, name in enumerate(header)}
    base_names = {r.name: i for i, r in enumerate(schema.base)}
    out = []
    for lineno, fields in rows:
        rel_name = fields[col["relation"]].strip()
        if rel_name not in base_names:
            raise DatasetError(f"{path}: line {lineno}: unknown relation {rel_name!r}")
        try:
            q = Quadruplet(
                int(fields[col["head_id"]]),
                base_names[rel_name],
                int(fields[col["tail_id"]]),
                int(fields[col["time"]]),
            )
        except ValueError as exc:
            raise DatasetError(f"{path}: line {lineno}: {exc}") from None
        if q.time < 0:
            raise DatasetError(f"{path}: line {lineno}: negative time {q.time}")
        out.append((lineno, q))
    return out


def write_nodes(path: str | os.PathLike, nodes: list[NodeRecord]) -> None:
    extra = sorted({k for n in nodes for k in n.metadata} - set(NODE_COLUMNS))
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(list(NODE_COLUMNS) + extra)
        for n in nodes:
            w.writerow([n.id, n.kind.name.lower()] + [n.metadata.get(c, "") for c in NODE_COLUMNS[2:]]
                       + [n.metadata.get(c, "") for c in extra])


def write_edges(path: str | os.PathLike, events: list[Quadruplet], schema=ACADEMIC_SCHEMA) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(EDGE_COLUMNS)
        for q in events:
            w.writerow([q.head, schema[q.relation].name, q.tail, q.time])


def load_config(config: str | os.PathLike | Mapping[str, Any]) -> dict[str, Any]:
    if isinstance(config, Mapping):
        return dict(config)
    with open(config, encoding="utf-8") as fh:
        return json.load(fh)


def load_dataset(
    edge_file: str | os.PathLike,
    node_file: str | os.PathLike,
    config: str | os.PathLike | Mapping[str, Any],
) -> tuple[GraphStore, SplitSpec]:
    """Read node and edge TSV files and the split boundaries from ``config``."""
    cfg = load_config(config)
    if "splits" not in cfg:
        raise DatasetError("config has no 'splits' block")
    split = SplitSpec.from_mapping(cfg["splits"])
    nodes = read_nodes(node_file)
    edges = read_edges(edge_file)
    try:
        store = build_store(nodes, [q for _, q in edges])
    except StoreError:
        # re-run per line to name the offending one
        for lineno, q in edges:
            try:
                build_store(nodes, [q])
            except StoreError as exc:
                raise DatasetError(f"{edge_file}: line {lineno}: {exc}") from None
        raise
    validate_split(store, split)
    return store, split


def dataset_report(store: GraphStore, split: SplitSpec) -> dict[str, Any]:
    """Per-split counts in the layout of a dataset characteristics table.

    Node counts are unique nodes active within the split, per kind.
    """
    out: dict[str, Any] = {"n_nodes": store.n_nodes, "n_events": len(store),
                           "n_duplicates_dropped": store.n_duplicates, "splits": {}}
    for part in ("train", "valid", "test"):
        mask = part_mask(store, split, part)
        lo, hi = split.bounds(part)
        active = np.unique(np.concatenate([store.heads[mask], store.tails[mask]]))
        per_rel = {store.schema[r].name: int(np.sum(store.relations[mask] == r))
                   for r in range(store.schema.n_base)}
        out["splits"][part] = {
            "time_range": [lo, hi],
            "n_timesteps": int(len(np.unique(store.times[mask]))),
            "n_events": int(mask.sum()),
            "events_per_relation": per_rel,
            "active_nodes": {k.name.lower(): int(np.sum(store.kinds[active] == k)) for k in NodeKind},
        }
    return out


# -- labels ----------------------------------------------------------------

def categorize_edges(store: GraphStore, split: SplitSpec, part: str) -> dict[Quadruplet, EdgeCategory]:
    """Assign each evaluation edge to exactly one transductive/inductive category."""
    if part not in ("valid", "test"):
        raise ValueError("evaluation part must be 'valid' or 'test'")
    seen = store.first_seen <= split.train_end
    out = {}
    for i in np.flatnonzero(part_mask(store, split, part)):
        h, r, t = int(store.heads[i]), int(store.relations[i]), int(store.tails[i])
        q = Quadruplet(h, r, t, int(store.times[i]))
        if not (seen[h] and seen[t]):
            out[q] = EdgeCategory.INDUCTIVE
        else:
            times = store.pair_times(h, r).get(t, ())
            repeated = bool(times) and times[0] <= split.train_end
            out[q] = (EdgeCategory.TRANSDUCTIVE_REPEATED if repeated
                      else EdgeCategory.SEMI_TRANSDUCTIVE_FIRST_TIME)
    return out


@dataclass(frozen=True)
class AugmentationLabels:
    """Per-event flags aligned with the store's event order."""

    head_incumbent: np.ndarray
    tail_incumbent: np.ndarray
    tail_is_new_partner: np.ndarray
    tail_is_new_capability: np.ndarray

    def for_event(self, i: int) -> dict[str, bool]:
        return {
            "head_incumbent": bool(self.head_incumbent[i]),
            "tail_incumbent": bool(self.tail_incumbent[i]),
            "tail_is_new_partner": bool(self.tail_is_new_partner[i]),
            "tail_is_new_capability": bool(self.tail_is_new_capability[i]),
        }


def augment(store: GraphStore) -> AugmentationLabels:
    """Incumbent/newcomer and new/repeated pair labels for every event.

    A node is incumbent at ``t`` when it has an event strictly before ``t``.
    The pair flags are only set on partnership / expertise edges whose
    ``(head, tail)`` pair has no earlier event.
    """
    head_inc = store.first_seen[store.heads] < store.times
    tail_inc = store.first_seen[store.tails] < store.times
    new_pair = np.zeros(len(store), dtype=bool)
    for i, (h, r, t, tm) in enumerate(zip(store.heads.tolist(), store.relations.tolist(),
                                         store.tails.tolist(), store.times.tolist())):
        new_pair[i] = store.pair_times(h, r)[t][0] == tm
    names = [rel.name for rel in store.schema.base]
    partner = store.relations == names.index("partner") if "partner" in names else np.zeros(len(store), bool)
    expertise = store.relations == names.index("expertise") if "expertise" in names else np.zeros(len(store), bool)
    return AugmentationLabels(head_inc, tail_inc, new_pair & partner, new_pair & expertise)


# -- synthetic data --------------------------------------------------------

@dataclass(frozen=True)
class SyntheticConfig:
    n_scientists: int = 100
    n_institutions: int = 10
    n_capabilities: int = 20
    n_timesteps: int = 100
    clique_size: int = 5
    newcomer_rate: float = 0.0
    repeat_prob: float = 0.9
    seed: int = 0

    def __post_init__(self):
        for name in ("n_scientists", "n_institutions", "n_capabilities", "n_timesteps", "clique_size"):
            if getattr(self, name) < 1:
                raise DatasetError(f"{name} must be >= 1")
        if self.clique_size < 2 or self.clique_size > self.n_scientists:
            raise DatasetError("clique_size must be in [2, n_scientists]")
        for name in ("newcomer_rate", "repeat_prob"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise DatasetError(f"{name} must be in [0, 1]")

    @property
    def n_cliques(self) -> int:
        return self.n_scientists // self.clique_size


COUNTRIES = ("US", "CN", "UK", "DE", "FR", "JP", "IN", "CA")


def simulate(cfg: SyntheticConfig) -> tuple[list[NodeRecord], list[Quadruplet]]:
    """Simulate planted collaboration patterns.

    * cliques of incumbent scientists fire together at each step with
      probability ``repeat_prob`` (every clique fires at step 0);
    * at every later step each clique recruits a newcomer with probability
      ``newcomer_rate``; the newcomer collaborates with a mentor drawn from
      all incumbents in proportion to their number of distinct collaborators,
      and keeps collaborating with that mentor while a per-step
      ``repeat_prob`` coin keeps coming up heads;
    * scientists keep a fixed set of capabilities and partner with their
      clique's (or mentor's) institution whenever they are active.
    """
    rng = np.random.default_rng(cfg.seed)
    n_inc = cfg.n_cliques * cfg.clique_size
    cliques = [list(range(c * cfg.clique_size, (c + 1) * cfg.clique_size)) for c in range(cfg.n_cliques)]
    # scientist-local state; newcomers get appended
    institution = [c % cfg.n_institutions for c in range(cfg.n_cliques) for _ in range(cfg.clique_size)]
    country = []
    clique_country = rng.choice(len(COUNTRIES), size=cfg.n_cliques)
    for c in range(cfg.n_cliques):
        country.extend([int(clique_country[c])] * cfg.clique_size)
    capabilities = []
    for _ in range(n_inc):
        k = 1 + int(rng.random() < 0.5)
        capabilities.append(sorted(rng.choice(cfg.n_capabilities, size=min(k, cfg.n_capabilities), replace=False).tolist()))
    collaborators: list[set[int]] = [set() for _ in range(n_inc)]
    mentor_of: dict[int, int] = {}
    mentoring: set[int] = set()

    events: list[tuple[int, str, int, int]] = []  # (sci, relation, target, t); target id in its kind space

    def emit_activity(s: int, t: int):
        events.append((s, "partner", institution[s], t))
        for cap in capabilities[s]:
            events.append((s, "expertise", cap, t))

    for t in range(cfg.n_timesteps):
        active: set[int] = set()
        for clique in cliques:
            if t == 0 or rng.random() < cfg.repeat_prob:
                for i, a in enumerate(clique):
                    for b in clique[i + 1:]:
                        events.append((a, "collab", b, t))
                        collaborators[a].add(b)
                        collaborators[b].add(a)
                active.update(clique)
        for mentee in sorted(mentoring):
            if rng.random() < cfg.repeat_prob:
                events.append((mentee, "collab", mentor_of[mentee], t))
                active.add(mentee)
                active.add(mentor_of[mentee])
            else:
                mentoring.discard(mentee)
        if t > 0:
            incumbents = np.array(sorted(s for s in range(len(collaborators)) if collaborators[s]))
            for _ in cliques:
                if not rng.random() < cfg.newcomer_rate:
                    continue
                weights = np.array([len(collaborators[s]) for s in incumbents], dtype=float)
                mentor = int(rng.choice(incumbents, p=weights / weights.sum()))
                s = len(collaborators)
                collaborators.append({mentor})
                collaborators[mentor].add(s)
                institution.append(institution[mentor])
                country.append(country[mentor] if rng.random() < 0.7 else int(rng.integers(len(COUNTRIES))))
                capabilities.append([capabilities[mentor][0]])
                mentor_of[s] = mentor
                mentoring.add(s)
                events.append((s, "collab", mentor, t))
                active.update((s, mentor))
        for s in sorted(active):
            emit_activity(s, t)

    n_sci = len(collaborators)
    inst_offset = n_sci
    cap_offset = n_sci + cfg.n_institutions
    nodes = []
    for s in range(n_sci):
        nodes.append(NodeRecord(s, NodeKind.SCIENTIST, {
            "country": COUNTRIES[country[s]], "name": f"scientist_{s}", "sector": "academic"}))
    for i in range(cfg.n_institutions):
        sector = "academic" if rng.random() < 0.7 else "non-academic"
        nodes.append(NodeRecord(inst_offset + i, NodeKind.INSTITUTION, {
            "country": COUNTRIES[i % len(COUNTRIES)], "name": f"institution_{i}", "sector": sector}))
    for c in range(cfg.n_capabilities):
        nodes.append(NodeRecord(cap_offset + c, NodeKind.CAPABILITY, {
            "country": "", "name": f"capability_{c}", "sector": ""}))

    rel_id = {r.name: i for i, r in enumerate(ACADEMIC_SCHEMA.base)}
    offset = {"collab": 0, "partner": inst_offset, "expertise": cap_offset}
    quads = sorted({Quadruplet(h, rel_id[r], offset[r] + tgt, t) for h, r, tgt, t in events},
                   key=lambda q: (q.time, q.head, q.relation, q.tail))
    return nodes, quads


def default_splits(n_timesteps: int) -> SplitSpec:
    """70/15/15 split of the timestep range."""
    if n_timesteps < 3:
        raise DatasetError("need at least 3 timesteps to split")
    train_end = max(0, int(round(0.7 * n_timesteps)) - 1)
    valid_end = max(train_end + 1, int(round(0.85 * n_timesteps)) - 1)
    return SplitSpec(train_end, valid_end, max(valid_end + 1, n_timesteps - 1))


def generate_synthetic(cfg: SyntheticConfig | Mapping[str, Any], out_dir: str | os.PathLike) -> tuple[Path, Path]:
    """Write ``nodes.tsv`` and ``edges.tsv`` for ``cfg`` into ``out_dir``."""
    if not isinstance(cfg, SyntheticConfig):
        unknown = set(cfg) - set(SyntheticConfig.__dataclass_fields__)
        if unknown:
            raise DatasetError(f"unknown generator keys: {sorted(unknown)}")
        cfg = SyntheticConfig(**cfg)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    nodes, quads = simulate(cfg)
    node_file, edge_file = out / "nodes.tsv", out / "edges.tsv"
    write_nodes(node_file, nodes)
    write_edges(edge_file, quads)
    return node_file, edge_file
