"""Filtered ranking evaluation with grouped MRR / Hits@K breakdowns."""
from __future__ import annotations

import csv
import json
import math
import os
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Any, Iterable, Mapping, Protocol, Sequence

import numpy as np

from .ingest import AugmentationLabels, EdgeCategory, SplitSpec, part_mask
from .store import GraphStore, Quadruplet

N_NEGATIVES = 200
DEFAULT_KS = (1, 3, 10)
DEFAULT_GROUP_KEYS = ("relation", "direction", "relation_direction", "category")

PREDICT_TAIL = "predict_tail"
PREDICT_HEAD = "predict_head"


class EvaluationError(RuntimeError):
    pass


@dataclass(frozen=True)
class RankingQuery:
    query_id: int
    known: int
    relation: int  # direction-resolved: inverse relation for head prediction
    direction: str
    t: int
    positive: int
    negatives: np.ndarray
    event: Quadruplet  # the base-form evaluation edge

    @property
    def candidates(self) -> np.ndarray:
        """Positive first, then negatives."""
        return np.concatenate([[self.positive], self.negatives]).astype(np.int64)

    @property
    def n_candidates(self) -> int:
        return 1 + len(self.negatives)


class Scorer(Protocol):
    """Anything that can score ranking queries with frozen state.

    ``score`` returns one array per query aligned with ``query.candidates``.
    """

    def score(self, queries: Sequence[RankingQuery]) -> list[np.ndarray]: ...


def negative_pool(store: GraphStore, known: int, relation: int, positive: int) -> np.ndarray:
    """Kind-compatible entities other than the positive (before filtering)."""
    pool = store.nodes_of_kind(store.tail_kind(relation))
    return pool[pool != positive]


def filtered_pool(store: GraphStore, known: int, relation: int, positive: int) -> np.ndarray:
    pool = negative_pool(store, known, relation, positive)
    banned = store.true_tails(known, relation)
    banned.add(known)
    if not banned:
        return pool
    return pool[~np.isin(pool, np.fromiter(banned, dtype=np.int64))]


def build_queries(
    store: GraphStore,
    split: SplitSpec,
    part: str,
    seed: int,
    n_negatives: int = N_NEGATIVES,
) -> list[RankingQuery]:
    """Tail- and head-prediction queries for every edge of an evaluation part.

    Negatives never form a true triple with ``(known, relation)`` in any
    split. When fewer than ``n_negatives`` filtered candidates exist, all of
    them are used.
    """
    if part not in ("valid", "test"):
        raise ValueError("part must be 'valid' or 'test'")
    rng = np.random.default_rng(seed)
    inv = store.schema.inverse
    queries = []
    for i in np.flatnonzero(part_mask(store, split, part)):
        q = Quadruplet(int(store.heads[i]), int(store.relations[i]), int(store.tails[i]), int(store.times[i]))
        for known, rel, direction, positive in (
            (q.head, q.relation, PREDICT_TAIL, q.tail),
            (q.tail, inv(q.relation), PREDICT_HEAD, q.head),
        ):
            pool = filtered_pool(store, known, rel, positive)
            if len(pool) > n_negatives:
                negs = rng.choice(pool, size=n_negatives, replace=False)
            else:
                negs = pool.copy()
            queries.append(RankingQuery(len(queries), known, rel, direction, q.time, positive, negs, q))
    return queries


def rank(scores: Sequence[float] | np.ndarray, positive_index: int = 0) -> float:
    """Tie-averaged rank of the positive: ties count half."""
    s = np.asarray(scores, dtype=np.float64)
    if not np.all(np.isfinite(s)):
        raise EvaluationError("non-finite score")
    pos = s[positive_index]
    greater = int(np.sum(s > pos))
    ties = int(np.sum(s == pos)) - 1
    return 1.0 + greater + ties / 2.0


@dataclass
class RankingResult:
    query_id: int
    rank: float
    reciprocal_rank: float
    hits: dict[int, bool]
    category: str
    metadata: dict[str, str] = field(default_factory=dict)
    top1: int = -1
    top1_score: float = float("nan")
    n_candidates: int = 0


def _aggregate(results: Sequence[RankingResult], ks: Sequence[int]) -> dict[str, float]:
    n = len(results)
    out: dict[str, float] = {"count": n}
    out["mrr"] = math.fsum(r.reciprocal_rank for r in results) / n if n else 0.0
    for k in ks:
        out[f"hits@{k}"] = sum(r.hits[k] for r in results) / n if n else 0.0
    return out


@dataclass
class MetricReport:
    overall: dict[str, float]
    groups: dict[str, dict[str, dict[str, float]]]

    def to_dict(self) -> dict[str, Any]:
        return {"overall": self.overall, "groups": self.groups}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "MetricReport":
        return cls(dict(d["overall"]), {k: dict(v) for k, v in d["groups"].items()})

    def write(self, path: str | os.PathLike) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_json() + "\n")


def summarize(results: Sequence[RankingResult], group_keys: Iterable[str] = DEFAULT_GROUP_KEYS,
              ks: Sequence[int] = DEFAULT_KS) -> MetricReport:
    groups: dict[str, dict[str, dict[str, float]]] = {}
    for key in group_keys:
        buckets: dict[str, list[RankingResult]] = defaultdict(list)
        for r in results:
            value = r.category if key == "category" else r.metadata.get(key)
            if value is not None:
                buckets[str(value)].append(r)
        groups[key] = {v: _aggregate(buckets[v], ks) for v in sorted(buckets)}
    return MetricReport(_aggregate(results, ks), groups)


def _prolificity(n_prior: int) -> str:
    if n_prior == 0:
        return "0"
    if n_prior < 5:
        return "1-4"
    if n_prior < 20:
        return "5-19"
    return "20+"


def query_metadata(
    store: GraphStore,
    query: RankingQuery,
    augmentation: AugmentationLabels | None = None,
    event_index: Mapping[Quadruplet, int] | None = None,
) -> dict[str, str]:
    ev = query.event
    base = store.schema[ev.relation].name
    head_meta = store.nodes[ev.head].metadata
    tail_meta = store.nodes[ev.tail].metadata
    meta = {
        "relation": base,
        "direction": query.direction,
        "relation_direction": f"{base}:{query.direction}",
        "country_pair": f"{head_meta.get('country', '')}->{tail_meta.get('country', '')}",
        "known_prolificity": _prolificity(store.degree_before(query.known, query.t)),
    }
    for k, v in head_meta.items():
        if k != "name":
            meta[f"head.{k}"] = v
    for k, v in tail_meta.items():
        if k != "name":
            meta[f"tail.{k}"] = v
    if augmentation is not None and event_index is not None:
        i = event_index[ev]
        h = "incumbent" if augmentation.head_incumbent[i] else "newcomer"
        t = "incumbent" if augmentation.tail_incumbent[i] else "newcomer"
        meta["head_status"] = h
        meta["tail_status"] = t
        meta["edge_status"] = f"{h}->{t}"
    return meta


def _state_fingerprint(model: Any) -> str | None:
    fp = getattr(model, "state_fingerprint", None)
    return fp() if callable(fp) else None


def evaluate(
    model: Scorer,
    queries: Sequence[RankingQuery],
    store: GraphStore,
    categories: Mapping[Quadruplet, EdgeCategory],
    augmentation: AugmentationLabels | None = None,
    group_keys: Iterable[str] = DEFAULT_GROUP_KEYS,
    ks: Sequence[int] = DEFAULT_KS,
) -> tuple[MetricReport, list[RankingResult]]:
    """Score every query with the model's frozen path and aggregate ranks."""
    store_fp = store.fingerprint()
    model_fp = _state_fingerprint(model)
    try:
        all_scores = model.score(queries)
    except Exception as exc:
        raise EvaluationError(f"model scoring failed: {exc}") from exc
    if len(all_scores) != len(queries):
        raise EvaluationError("scorer returned a different number of score vectors than queries")
    event_index = None
    if augmentation is not None:
        event_index = {q: i for i, q in enumerate(store.events())}
    results = []
    for q, scores in zip(queries, all_scores):
        scores = np.asarray(scores, dtype=np.float64)
        if scores.shape != (q.n_candidates,):
            raise EvaluationError(f"query {q.query_id}: expected {q.n_candidates} scores, got {scores.shape}")
        r = rank(scores, 0)
        best = int(np.argmax(scores))
        results.append(RankingResult(
            query_id=q.query_id,
            rank=r,
            reciprocal_rank=1.0 / r,
            hits={k: r <= k for k in ks},
            category=categories[q.event].value,
            metadata=query_metadata(store, q, augmentation, event_index),
            top1=int(q.candidates[best]),
            top1_score=float(scores[best]),
            n_candidates=q.n_candidates,
        ))
    if store.fingerprint() != store_fp or _state_fingerprint(model) != model_fp:
        raise EvaluationError("evaluation mutated the store or the model state")
    return summarize(results, group_keys, ks), results


def write_results_tsv(path: str | os.PathLike, queries: Sequence[RankingQuery],
                      results: Sequence[RankingResult], ks: Sequence[int] = DEFAULT_KS) -> None:
    meta_keys = sorted({k for r in results for k in r.metadata})
    by_id = {q.query_id: q for q in queries}
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["query_id", "t", "known", "relation", "direction", "positive", "n_candidates",
                    "rank", "reciprocal_rank"] + [f"hits@{k}" for k in ks]
                   + ["category", "top1", "top1_score"] + meta_keys)
        for r in results:
            q = by_id[r.query_id]
            w.writerow([r.query_id, q.t, q.known, q.relation, q.direction, q.positive, r.n_candidates,
                        repr(r.rank), repr(r.reciprocal_rank)] + [int(r.hits[k]) for k in ks]
                       + [r.category, r.top1, repr(r.top1_score)]
                       + [r.metadata.get(k, "") for k in meta_keys])


# -- heuristic scorers -------------------------------------------------------

class _HistoryScorer:
    def __init__(self, store: GraphStore):
        self.store = store

    def _score_one(self, count: int, last: int | None) -> float:
        raise NotImplementedError

    def score(self, queries: Sequence[RankingQuery]) -> list[np.ndarray]:
        out = []
        for q in queries:
            vals = []
            for c in q.candidates.tolist():
                count, last = self.store.prior_interactions(q.known, q.relation, c, q.t)
                vals.append(self._score_one(count, last))
            out.append(np.array(vals, dtype=np.float64))
        return out


class RecencyScorer(_HistoryScorer):
    """Most recent prior interaction with the known node; unseen pairs score 0."""

    def _score_one(self, count, last):
        return 0.0 if last is None else float(last) + 1.0


class FrequencyScorer(_HistoryScorer):
    """Number of prior interactions with the known node."""

    def _score_one(self, count, last):
        return float(count)


def baseline_recency(store: GraphStore, query: RankingQuery) -> np.ndarray:
    return RecencyScorer(store).score([query])[0]


def baseline_frequency(store: GraphStore, query: RankingQuery) -> np.ndarray:
    return FrequencyScorer(store).score([query])[0]


class RandomScorer:
    def __init__(self, seed: int = 0):
        self.seed = seed

    def score(self, queries):
        rng = np.random.default_rng(self.seed)
        return [rng.random(q.n_candidates) for q in queries]


class ConstantScorer:
    def score(self, queries):
        return [np.zeros(q.n_candidates) for q in queries]


class OracleScorer:
    """Puts the positive strictly on top (finite scores only)."""

    def score(self, queries):
        out = []
        for q in queries:
            s = np.zeros(q.n_candidates)
            s[0] = 1.0
            out.append(s)
        return out


def expected_random_mrr(n_candidates: int) -> float:
    """Closed-form MRR of a uniformly random ranking of ``n_candidates``."""
    return math.fsum(1.0 / k for k in range(1, n_candidates + 1)) / n_candidates
