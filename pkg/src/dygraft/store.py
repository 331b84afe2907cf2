"""Immutable, indexed event log for dynamic heterogeneous graphs.

Every event is a quadruplet ``(head, relation, tail, time)``. Each base
relation gets a mirrored inverse relation so that any edge can be walked
from either endpoint; mirrored edges are derived from the index and never
stored as separate events.
"""
from __future__ import annotations

import enum
import hashlib
from bisect import bisect_left
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Mapping, NamedTuple, Sequence

import numpy as np


class StoreError(ValueError):
    """Raised when a store cannot be built from the given nodes and events."""


class NodeKind(enum.IntEnum):
    SCIENTIST = 0
    INSTITUTION = 1
    CAPABILITY = 2

    @classmethod
    def parse(cls, text: str) -> "NodeKind":
        try:
            return cls[text.strip().upper()]
        except KeyError:
            raise ValueError(f"unknown node kind {text!r}") from None


@dataclass(frozen=True)
class Relation:
    name: str
    head_kind: NodeKind
    tail_kind: NodeKind


class RelationSchema:
    """Base relations plus one mirrored inverse per base relation.

    Ids ``0..n_base-1`` are base relations; id ``r + n_base`` is the
    inverse of ``r`` and swaps the head and tail kinds.
    """

    def __init__(self, base: Sequence[Relation]):
        if not base:
            raise StoreError("schema needs at least one relation")
        self.base = tuple(base)
        self.n_base = len(self.base)
        mirrored = [Relation(f"{r.name}_inv", r.tail_kind, r.head_kind) for r in self.base]
        self.relations = self.base + tuple(mirrored)
        self._by_name = {r.name: i for i, r in enumerate(self.relations)}

    def __len__(self) -> int:
        return len(self.relations)

    def __getitem__(self, rid: int) -> Relation:
        return self.relations[rid]

    def __eq__(self, other: object) -> bool:
        return isinstance(other, RelationSchema) and self.base == other.base

    def id_of(self, name: str) -> int:
        try:
            return self._by_name[name]
        except KeyError:
            raise StoreError(f"unknown relation {name!r}") from None

    def inverse(self, rid: int) -> int:
        return rid + self.n_base if rid < self.n_base else rid - self.n_base

    def is_inverse(self, rid: int) -> bool:
        return rid >= self.n_base

    def base_of(self, rid: int) -> int:
        return rid % self.n_base


ACADEMIC_SCHEMA = RelationSchema(
    [
        Relation("collab", NodeKind.SCIENTIST, NodeKind.SCIENTIST),
        Relation("partner", NodeKind.SCIENTIST, NodeKind.INSTITUTION),
        Relation("expertise", NodeKind.SCIENTIST, NodeKind.CAPABILITY),
    ]
)


@dataclass(frozen=True)
class NodeRecord:
    id: int
    kind: NodeKind
    metadata: Mapping[str, str] = field(default_factory=dict)
    features: tuple[float, ...] | None = None


class Quadruplet(NamedTuple):
    head: int
    relation: int
    tail: int
    time: int


@dataclass(frozen=True)
class Snapshot:
    """All events of a single timestep."""

    time: int
    heads: np.ndarray
    relations: np.ndarray
    tails: np.ndarray

    def __len__(self) -> int:
        return len(self.heads)

    def quadruplets(self) -> list[Quadruplet]:
        return [
            Quadruplet(int(h), int(r), int(t), self.time)
            for h, r, t in zip(self.heads, self.relations, self.tails)
        ]

    def active_nodes(self) -> np.ndarray:
        return np.unique(np.concatenate([self.heads, self.tails]))


@dataclass(frozen=True)
class TemporalNeighborhood:
    center: int
    as_of: int
    hops: int
    # layers[k] holds the (node, relation, time) entries reached at hop k+1
    layers: tuple[tuple[tuple[int, int, int], ...], ...]

    @property
    def neighbors(self) -> list[tuple[int, int, int]]:
        return [entry for layer in self.layers for entry in layer]


class GraphStore:
    """Time-sorted, de-duplicated event log with temporal indexes.

    Build instances with :func:`build_store`. All methods are read-only.
    """

    def __init__(
        self,
        nodes: Sequence[NodeRecord],
        schema: RelationSchema,
        events: np.ndarray,
        n_duplicates: int,
    ):
        self.nodes = tuple(nodes)
        self.schema = schema
        self.n_duplicates = n_duplicates
        self.kinds = np.array([int(n.kind) for n in self.nodes], dtype=np.int64)
        ev = events.reshape(-1, 4)
        self.heads = np.ascontiguousarray(ev[:, 0])
        self.relations = np.ascontiguousarray(ev[:, 1])
        self.tails = np.ascontiguousarray(ev[:, 2])
        self.times = np.ascontiguousarray(ev[:, 3])
        for arr in (self.heads, self.relations, self.tails, self.times):
            arr.setflags(write=False)
        self._build_indexes()

    # -- construction helpers -------------------------------------------

    def _build_indexes(self) -> None:
        n = len(self.nodes)
        uniq, starts = np.unique(self.times, return_index=True)
        ends = np.append(starts[1:], len(self.times))
        self._time_slices = {int(t): (int(s), int(e)) for t, s, e in zip(uniq, starts, ends)}
        self.timestamps = tuple(int(t) for t in uniq)

        # incidence list with mirrored entries: (owner, neighbor, relation, time)
        nb = self.schema.n_base
        owner = np.concatenate([self.heads, self.tails])
        other = np.concatenate([self.tails, self.heads])
        rel = np.concatenate([self.relations, self.relations + nb])
        tim = np.concatenate([self.times, self.times])
        # within an owner: time ascending, then (neighbor, relation) descending so
        # that reading a prefix backwards yields most-recent-first with ascending
        # (neighbor, relation) tie-break
        order = np.lexsort((-rel, -other, tim, owner))
        self._adj_nbr = other[order]
        self._adj_rel = rel[order]
        self._adj_time = tim[order]
        counts = np.bincount(owner, minlength=n) if len(owner) else np.zeros(n, dtype=np.int64)
        self._adj_ptr = np.concatenate([[0], np.cumsum(counts)])

        pair: dict[tuple[int, int], dict[int, list[int]]] = defaultdict(lambda: defaultdict(list))
        for h, r, t, tm in zip(self.heads.tolist(), self.relations.tolist(),
                               self.tails.tolist(), self.times.tolist()):
            pair[(h, r)][t].append(tm)
            pair[(t, r + nb)][h].append(tm)
        self._pair_times = {key: {k: tuple(v) for k, v in d.items()} for key, d in pair.items()}

        first = np.full(n, np.iinfo(np.int64).max, dtype=np.int64)
        if len(self.times):
            np.minimum.at(first, self.heads, self.times)
            np.minimum.at(first, self.tails, self.times)
        self.first_seen = first
        self.first_seen.setflags(write=False)

    # -- basic accessors -------------------------------------------------

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def n_relations(self) -> int:
        return len(self.schema)

    def __len__(self) -> int:
        return len(self.times)

    def events(self) -> list[Quadruplet]:
        return [
            Quadruplet(*row)
            for row in zip(self.heads.tolist(), self.relations.tolist(),
                           self.tails.tolist(), self.times.tolist())
        ]

    def event_array(self) -> np.ndarray:
        return np.stack([self.heads, self.relations, self.tails, self.times], axis=1)

    def nodes_of_kind(self, kind: NodeKind | int) -> np.ndarray:
        return np.flatnonzero(self.kinds == int(kind))

    def kind_of(self, node: int) -> NodeKind:
        return NodeKind(int(self.kinds[node]))

    def tail_kind(self, relation: int) -> NodeKind:
        return self.schema[relation].tail_kind

    def head_kind(self, relation: int) -> NodeKind:
        return self.schema[relation].head_kind

    @property
    def time_range(self) -> tuple[int, int] | None:
        if not self.timestamps:
            return None
        return self.timestamps[0], self.timestamps[-1]

    # -- temporal queries -------------------------------------------------

    def snapshot(self, t: int) -> Snapshot:
        lo, hi = self._time_slices.get(int(t), (0, 0))
        return Snapshot(int(t), self.heads[lo:hi], self.relations[lo:hi], self.tails[lo:hi])

    def event_slice(self, start: int | None = None, stop: int | None = None) -> slice:
        """Index range of events with ``start <= time < stop``."""
        lo = 0 if start is None else int(np.searchsorted(self.times, start, side="left"))
        hi = len(self.times) if stop is None else int(np.searchsorted(self.times, stop, side="left"))
        return slice(lo, hi)

    def recent_neighbors(self, node: int, as_of: int, cap: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Up to ``cap`` most recent incidences of ``node`` with time < as_of.

        Returns ``(neighbors, relations, times)`` ordered most-recent-first.
        Relations are expressed from ``node``'s side, so an incoming base edge
        appears with its inverse relation.
        """
        lo, hi = self._adj_ptr[node], self._adj_ptr[node + 1]
        k = lo + int(np.searchsorted(self._adj_time[lo:hi], as_of, side="left"))
        start = max(lo, k - cap)
        sl = slice(start, k)
        return self._adj_nbr[sl][::-1], self._adj_rel[sl][::-1], self._adj_time[sl][::-1]

    def degree_before(self, node: int, as_of: int) -> int:
        """Number of incidences (base and mirrored) of ``node`` before ``as_of``."""
        lo, hi = self._adj_ptr[node], self._adj_ptr[node + 1]
        return int(np.searchsorted(self._adj_time[lo:hi], as_of, side="left"))

    def neighborhood(
        self, center: int, as_of: int, hops: int, cap_per_hop: int, seed: int = 0
    ) -> TemporalNeighborhood:
        """Breadth-first temporal neighborhood of ``center`` strictly before ``as_of``.

        Each hop keeps the ``cap_per_hop`` most recent incidences leading to
        nodes not reached at an earlier hop. Truncation is by recency with a
        ``(node, relation)`` tie-break, so the result does not depend on
        ``seed``; the argument is kept for interface stability.
        """
        if not 0 <= center < self.n_nodes:
            raise StoreError(f"unknown center node {center}")
        if hops < 1 or cap_per_hop < 1:
            raise ValueError("hops and cap_per_hop must be >= 1")
        visited = {center}
        frontier = [center]
        layers = []
        for _ in range(hops):
            found: list[tuple[int, int, int]] = []
            for node in frontier:
                lo, hi = self._adj_ptr[node], self._adj_ptr[node + 1]
                k = lo + int(np.searchsorted(self._adj_time[lo:hi], as_of, side="left"))
                for i in range(k - 1, lo - 1, -1):
                    nbr = int(self._adj_nbr[i])
                    if nbr not in visited:
                        found.append((nbr, int(self._adj_rel[i]), int(self._adj_time[i])))
            found = list(dict.fromkeys(found))
            found.sort(key=lambda e: (-e[2], e[0], e[1]))
            layer = tuple(found[:cap_per_hop])
            layers.append(layer)
            frontier = list(dict.fromkeys(e[0] for e in layer))
            visited.update(frontier)
        return TemporalNeighborhood(center, int(as_of), hops, tuple(layers))

    def known_entities(self, kind: NodeKind | int | None, before_time: int) -> set[int]:
        """Nodes (optionally of one kind) with at least one event before ``before_time``."""
        mask = self.first_seen < before_time
        if kind is not None:
            mask &= self.kinds == int(kind)
        return set(np.flatnonzero(mask).tolist())

    def true_tails(self, head: int, relation: int) -> set[int]:
        return set(self._pair_times.get((head, relation), {}))

    def pair_times(self, node: int, relation: int) -> Mapping[int, tuple[int, ...]]:
        """Partner -> ascending event times for ``(node, relation)``, mirrored included."""
        return self._pair_times.get((node, relation), {})

    def prior_interactions(self, node: int, relation: int, partner: int, before: int) -> tuple[int, int | None]:
        """(count, last time) of ``(node, relation, partner)`` events strictly before ``before``."""
        times = self._pair_times.get((node, relation), {}).get(partner, ())
        k = bisect_left(times, before)
        return k, (times[k - 1] if k else None)

    def truncated(self, before: int) -> "GraphStore":
        """Copy of the store without events at times >= ``before``."""
        keep = self.times < before
        ev = self.event_array()[keep]
        return GraphStore(self.nodes, self.schema, ev, 0)

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(self.event_array().astype("<i8").tobytes())
        h.update(self.kinds.astype("<i8").tobytes())
        return h.hexdigest()


def build_store(
    nodes: Sequence[NodeRecord],
    events: Iterable[Quadruplet | tuple[int, int, int, int]],
    schema: RelationSchema = ACADEMIC_SCHEMA,
) -> GraphStore:
    """Validate, sort and de-duplicate ``events`` and index them.

    Only base relations are accepted in ``events``. The number of dropped
    duplicates is available as ``store.n_duplicates``.
    """
    nodes = list(nodes)
    for i, rec in enumerate(nodes):
        if rec.id != i:
            raise StoreError(f"node ids must be contiguous from 0; got id {rec.id} at position {i}")
    feat_len: dict[NodeKind, int] = {}
    for rec in nodes:
        if rec.features is not None:
            prev = feat_len.setdefault(rec.kind, len(rec.features))
            if prev != len(rec.features):
                raise StoreError(f"node {rec.id}: feature length {len(rec.features)} != {prev} for kind {rec.kind.name}")
    for kind in feat_len:
        missing = [r.id for r in nodes if r.kind == kind and r.features is None]
        if missing:
            raise StoreError(f"node {missing[0]}: kind {kind.name} has feature vectors on other nodes but not this one")

    n = len(nodes)
    kinds = [rec.kind for rec in nodes]
    rows = []
    for ev in events:
        h, r, t, tm = (int(x) for x in ev)
        q = Quadruplet(h, r, t, tm)
        if not (0 <= h < n and 0 <= t < n):
            raise StoreError(f"event {q}: unknown node id")
        if not 0 <= r < schema.n_base:
            raise StoreError(f"event {q}: unknown base relation id {r}")
        if tm < 0:
            raise StoreError(f"event {q}: negative timestamp")
        rel = schema[r]
        if kinds[h] != rel.head_kind or kinds[t] != rel.tail_kind:
            raise StoreError(
                f"event {q}: relation {rel.name} expects {rel.head_kind.name}->{rel.tail_kind.name}, "
                f"got {kinds[h].name}->{kinds[t].name}"
            )
        if h == t:
            raise StoreError(f"event {q}: self-loop")
        rows.append((h, r, t, tm))

    arr = np.array(rows, dtype=np.int64).reshape(-1, 4)
    if len(arr):
        order = np.lexsort((arr[:, 2], arr[:, 1], arr[:, 0], arr[:, 3]))
        arr = arr[order]
        keep = np.ones(len(arr), dtype=bool)
        keep[1:] = np.any(arr[1:] != arr[:-1], axis=1)
        n_dup = int(len(arr) - keep.sum())
        arr = arr[keep]
    else:
        n_dup = 0
    return GraphStore(nodes, schema, arr, n_dup)
