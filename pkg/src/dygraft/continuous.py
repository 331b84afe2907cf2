"""Continuous-time dynamic graph transformer (DGT-C).

A per-node memory is rewritten whenever the node takes part in an event:
the node's messages for one timestamp (own memory, partner memory, encoded
time gap, relation) are read by a self-attention + feed-forward block (or a
GRU for the recurrent ablation) whose last output becomes the new memory.
Node embeddings at query time come from temporal graph attention over the
most recent neighbors, and an MLP head turns a pair of embeddings plus the
relation into an edge probability.

Memory semantics: all events sharing a timestamp read the memory as it was
before that timestamp, so how a stream is cut into batches never changes the
resulting memory as long as the stream order is the same.
"""
from __future__ import annotations

import itertools
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .evaluation import RankingQuery
from .ingest import SplitSpec
from .layers import MultiHeadAttention, Time2Vec, TransformerBlock, causal_mask
from .store import GraphStore, NodeKind, Quadruplet, build_store
from .training import (
    ConfigError,
    OptimConfig,
    TripleIndex,
    check_finite,
    parameter_fingerprint,
    sample_negatives,
    subsystem_seed,
)

log = logging.getLogger(__name__)

NEVER = float("-inf")


@dataclass(frozen=True)
class ContinuousModelConfig:
    d_mem: int = 172
    d_emb: int = 172
    n_heads: int = 2
    hops: int = 1
    neighbor_cap: int = 10
    time_enc_dim: int = 100
    batch_window: int = 200
    sequence_layer: str = "transformer"
    d_rel: int = 16
    n_negatives: int = 10
    dropout: float = 0.0
    id_features: int = 32
    id_seed: int = 123

    def __post_init__(self):
        if self.d_mem % self.n_heads or self.d_emb % self.n_heads:
            raise ConfigError("d_mem and d_emb must be divisible by n_heads")
        if self.batch_window < 1 or self.hops < 1 or self.neighbor_cap < 1:
            raise ConfigError("batch_window, hops and neighbor_cap must be >= 1")
        if self.time_enc_dim < 2:
            raise ConfigError("time_enc_dim must be >= 2")
        if self.sequence_layer not in ("transformer", "recurrent"):
            raise ConfigError("sequence_layer must be 'transformer' or 'recurrent'")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must be in [0, 1)")
        if self.id_features < 0:
            raise ConfigError("id_features must be >= 0")

    def to_dict(self):
        return asdict(self)


def identity_features(n_nodes: int, width: int, seed: int) -> np.ndarray:
    """Fixed random node codes with unit expected norm.

    They give freshly created memories something to tell nodes apart by,
    which attention over neighbors needs in order to point at a specific
    partner.
    """
    rng = np.random.default_rng(seed)
    return rng.standard_normal((n_nodes, width)) / math.sqrt(width)


class MemoryOrderError(ValueError):
    """An update batch is unsorted or older than the memory it is applied to."""


@dataclass
class NodeMemory:
    """Per-node state plus enough bookkeeping to read it "as of before t".

    ``M``/``last`` hold the state after the node's latest timestamp group;
    ``M_prev``/``last_prev`` the state just before that group; ``pending``
    the events of that group, so later events at the same timestamp can be
    folded into the same message sequence.
    """

    M: torch.Tensor
    last: torch.Tensor  # float64, -inf when never updated
    M_prev: torch.Tensor
    last_prev: torch.Tensor
    pending: dict[int, tuple[Quadruplet, ...]] = field(default_factory=dict)
    n_events: int = 0  # stream position: number of events applied
    horizon: float = NEVER  # latest event time applied

    @classmethod
    def fresh(cls, n_nodes: int, d_mem: int, dtype=torch.float32) -> "NodeMemory":
        z = torch.zeros(n_nodes, d_mem, dtype=dtype)
        never = torch.full((n_nodes,), NEVER, dtype=torch.float64)
        return cls(z, never, z.clone(), never.clone())

    def view_before(self, t: float) -> tuple[torch.Tensor, torch.Tensor]:
        """Memory and last-update times reflecting only events before ``t``."""
        if self.horizon > t:
            raise MemoryOrderError(f"memory already holds events at {self.horizon} > {t}")
        same = (self.last == t).unsqueeze(-1)
        M = torch.where(same, self.M_prev, self.M)
        last = torch.where(same.squeeze(-1), self.last_prev, self.last)
        return M, last

    def detach(self) -> "NodeMemory":
        return NodeMemory(self.M.detach(), self.last.clone(), self.M_prev.detach(),
                          self.last_prev.clone(), dict(self.pending), self.n_events, self.horizon)

    def copy(self) -> "NodeMemory":
        return NodeMemory(self.M.detach().clone(), self.last.clone(), self.M_prev.detach().clone(),
                          self.last_prev.clone(), dict(self.pending), self.n_events, self.horizon)

    def state_dict(self) -> dict:
        rows = [(n, *q) for n, qs in sorted(self.pending.items()) for q in qs]
        return {
            "M": self.M.detach().clone(), "last": self.last.clone(),
            "M_prev": self.M_prev.detach().clone(), "last_prev": self.last_prev.clone(),
            "pending": torch.tensor(rows, dtype=torch.long).reshape(-1, 5),
            "n_events": self.n_events, "horizon": self.horizon,
        }

    @classmethod
    def from_state_dict(cls, d: dict) -> "NodeMemory":
        pending: dict[int, list[Quadruplet]] = {}
        for n, h, r, t, tm in d["pending"].tolist():
            pending.setdefault(n, []).append(Quadruplet(h, r, t, tm))
        return cls(d["M"], d["last"], d["M_prev"], d["last_prev"],
                   {k: tuple(v) for k, v in pending.items()}, int(d["n_events"]), float(d["horizon"]))


class DGTContinuous(nn.Module):
    def __init__(self, node_kinds: Sequence[int], n_relations: int, config: ContinuousModelConfig,
                 features: np.ndarray | None = None, n_kinds: int = len(NodeKind)):
        super().__init__()
        self.config = config
        c = config
        n = len(node_kinds)
        self.n_relations = n_relations
        self.register_buffer("kinds", torch.as_tensor(np.asarray(node_kinds), dtype=torch.long))
        feats = np.zeros((n, 0)) if features is None else np.asarray(features, dtype=np.float64)
        self.register_buffer("features", torch.as_tensor(feats, dtype=torch.float32))
        f = feats.shape[1]
        self.time_enc = Time2Vec(c.time_enc_dim)
        self.fresh_flag = nn.Parameter(torch.randn(c.time_enc_dim) * 0.1)
        self.rel_emb = nn.Embedding(n_relations, c.d_rel)
        msg_dim = 2 * c.d_mem + c.time_enc_dim + c.d_rel + 2 * f
        if c.sequence_layer == "transformer":
            self.msg_in = nn.Linear(msg_dim, c.d_mem)
            self.msg_block = TransformerBlock(c.d_mem, c.n_heads, 2 * c.d_mem, c.dropout)
        else:
            self.msg_gru = nn.GRUCell(msg_dim, c.d_mem)
        self.kind_emb = nn.Embedding(n_kinds, c.d_emb)
        self.mem_in = nn.Linear(c.d_mem + f, c.d_emb)
        q_dim = c.d_emb + c.time_enc_dim
        kv_dim = c.d_emb + c.time_enc_dim + c.d_rel
        self.attn = nn.ModuleList(MultiHeadAttention(q_dim, kv_dim, c.d_emb, c.n_heads) for _ in range(c.hops))
        self.merge = nn.ModuleList(
            nn.Sequential(nn.Linear(2 * c.d_emb, c.d_emb), nn.GELU(), nn.Linear(c.d_emb, c.d_emb))
            for _ in range(c.hops)
        )
        self.head_rel = nn.Embedding(n_relations, c.d_rel)
        # the elementwise product lets the head match a node against what the
        # other endpoint's neighborhood summary points at
        self.edge_head = nn.Sequential(
            nn.Linear(3 * c.d_emb + c.d_rel, c.d_emb), nn.GELU(), nn.Linear(c.d_emb, 1)
        )
        self.drop = nn.Dropout(c.dropout)

    @classmethod
    def for_store(cls, store: GraphStore, config: ContinuousModelConfig) -> "DGTContinuous":
        """Model whose static features are the store's node features followed
        by ``config.id_features`` fixed random identity coordinates."""
        blocks = []
        if any(n.features is not None for n in store.nodes):
            width = max(len(n.features) for n in store.nodes if n.features is not None)
            feats = np.zeros((store.n_nodes, width))
            for n in store.nodes:
                if n.features is not None:
                    feats[n.id, :len(n.features)] = n.features
            blocks.append(feats)
        if config.id_features:
            blocks.append(identity_features(store.n_nodes, config.id_features, config.id_seed))
        feats = np.concatenate(blocks, axis=1) if blocks else None
        return cls(store.kinds, store.n_relations, config, feats)

    @property
    def dtype(self) -> torch.dtype:
        return self.kind_emb.weight.dtype

    def fresh_memory(self) -> NodeMemory:
        return NodeMemory.fresh(len(self.kinds), self.config.d_mem, self.dtype)

    # -- memory ----------------------------------------------------------------

    def encode_gap(self, last: torch.Tensor, t: float) -> torch.Tensor:
        """Time2Vec of the gap since the last update; first contact uses 0 plus a learned flag."""
        fresh = torch.isinf(last)
        delta = torch.where(fresh, torch.zeros_like(last), t - last).to(self.dtype)
        return self.time_enc(delta) + fresh.to(self.dtype).unsqueeze(-1) * self.fresh_flag

    def messages(self, M: torch.Tensor, last: torch.Tensor, node: int, events: Sequence[Quadruplet]) -> torch.Tensor:
        """Message rows ``[len(events), msg_dim]`` for ``node`` at one timestamp."""
        nb = self.n_relations // 2
        partners, rels = [], []
        for q in events:
            if q.head == node:
                partners.append(q.tail)
                rels.append(q.relation)
            else:
                partners.append(q.head)
                rels.append(q.relation + nb)
        k = len(events)
        t = float(events[0].time)
        p = torch.as_tensor(partners)
        parts = [
            M[node].expand(k, -1),
            M[p],
            self.encode_gap(last[node:node + 1], t).expand(k, -1),
            self.rel_emb(torch.as_tensor(rels)),
        ]
        if self.features.shape[1]:
            parts += [self.features[node].to(self.dtype).expand(k, -1), self.features[p].to(self.dtype)]
        return torch.cat(parts, dim=-1)

    def read_sequences(self, msgs: Sequence[torch.Tensor], start: torch.Tensor) -> torch.Tensor:
        """New memory rows from padded message sequences (one per node)."""
        lengths = torch.tensor([len(m) for m in msgs])
        L = int(lengths.max())
        padded = torch.nn.utils.rnn.pad_sequence(list(msgs), batch_first=True)  # [B, L, msg]
        if self.config.sequence_layer == "recurrent":
            h = start
            for i in range(L):
                step = self.msg_gru(padded[:, i], h)
                h = torch.where((i < lengths).unsqueeze(-1), step, h)
            return h
        valid = torch.arange(L).unsqueeze(0) < lengths.unsqueeze(1)
        x = self.msg_block(self.msg_in(padded), causal_mask(L, valid))
        return x[torch.arange(len(msgs)), lengths - 1]

    def update_memory(self, memory: NodeMemory, batch: Sequence[Quadruplet]) -> NodeMemory:
        """Apply a time-sorted batch of events and return the new memory.

        Untouched nodes keep their rows. Events sharing a timestamp with the
        node's pending group are folded into that group's message sequence.
        """
        batch = [Quadruplet(*map(int, q)) for q in batch]
        if not batch:
            return memory
        keys = [(q.time, q.head, q.relation, q.tail) for q in batch]
        if any(a > b for a, b in zip(keys, keys[1:])):
            raise MemoryOrderError("batch is not sorted by (time, head, relation, tail)")
        if batch[0].time < memory.horizon:
            raise MemoryOrderError(f"batch starts at {batch[0].time}, memory is already at {memory.horizon}")
        M, last, M_prev, last_prev = memory.M, memory.last, memory.M_prev, memory.last_prev
        pending = dict(memory.pending)
        i = 0
        while i < len(batch):
            t = batch[i].time
            j = i
            while j < len(batch) and batch[j].time == t:
                j += 1
            group = batch[i:j]
            i = j
            same = (last == t).unsqueeze(-1)
            M_before = torch.where(same, M_prev, M)
            last_before = torch.where(same.squeeze(-1), last_prev, last)
            per_node: dict[int, list[Quadruplet]] = {}
            for q in group:
                per_node.setdefault(q.head, []).append(q)
                per_node.setdefault(q.tail, []).append(q)
            nodes = sorted(per_node)
            seqs = []
            for n in nodes:
                evs = (pending.get(n, ()) if float(last[n]) == t else ()) + tuple(per_node[n])
                pending[n] = evs
                seqs.append(self.messages(M_before, last_before, n, evs))
            idx = torch.as_tensor(nodes)
            new_rows = self.read_sequences(seqs, M_before[idx])
            M = M.index_put((idx,), new_rows)
            M_prev = M_prev.index_put((idx,), M_before[idx])
            last_prev = last_prev.index_put((idx,), last_before[idx])
            last = last.index_put((idx,), torch.full((len(nodes),), float(t), dtype=torch.float64))
        return NodeMemory(M, last, M_prev, last_prev, pending,
                          memory.n_events + len(batch), float(batch[-1].time))

    # -- embedding -------------------------------------------------------------

    def embed(self, memory: NodeMemory, store: GraphStore, nodes, t: float) -> torch.Tensor:
        """Time-aware embeddings ``[len(nodes), d_emb]`` at time ``t``.

        Uses memory as of before ``t`` and neighbors with event time < ``t``.
        """
        M, _ = memory.view_before(t)
        return self.embed_from(M, store, nodes, t)

    def embed_from(self, M: torch.Tensor, store: GraphStore, nodes, t: float) -> torch.Tensor:
        c = self.config
        targets = np.unique(np.asarray(nodes, dtype=np.int64))
        # needed node sets per layer, innermost first
        levels = [targets]
        nbr_lists = []
        for _ in range(c.hops):
            cur = levels[-1]
            lists = [store.recent_neighbors(int(n), t, c.neighbor_cap) for n in cur]
            nbr_lists.append(lists)
            extra = [l[0] for l in lists if len(l[0])]
            levels.append(np.union1d(cur, np.concatenate(extra)) if extra else cur)
        base = levels[-1]
        bt = torch.as_tensor(base)
        h0_in = M[bt]
        if self.features.shape[1]:
            h0_in = torch.cat([h0_in, self.features[bt].to(self.dtype)], dim=-1)
        h = self.mem_in(h0_in) + self.kind_emb(self.kinds[bt])
        h_nodes = base
        zero_t = self.time_enc(torch.zeros(1, dtype=self.dtype))
        for layer in range(c.hops):
            # layer-th attention computes level (hops-1-layer) from its superset
            lvl = c.hops - 1 - layer
            cur, lists = levels[lvl], nbr_lists[lvl]
            cur_rows = torch.as_tensor(np.searchsorted(h_nodes, cur))
            B = len(cur)
            K = max((len(l[0]) for l in lists), default=0)
            K = max(K, 1)
            nbr_idx = np.zeros((B, K), dtype=np.int64)
            nbr_rel = np.zeros((B, K), dtype=np.int64)
            nbr_dt = np.zeros((B, K), dtype=np.float64)
            valid = np.zeros((B, K), dtype=bool)
            for b, (nb, rl, tm) in enumerate(lists):
                k = len(nb)
                nbr_idx[b, :k] = np.searchsorted(h_nodes, nb)
                nbr_rel[b, :k] = rl
                nbr_dt[b, :k] = t - tm
                valid[b, :k] = True
            h_self = h[cur_rows]
            query = torch.cat([h_self, zero_t.expand(B, -1)], dim=-1).unsqueeze(1)
            kv = torch.cat([
                h[torch.as_tensor(nbr_idx)],
                self.time_enc(torch.as_tensor(nbr_dt, dtype=self.dtype)),
                self.rel_emb(torch.as_tensor(nbr_rel)),
            ], dim=-1)
            mask = torch.as_tensor(valid).unsqueeze(1)
            att = self.attn[layer](query, kv, mask, empty_to_query=True).squeeze(1)
            h = self.merge[layer](torch.cat([self.drop(att), h_self], dim=-1))
            h_nodes = cur
        rows = torch.as_tensor(np.searchsorted(h_nodes, np.asarray(nodes, dtype=np.int64)))
        return h[rows]

    def edge_logit(self, z_head: torch.Tensor, z_tail: torch.Tensor, relation) -> torch.Tensor:
        rel = torch.as_tensor(np.asarray(relation), dtype=torch.long).expand(z_head.shape[:-1])
        x = torch.cat([z_head, z_tail, z_head * z_tail, self.head_rel(rel)], dim=-1)
        return self.edge_head(x).squeeze(-1)

    def edge_probability(self, z_head, z_tail, relation) -> torch.Tensor:
        return torch.sigmoid(self.edge_logit(z_head, z_tail, relation))


# -- training ------------------------------------------------------------------

def _batch_logits(model: DGTContinuous, memory: NodeMemory, store: GraphStore,
                  batch: Sequence[Quadruplet], rng: np.random.Generator,
                  banned: TripleIndex | None) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Logits for positives (both directions) and their sampled negatives."""
    nb = store.schema.n_base
    k = model.config.n_negatives
    pos_l, neg_l, neg_v = [], [], []
    times = sorted({q.time for q in batch})
    for t in times:
        evs = [q for q in batch if q.time == t]
        heads = np.array([q.head for q in evs])
        tails = np.array([q.tail for q in evs])
        rels = np.array([q.relation for q in evs])
        known = np.concatenate([heads, tails])
        rel = np.concatenate([rels, rels + nb])
        pos = np.concatenate([tails, heads])
        negs, valid = sample_negatives(rng, store, known, rel, k, banned)
        needed = np.unique(np.concatenate([known, pos, negs.ravel()]))
        z = model.embed(memory, store, needed, t)
        row = {int(n): i for i, n in enumerate(needed)}
        zk = z[torch.as_tensor([row[int(n)] for n in known])]
        zp = z[torch.as_tensor([row[int(n)] for n in pos])]
        zn = z[torch.as_tensor([[row[int(n)] for n in r] for r in negs])]
        rel_t = torch.as_tensor(rel)
        pos_l.append(model.edge_logit(zk, zp, rel_t))
        neg_l.append(model.edge_logit(zk.unsqueeze(1).expand_as(zn), zn, rel_t.unsqueeze(1).expand(-1, k)))
        neg_v.append(torch.as_tensor(valid))
    return torch.cat(pos_l), torch.cat(neg_l), torch.cat(neg_v)


def step_loss(model: DGTContinuous, memory: NodeMemory, store: GraphStore,
              batch: Sequence[Quadruplet], rng: np.random.Generator,
              banned: TripleIndex | None) -> torch.Tensor:
    """Binary cross-entropy of a batch scored against ``memory``.

    ``memory`` must not contain any event of ``batch``.
    """
    pos, neg, valid = _batch_logits(model, memory, store, batch, rng, banned)
    lp = F.binary_cross_entropy_with_logits(pos, torch.ones_like(pos), reduction="sum")
    ln = F.binary_cross_entropy_with_logits(neg, torch.zeros_like(neg), reduction="none")
    ln = (ln * valid.to(ln.dtype)).sum() / model.config.n_negatives
    return (lp + ln) / len(pos)


def stream_batches(events: Sequence[Quadruplet], window: int) -> list[list[Quadruplet]]:
    return [list(events[i:i + window]) for i in range(0, len(events), window)]


def train_continuous(
    store: GraphStore,
    split: SplitSpec,
    config: ContinuousModelConfig,
    optim: OptimConfig,
    model: DGTContinuous | None = None,
    optimizer_state: dict | None = None,
    start_epoch: int = 0,
    loss_curve: list[float] | None = None,
    on_checkpoint: Callable[[int, DGTContinuous, torch.optim.Optimizer, list[float], NodeMemory], None] | None = None,
) -> tuple[DGTContinuous, NodeMemory, list[float], torch.optim.Optimizer]:
    """Fit DGT-C on the chronological training stream.

    Each batch is scored with the memory produced by all earlier batches;
    the batch's own events enter the memory only when the next batch is
    processed. Returns the model, the memory after the full training
    stream, the per-epoch loss and the optimizer.
    """
    sl = store.event_slice(None, split.train_end + 1)
    events = store.events()[sl]
    if not events:
        raise ValueError("no training events")
    torch.manual_seed(subsystem_seed(optim.seed, "dgt_c.init"))
    if model is None:
        model = DGTContinuous.for_store(store, config).to(optim.torch_dtype)
    opt = torch.optim.Adam(model.parameters(), lr=optim.lr, weight_decay=optim.weight_decay)
    if optimizer_state is not None:
        opt.load_state_dict(optimizer_state)
    banned = TripleIndex(store, store.times <= split.train_end)
    batches = stream_batches(events, config.batch_window)
    losses = list(loss_curve or [])
    memory = model.fresh_memory()

    def final_memory():
        with torch.no_grad():
            mem = model.fresh_memory()
            for b in batches:
                mem = model.update_memory(mem, b)
        return mem

    for epoch in range(start_epoch, optim.epochs):
        rng = np.random.default_rng(subsystem_seed(optim.seed, f"dgt_c.epoch{epoch}"))
        torch.manual_seed(subsystem_seed(optim.seed, f"dgt_c.dropout{epoch}"))
        model.train()
        memory = model.fresh_memory()
        prev: list[Quadruplet] = []
        consumed = 0
        total, n = 0.0, 0
        for batch in batches:
            opt.zero_grad()
            mem = model.update_memory(memory, prev) if prev else memory
            # scoring a batch with memory that already holds it would leak labels
            assert mem.n_events == consumed, "memory is ahead of the batch being scored"
            loss = step_loss(model, mem, store, batch, rng, banned)
            check_finite(loss, f"epoch {epoch}, stream position {consumed}")
            loss.backward()
            if optim.grad_clip > 0:
                nn.utils.clip_grad_norm_(model.parameters(), optim.grad_clip)
            opt.step()
            total += loss.item() * len(batch)
            n += len(batch)
            memory = mem.detach()
            prev = batch
            consumed += len(batch)
        losses.append(total / max(n, 1))
        log.info("dgt_c epoch %d loss %.5f", epoch, losses[-1])
        if on_checkpoint and optim.checkpoint_every and (epoch + 1) % optim.checkpoint_every == 0:
            model.eval()
            on_checkpoint(epoch + 1, model, opt, losses, final_memory())
    model.eval()
    return model, final_memory(), losses, opt


# -- inference -----------------------------------------------------------------

class ContinuousScorer:
    """Scores queries with frozen parameters, streaming ground truth into a
    private copy of the memory up to (but excluding) each query time."""

    def __init__(self, model: DGTContinuous, store: GraphStore, memory: NodeMemory | None = None):
        self.model = model
        self.store = store
        self.memory = memory

    def state_fingerprint(self) -> str:
        fp = parameter_fingerprint(self.model)
        if self.memory is not None:
            fp += str(hash(self.memory.M.detach().numpy().tobytes())) + str(self.memory.n_events)
        return fp

    def _advance(self, mem: NodeMemory | None, t: float) -> NodeMemory:
        """Memory holding exactly the store's events before ``t``."""
        if mem is None or mem.horizon >= t:
            mem = self.model.fresh_memory()
            start = None
        else:
            start = mem.horizon + 1 if math.isfinite(mem.horizon) else None
        sl = self.store.event_slice(None if start is None else int(math.ceil(start)), int(math.ceil(t)))
        events = self.store.events()[sl] if sl.stop > sl.start else []
        # one update per timestamp group: results then do not depend on where
        # the replay started, so scoring a truncated store is bit-identical
        for _, group in itertools.groupby(events, key=lambda q: q.time):
            mem = self.model.update_memory(mem, list(group))
        return mem

    @torch.no_grad()
    def score(self, queries: Sequence[RankingQuery]) -> list[np.ndarray]:
        self.model.eval()
        out: list[np.ndarray | None] = [None] * len(queries)
        by_t: dict[int, list[int]] = {}
        for i, q in enumerate(queries):
            by_t.setdefault(q.t, []).append(i)
        mem = self.memory.copy() if self.memory is not None else None
        for t, idx in sorted(by_t.items()):
            mem = self._advance(mem, t)
            needed = np.unique(np.concatenate([np.concatenate([[queries[i].known], queries[i].candidates])
                                               for i in idx]))
            z = self.model.embed(mem, self.store, needed, t)
            for i in idx:
                q = queries[i]
                rows = torch.as_tensor(np.searchsorted(needed, q.candidates))
                zk = z[int(np.searchsorted(needed, q.known))].expand(len(rows), -1)
                s = self.model.edge_probability(zk, z[rows], q.relation)
                out[i] = s.double().numpy()
        return out


def forecast_continuous(model: DGTContinuous, memory: NodeMemory | None, store: GraphStore,
                        queries: Sequence[tuple[int, int, int, Sequence[int]]]) -> list[np.ndarray]:
    """Edge probabilities per candidate for ``(head, relation, t, candidates)`` queries."""
    rq = [RankingQuery(i, h, r, "predict_tail", t, int(c[0]), np.asarray(c[1:], dtype=np.int64),
                       Quadruplet(h, r, int(c[0]), t))
          for i, (h, r, t, c) in enumerate(queries)]
    return ContinuousScorer(model, store, memory).score(rq)


@torch.no_grad()
def rollout_continuous(model: DGTContinuous, memory: NodeMemory | None, store: GraphStore,
                       from_t: int, m_steps: int, mode: str = "teacher_forced", top_k: int = 10):
    """Multi-step forecast starting at ``from_t``.

    ``teacher_forced`` feeds each step's observed edges into the memory;
    ``autoregressive`` feeds the top-k predicted edges instead, and neighbor
    lookups then see only observed history before ``from_t`` plus predictions.
    """
    from .discrete import StepForecast

    if m_steps < 0:
        raise ValueError("m_steps must be >= 0")
    if mode not in ("teacher_forced", "autoregressive"):
        raise ValueError("mode must be 'teacher_forced' or 'autoregressive'")
    model.eval()
    scorer = ContinuousScorer(model, store, memory)
    mem = scorer._advance(memory.copy() if memory is not None else None, from_t)
    view = store if mode == "teacher_forced" else store.truncated(from_t)
    predicted: list[Quadruplet] = []
    steps = []
    for s in range(m_steps):
        t = from_t + s
        snap = store.snapshot(t)
        pairs = sorted(set(zip(snap.heads.tolist(), snap.relations.tolist())))
        edges, scores = [], {}
        if pairs:
            cand_sets = {}
            for h, r in pairs:
                c = store.nodes_of_kind(store.tail_kind(r))
                cand_sets[(h, r)] = c[c != h]
            needed = np.unique(np.concatenate([np.array([h for h, _ in pairs])] + list(cand_sets.values())))
            z = model.embed(mem, view, needed, t)
            for h, r in pairs:
                cands = cand_sets[(h, r)]
                rows = torch.as_tensor(np.searchsorted(needed, cands))
                zk = z[int(np.searchsorted(needed, h))].expand(len(rows), -1)
                sc = model.edge_probability(zk, z[rows], r).double().numpy()
                scores[(h, r)] = (cands, sc)
                order = np.lexsort((cands, -sc))[:top_k]
                edges += [(h, r, int(cands[i]), float(sc[i])) for i in order]
        steps.append(StepForecast(t, edges, scores))
        if mode == "teacher_forced":
            fed = snap.quadruplets()
        else:
            fed = sorted({Quadruplet(h, r, c, t) for h, r, c, _ in edges},
                         key=lambda q: (q.time, q.head, q.relation, q.tail))
            predicted += fed
            view = build_store(store.nodes, list(store.truncated(from_t).events()) + predicted, store.schema)
        for b in stream_batches(fed, model.config.batch_window):
            mem = model.update_memory(mem, b)
        mem.horizon = float(t)
    return steps
