"""Discrete-time dynamic graph transformer (DGT-D).

Each snapshot is encoded by relational graph convolutions into per-node
states and a max-pooled global state. A causal Transformer (or a GRU, for
the recurrent ablation) reads the last ``n_history`` global and query-node
states and produces a context vector; a per-relation projection of that
context scores candidate tails by dot product.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .evaluation import RankingQuery
from .ingest import SplitSpec
from .layers import TransformerBlock, causal_mask
from .store import GraphStore, NodeKind, Snapshot
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

SEQUENCE_LAYERS = ("transformer", "recurrent")


@dataclass(frozen=True)
class DiscreteModelConfig:
    d: int = 200
    n_history: int = 10
    rgcn_layers: int = 2
    n_heads: int = 4
    n_encoder_layers: int = 2
    sequence_layer: str = "transformer"
    dropout: float = 0.0
    granularity: int = 1
    n_negatives: int = 64

    def __post_init__(self):
        if self.d % self.n_heads:
            raise ConfigError(f"d={self.d} is not divisible by n_heads={self.n_heads}")
        if self.n_history < 1 or self.rgcn_layers < 1 or self.n_encoder_layers < 1:
            raise ConfigError("n_history, rgcn_layers and n_encoder_layers must be >= 1")
        if self.sequence_layer not in SEQUENCE_LAYERS:
            raise ConfigError(f"sequence_layer must be one of {SEQUENCE_LAYERS}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must be in [0, 1)")
        if self.granularity < 1 or self.n_negatives < 1:
            raise ConfigError("granularity and n_negatives must be >= 1")

    def to_dict(self):
        return asdict(self)


@dataclass
class SnapshotEncoding:
    t: int
    nodes: np.ndarray  # sorted active node ids
    H_N: torch.Tensor  # [len(nodes), d]
    H_G: torch.Tensor  # [d]

    def rows_for(self, query: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Row index per query node and whether the node is active."""
        if len(self.nodes) == 0:
            return np.zeros(len(query), dtype=np.int64), np.zeros(len(query), dtype=bool)
        idx = np.minimum(np.searchsorted(self.nodes, query), len(self.nodes) - 1)
        return idx, self.nodes[idx] == query


class RGCNLayer(nn.Module):
    """Per-relation linear maps, mean over same-relation neighbors, self-loop, tanh."""

    def __init__(self, d: int, n_relations: int):
        super().__init__()
        self.n_relations = n_relations
        self.weight = nn.Parameter(torch.empty(n_relations, d, d))
        self.self_loop = nn.Linear(d, d)
        nn.init.xavier_uniform_(self.weight.view(n_relations * d, d))
        self.weight.data.mul_(np.sqrt(n_relations))

    def forward(self, h, src, dst, rel):
        n = h.shape[0]
        out = self.self_loop(h)
        if len(src):
            # messages W_r h_src, normalized by |N_dst^r|
            msg = torch.einsum("ed,edf->ef", h[src], self.weight[rel])
            key = dst * self.n_relations + rel
            counts = torch.bincount(key, minlength=n * self.n_relations).to(h.dtype)
            msg = msg / counts[key].unsqueeze(-1)
            out = out.index_add(0, dst, msg)
        return torch.tanh(out)


class DGTDiscrete(nn.Module):
    def __init__(
        self,
        node_kinds: Sequence[int],
        relation_tail_kinds: Sequence[int],
        config: DiscreteModelConfig,
        n_kinds: int = len(NodeKind),
    ):
        super().__init__()
        self.config = config
        d, R = config.d, len(relation_tail_kinds)
        self.n_relations = R
        self.register_buffer("kinds", torch.as_tensor(np.asarray(node_kinds), dtype=torch.long))
        self.register_buffer("rel_tail_kind", torch.as_tensor(np.asarray(relation_tail_kinds), dtype=torch.long))
        n_nodes = len(node_kinds)
        self.node_emb = nn.Embedding(n_nodes, d)
        self.kind_emb = nn.Embedding(n_kinds, d)
        nn.init.normal_(self.node_emb.weight, std=d ** -0.5)
        nn.init.normal_(self.kind_emb.weight, std=d ** -0.5)
        self.rgcn = nn.ModuleList(RGCNLayer(d, R) for _ in range(config.rgcn_layers))
        self.absent = nn.Parameter(torch.randn(d) * d ** -0.5)
        self.default_context = nn.Parameter(torch.zeros(d))
        self.query_proj = nn.Linear(d, d, bias=False)
        if config.sequence_layer == "transformer":
            self.type_emb = nn.Parameter(torch.randn(2, d) * d ** -0.5)
            self.lag_emb = nn.Parameter(torch.randn(config.n_history, d) * d ** -0.5)
            self.blocks = nn.ModuleList(
                TransformerBlock(d, config.n_heads, 2 * d, config.dropout)
                for _ in range(config.n_encoder_layers)
            )
        else:
            self.gru = nn.GRUCell(2 * d, d)
        self.out_w = nn.Parameter(torch.empty(R, d, d))
        self.out_b = nn.Parameter(torch.zeros(R, d))
        nn.init.xavier_uniform_(self.out_w.view(R * d, d))
        self.out_w.data.mul_(np.sqrt(R))
        self.drop = nn.Dropout(config.dropout)

    @classmethod
    def for_store(cls, store: GraphStore, config: DiscreteModelConfig) -> "DGTDiscrete":
        return cls(store.kinds, [int(store.tail_kind(r)) for r in range(store.n_relations)], config)

    # -- encoders ---------------------------------------------------------

    def node_input(self, nodes: torch.Tensor) -> torch.Tensor:
        return self.node_emb(nodes) + self.kind_emb(self.kinds[nodes])

    def encode_snapshots(self, snapshots: Sequence[Snapshot]) -> list[SnapshotEncoding]:
        """Encode several snapshots as one disjoint union graph."""
        nb = self.n_relations // 2
        actives, src, dst, rel = [], [], [], []
        offset = 0
        for snap in snapshots:
            active = snap.active_nodes()
            hi = np.searchsorted(active, snap.heads) + offset
            ti = np.searchsorted(active, snap.tails) + offset
            src += [hi, ti]
            dst += [ti, hi]
            rel += [snap.relations, snap.relations + nb]
            actives.append(active)
            offset += len(active)
        dev = self.node_emb.weight.device
        all_nodes = torch.as_tensor(np.concatenate(actives) if actives else np.zeros(0, np.int64), device=dev)
        h = self.drop(self.node_input(all_nodes))
        if rel:
            s = torch.as_tensor(np.concatenate(src), device=dev)
            t = torch.as_tensor(np.concatenate(dst), device=dev)
            r = torch.as_tensor(np.concatenate(rel), device=dev)
        else:
            s = t = r = torch.zeros(0, dtype=torch.long, device=dev)
        for layer in self.rgcn:
            h = layer(h, s, t, r)
        out, start = [], 0
        for snap, active in zip(snapshots, actives):
            hn = h[start:start + len(active)]
            start += len(active)
            hg = hn.max(dim=0).values if len(active) else h.new_zeros(self.config.d)
            out.append(SnapshotEncoding(snap.time, active, hn, hg))
        return out

    def encode_snapshot(self, snapshot: Snapshot) -> SnapshotEncoding:
        return self.encode_snapshots([snapshot])[0]

    def encode_history(self, encodings: Sequence[SnapshotEncoding], query_nodes) -> torch.Tensor:
        """Context vectors ``[B, d]`` for ``query_nodes`` given ascending encodings.

        The transformer variant reads ``[H_G(oldest)..H_G(latest),
        H_N(oldest)..H_N(latest)]`` under a causal mask and returns the last
        position. An empty history yields the learned default context. Every
        context also carries a projection of the query node's own embedding.
        """
        q = np.asarray(query_nodes, dtype=np.int64)
        dev = self.node_emb.weight.device
        qt = torch.as_tensor(q, device=dev)
        B, L, d = len(q), len(encodings), self.config.d
        if L > self.config.n_history:
            raise ValueError(f"history of length {L} exceeds n_history={self.config.n_history}")
        if any(a.t >= b.t for a, b in zip(encodings, encodings[1:])):
            raise ValueError("encodings must be sorted by time")
        own = self.query_proj(self.node_input(qt))
        if L == 0:
            return self.default_context.expand(B, d) + own
        glob = torch.stack([e.H_G for e in encodings])  # [L, d]
        local = []
        for e in encodings:
            rows, present = e.rows_for(q)
            rows_t = torch.as_tensor(rows, device=dev)
            pres_t = torch.as_tensor(present, device=dev).unsqueeze(-1)
            hn = e.H_N[rows_t] if len(e.nodes) else glob.new_zeros(B, d)
            local.append(torch.where(pres_t, hn, self.absent.expand(B, d)))
        local = torch.stack(local, dim=1)  # [B, L, d]
        if self.config.sequence_layer == "recurrent":
            h = glob.new_zeros(B, d)
            for i in range(L):
                h = self.gru(torch.cat([glob[i].expand(B, d), local[:, i]], dim=-1), h)
            return h + own
        lags = self.lag_emb[torch.arange(L - 1, -1, -1, device=dev)]
        tokens = torch.cat([
            (glob + lags + self.type_emb[0]).expand(B, L, d),
            local + lags + self.type_emb[1],
        ], dim=1)
        mask = causal_mask(2 * L).to(dev)
        x = tokens
        for block in self.blocks:
            x = block(x, mask)
        return x[:, -1] + own

    def score_tails(self, context: torch.Tensor, relations, candidates) -> torch.Tensor:
        """Scores ``[B, C]``: per-relation projection of context · candidate embedding."""
        dev = context.device
        rel = torch.as_tensor(np.asarray(relations), dtype=torch.long, device=dev).reshape(-1)
        cand = torch.as_tensor(np.asarray(candidates), dtype=torch.long, device=dev)
        if cand.dim() == 1:
            cand = cand.unsqueeze(0).expand(len(rel), -1)
        if cand.shape[1] == 0:
            raise ValueError("candidate list is empty")
        if not torch.equal(self.kinds[cand], self.rel_tail_kind[rel].unsqueeze(-1).expand_as(cand)):
            raise ValueError("candidate kind does not match the relation's tail kind")
        proj = torch.einsum("bd,bde->be", context, self.out_w[rel]) + self.out_b[rel]
        return (self.node_input(cand) * proj.unsqueeze(1)).sum(-1)


# -- history helpers ---------------------------------------------------------

def history_times(store: GraphStore, t: int, config: DiscreteModelConfig) -> list[int]:
    """The window ``t - N*g .. t - g`` clipped to the start of the data."""
    rng = store.time_range
    if rng is None:
        return []
    g = config.granularity
    return [t - k * g for k in range(config.n_history, 0, -1) if t - k * g >= rng[0]]


def _snapshot_for(store: GraphStore, t: int, overrides: dict[int, Snapshot] | None) -> Snapshot:
    if overrides and t in overrides:
        return overrides[t]
    return store.snapshot(t)


def contexts_at(model: DGTDiscrete, store: GraphStore, t: int, known: np.ndarray,
                overrides: dict[int, Snapshot] | None = None) -> torch.Tensor:
    times = history_times(store, t, model.config)
    encs = model.encode_snapshots([_snapshot_for(store, x, overrides) for x in times])
    return model.encode_history(encs, known)


def _queries_at(store: GraphStore, t: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(known, relation, positive) for tail and mirrored head prediction at t."""
    snap = store.snapshot(t)
    nb = store.schema.n_base
    known = np.concatenate([snap.heads, snap.tails])
    rel = np.concatenate([snap.relations, snap.relations + nb])
    pos = np.concatenate([snap.tails, snap.heads])
    return known, rel, pos


def batch_loss(model: DGTDiscrete, store: GraphStore, targets: Sequence[int],
               rng: np.random.Generator, banned: TripleIndex | None) -> torch.Tensor:
    """Mean cross-entropy of true tails against sampled negatives.

    History snapshots are ground truth (teacher forcing) and encoded once
    for the whole group of target timesteps.
    """
    cfg = model.config
    windows = {t: history_times(store, t, cfg) for t in targets}
    needed = sorted({x for w in windows.values() for x in w})
    encs = dict(zip(needed, model.encode_snapshots([store.snapshot(x) for x in needed])))
    losses, count = [], 0
    for t in targets:
        known, rel, pos = _queries_at(store, t)
        if len(known) == 0:
            continue
        negs, valid = sample_negatives(rng, store, known, rel, cfg.n_negatives, banned)
        ctx = model.encode_history([encs[x] for x in windows[t]], known)
        cands = np.concatenate([pos[:, None], negs], axis=1)
        scores = model.score_tails(ctx, rel, cands)
        mask = torch.as_tensor(np.concatenate([np.ones((len(pos), 1), bool), valid], axis=1),
                               device=scores.device)
        scores = scores.masked_fill(~mask, float("-inf"))
        losses.append(-F.log_softmax(scores, dim=-1)[:, 0].sum())
        count += len(known)
    if not losses:
        return model.default_context.sum() * 0.0
    return torch.stack(losses).sum() / count


def train_discrete(
    store: GraphStore,
    split: SplitSpec,
    config: DiscreteModelConfig,
    optim: OptimConfig,
    model: DGTDiscrete | None = None,
    optimizer_state: dict | None = None,
    start_epoch: int = 0,
    loss_curve: list[float] | None = None,
    on_checkpoint: Callable[[int, DGTDiscrete, torch.optim.Optimizer, list[float]], None] | None = None,
) -> tuple[DGTDiscrete, list[float], torch.optim.Optimizer]:
    """Fit DGT-D on the training part of ``store``.

    Returns the model, the per-epoch mean loss and the optimizer (for
    resuming). ``start_epoch`` / ``loss_curve`` / ``optimizer_state``
    continue an earlier run.
    """
    train_times = [t for t in store.timestamps if t <= split.train_end]
    if len(train_times) < config.n_history + 1:
        raise ValueError(f"need at least n_history+1={config.n_history + 1} training timesteps, "
                         f"have {len(train_times)}")
    torch.manual_seed(subsystem_seed(optim.seed, "dgt_d.init"))
    if model is None:
        model = DGTDiscrete.for_store(store, config).to(optim.torch_dtype)
    opt = torch.optim.Adam(model.parameters(), lr=optim.lr, weight_decay=optim.weight_decay)
    if optimizer_state is not None:
        opt.load_state_dict(optimizer_state)
    banned = TripleIndex(store, store.times <= split.train_end)
    losses = list(loss_curve or [])
    targets = train_times[1:]
    counts = {t: 2 * len(store.snapshot(t)) for t in targets}

    for epoch in range(start_epoch, optim.epochs):
        rng = np.random.default_rng(subsystem_seed(optim.seed, f"dgt_d.epoch{epoch}"))
        torch.manual_seed(subsystem_seed(optim.seed, f"dgt_d.dropout{epoch}"))
        order = [targets[i] for i in rng.permutation(len(targets))]
        chunks, cur, size = [], [], 0
        for t in order:
            cur.append(t)
            size += counts[t]
            if size >= optim.batch_size:
                chunks.append(cur)
                cur, size = [], 0
        if cur:
            chunks.append(cur)
        model.train()
        total, n = 0.0, 0
        for chunk in chunks:
            opt.zero_grad()
            loss = batch_loss(model, store, chunk, rng, banned)
            check_finite(loss, f"epoch {epoch}, timesteps {chunk[:3]}")
            loss.backward()
            if optim.grad_clip > 0:
                nn.utils.clip_grad_norm_(model.parameters(), optim.grad_clip)
            opt.step()
            w = sum(counts[t] for t in chunk)
            total += loss.item() * w
            n += w
        losses.append(total / max(n, 1))
        log.info("dgt_d epoch %d loss %.5f", epoch, losses[-1])
        if on_checkpoint and optim.checkpoint_every and (epoch + 1) % optim.checkpoint_every == 0:
            on_checkpoint(epoch + 1, model, opt, losses)
    model.eval()
    return model, losses, opt


# -- inference ---------------------------------------------------------------

class DiscreteScorer:
    """Frozen-parameter scorer over ground-truth history."""

    def __init__(self, model: DGTDiscrete, store: GraphStore):
        self.model = model
        self.store = store

    def state_fingerprint(self) -> str:
        return parameter_fingerprint(self.model)

    @torch.no_grad()
    def score(self, queries: Sequence[RankingQuery]) -> list[np.ndarray]:
        self.model.eval()
        out: list[np.ndarray | None] = [None] * len(queries)
        by_t: dict[int, list[int]] = {}
        for i, q in enumerate(queries):
            by_t.setdefault(q.t, []).append(i)
        for t, idx in sorted(by_t.items()):
            known = np.array([queries[i].known for i in idx])
            ctx = contexts_at(self.model, self.store, t, known)
            for j, i in enumerate(idx):
                q = queries[i]
                s = self.model.score_tails(ctx[j:j + 1], [q.relation], q.candidates[None, :])
                out[i] = s[0].double().cpu().numpy()
        return out


@dataclass
class StepForecast:
    t: int
    edges: list[tuple[int, int, int, float]]  # (head, relation, tail, score)
    scores: dict[tuple[int, int], tuple[np.ndarray, np.ndarray]]  # (head, rel) -> (candidates, scores)


@torch.no_grad()
def rollout_discrete(
    model: DGTDiscrete,
    store: GraphStore,
    from_t: int,
    m_steps: int,
    mode: str = "teacher_forced",
    top_k: int = 10,
) -> list[StepForecast]:
    """Forecast ``m_steps`` consecutive snapshots starting at ``from_t``.

    Queries at each step are the observed ``(head, relation)`` pairs. In
    ``autoregressive`` mode the top-k predicted tails per query replace the
    ground truth snapshot in the history of later steps.
    """
    if m_steps < 0:
        raise ValueError("m_steps must be >= 0")
    if mode not in ("teacher_forced", "autoregressive"):
        raise ValueError("mode must be 'teacher_forced' or 'autoregressive'")
    model.eval()
    g = model.config.granularity
    overrides: dict[int, Snapshot] = {}
    steps = []
    for s in range(m_steps):
        t = from_t + s * g
        snap = store.snapshot(t)
        pairs = sorted(set(zip(snap.heads.tolist(), snap.relations.tolist())))
        edges, scores = [], {}
        if pairs:
            known = np.array([p[0] for p in pairs])
            ctx = contexts_at(model, store, t, known, overrides if mode == "autoregressive" else None)
            for j, (h, r) in enumerate(pairs):
                cands = store.nodes_of_kind(store.tail_kind(r))
                cands = cands[cands != h]
                sc = model.score_tails(ctx[j:j + 1], [r], cands[None, :])[0].double().cpu().numpy()
                scores[(h, r)] = (cands, sc)
                order = np.lexsort((cands, -sc))[:top_k]
                edges += [(h, r, int(cands[i]), float(sc[i])) for i in order]
        steps.append(StepForecast(t, edges, scores))
        if mode == "autoregressive":
            arr = np.array([(h, r, c) for h, r, c, _ in edges], dtype=np.int64).reshape(-1, 3)
            overrides[t] = Snapshot(t, arr[:, 0], arr[:, 1], arr[:, 2])
    return steps
