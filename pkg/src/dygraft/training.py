"""Training plumbing shared by both models: optimizer config, seeding,
negative sampling against known triples."""
from __future__ import annotations

import hashlib
import os
from dataclasses import asdict, dataclass, fields
from typing import Any, Mapping

import numpy as np
import torch

from .store import GraphStore

DTYPES = {"float32": torch.float32, "float64": torch.float64}


class TrainingDivergence(RuntimeError):
    """Raised when a training loss becomes non-finite."""


class ConfigError(ValueError):
    pass


def config_from_mapping(cls, data: Mapping[str, Any] | None):
    """Build a config dataclass, rejecting unknown keys."""
    data = dict(data or {})
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"{cls.__name__}: unknown keys {sorted(unknown)}")
    return cls(**data)


@dataclass(frozen=True)
class OptimConfig:
    lr: float = 1e-3
    epochs: int = 20
    batch_size: int = 1024
    weight_decay: float = 0.0
    grad_clip: float = 1.0
    seed: int = 0
    checkpoint_every: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        if self.lr <= 0 or self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("lr must be > 0, epochs >= 0, batch_size >= 1")
        if self.dtype not in DTYPES:
            raise ConfigError(f"dtype must be one of {sorted(DTYPES)}")

    @property
    def torch_dtype(self) -> torch.dtype:
        return DTYPES[self.dtype]

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


def apply_thread_cap() -> None:
    cap = os.environ.get("DYGRAFT_THREADS")
    if cap:
        torch.set_num_threads(max(1, int(cap)))


def subsystem_seed(seed: int, name: str) -> int:
    """Derive a stable per-subsystem seed from the run seed."""
    digest = hashlib.sha256(f"{seed}:{name}".encode()).digest()
    return int.from_bytes(digest[:4], "little")


def parameter_fingerprint(module: torch.nn.Module) -> str:
    h = hashlib.sha256()
    for name, tensor in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def check_finite(loss: torch.Tensor, where: str) -> None:
    if not torch.isfinite(loss):
        raise TrainingDivergence(f"non-finite loss ({loss.item()}) at {where}")


class TripleIndex:
    """Membership test for ``(known, relation, candidate)`` triples.

    Holds every event in the given mask in both base and mirrored form.
    """

    def __init__(self, store: GraphStore, mask: np.ndarray | None = None):
        if mask is None:
            mask = np.ones(len(store), dtype=bool)
        self.n = store.n_nodes
        self.r = store.n_relations
        nb = store.schema.n_base
        h, rel, t = store.heads[mask], store.relations[mask], store.tails[mask]
        keys = np.concatenate([self.key(h, rel, t), self.key(t, rel + nb, h)])
        self.keys = np.unique(keys)

    def key(self, known, relation, cand):
        return (np.asarray(known, dtype=np.int64) * self.r + relation) * self.n + cand

    def contains(self, known, relation, cand) -> np.ndarray:
        k = self.key(known, relation, cand)
        pos = np.searchsorted(self.keys, k)
        pos = np.minimum(pos, len(self.keys) - 1)
        return (self.keys[pos] == k) if len(self.keys) else np.zeros(np.shape(k), dtype=bool)


def sample_negatives(
    rng: np.random.Generator,
    store: GraphStore,
    known: np.ndarray,
    relations: np.ndarray,
    k: int,
    banned: TripleIndex | None,
    rounds: int = 3,
) -> tuple[np.ndarray, np.ndarray]:
    """Uniform kind-compatible corrupted candidates.

    Returns ``(candidates [Q, k], valid [Q, k])``. Draws that hit a banned
    triple or the known node are redrawn a few times and masked out if they
    still collide.
    """
    q = len(known)
    out = np.zeros((q, k), dtype=np.int64)
    tail_kinds = np.array([int(store.tail_kind(int(r))) for r in range(store.n_relations)])
    qkinds = tail_kinds[relations]
    for kind in np.unique(qkinds):
        rows = np.flatnonzero(qkinds == kind)
        pool = store.nodes_of_kind(int(kind))
        out[rows] = pool[rng.integers(len(pool), size=(len(rows), k))]

    def bad(cands):
        b = cands == known[:, None]
        if banned is not None:
            b |= banned.contains(known[:, None], relations[:, None], cands)
        return b

    invalid = bad(out)
    for _ in range(rounds):
        if not invalid.any():
            break
        rr, cc = np.nonzero(invalid)
        for kind in np.unique(qkinds[rr]):
            sel = qkinds[rr] == kind
            pool = store.nodes_of_kind(int(kind))
            out[rr[sel], cc[sel]] = pool[rng.integers(len(pool), size=int(sel.sum()))]
        invalid = bad(out)
    return out, ~invalid
