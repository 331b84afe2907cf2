"""Single-file, versioned checkpoints for both model kinds."""
from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Any

import torch

from .continuous import ContinuousModelConfig, DGTContinuous, NodeMemory
from .discrete import DGTDiscrete, DiscreteModelConfig
from .store import GraphStore
from .training import OptimConfig

FORMAT_VERSION = 1
MODEL_KINDS = {
    "dgt_d": (DGTDiscrete, DiscreteModelConfig),
    "dgt_c": (DGTContinuous, ContinuousModelConfig),
}


class CheckpointError(ValueError):
    """Unreadable checkpoint, unknown version, or config mismatch."""


@dataclass
class Checkpoint:
    kind: str
    model_config: dict[str, Any]
    optim_config: dict[str, Any]
    state_dict: dict[str, torch.Tensor]
    optimizer: dict[str, Any] | None
    epoch: int
    loss_curve: list[float]
    memory: dict[str, Any] | None = None
    store_fingerprint: str | None = None

    def build_model(self, store: GraphStore):
        """Instantiate the model for ``store`` and load the saved weights."""
        model_cls, cfg_cls = MODEL_KINDS[self.kind]
        model = model_cls.for_store(store, cfg_cls(**self.model_config))
        model = model.to(OptimConfig(**self.optim_config).torch_dtype)
        try:
            model.load_state_dict(self.state_dict)
        except RuntimeError as exc:
            raise CheckpointError(f"checkpoint does not fit this dataset: {exc}") from exc
        model.eval()
        return model

    def node_memory(self) -> NodeMemory | None:
        return None if self.memory is None else NodeMemory.from_state_dict(self.memory)


def save_checkpoint(
    path: str | os.PathLike,
    kind: str,
    model,
    optim: OptimConfig,
    optimizer: torch.optim.Optimizer | None,
    epoch: int,
    loss_curve: list[float],
    memory: NodeMemory | None = None,
    store: GraphStore | None = None,
) -> None:
    if kind not in MODEL_KINDS:
        raise CheckpointError(f"unknown model kind {kind!r}")
    payload = {
        "format_version": FORMAT_VERSION,
        "kind": kind,
        "model_config": model.config.to_dict(),
        "optim_config": optim.to_dict(),
        "state_dict": {k: v.detach().clone() for k, v in model.state_dict().items()},
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
        "epoch": int(epoch),
        "loss_curve": [float(x) for x in loss_curve],
        "memory": memory.state_dict() if memory is not None else None,
        "store_fingerprint": store.fingerprint() if store is not None else None,
    }
    tmp = f"{os.fspath(path)}.tmp"
    torch.save(payload, tmp)
    os.replace(tmp, path)


def load_checkpoint(
    path: str | os.PathLike,
    kind: str | None = None,
    model_config: dict[str, Any] | None = None,
) -> Checkpoint:
    """Read a checkpoint; ``kind`` / ``model_config`` must match when given.

    ``model_config`` is compared after filling in defaults, so a config
    block that only spells out some fields still matches.
    """
    try:
        raw = torch.load(path, map_location="cpu", weights_only=True)
    except FileNotFoundError:
        raise
    except Exception as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(raw, dict) or raw.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint format "
                              f"{raw.get('format_version') if isinstance(raw, dict) else None!r}")
    if raw["kind"] not in MODEL_KINDS:
        raise CheckpointError(f"{path}: unknown model kind {raw['kind']!r}")
    if kind is not None and raw["kind"] != kind:
        raise CheckpointError(f"{path}: checkpoint holds a {raw['kind']} model, config asks for {kind}")
    if model_config is not None:
        cfg_cls = MODEL_KINDS[raw["kind"]][1]
        wanted = cfg_cls(**model_config).to_dict()
        if wanted != raw["model_config"]:
            diff = sorted(k for k in wanted if wanted[k] != raw["model_config"].get(k))
            raise CheckpointError(f"{path}: model config mismatch in {diff}")
    return Checkpoint(
        kind=raw["kind"],
        model_config=raw["model_config"],
        optim_config=raw["optim_config"],
        state_dict=raw["state_dict"],
        optimizer=raw["optimizer"],
        epoch=raw["epoch"],
        loss_curve=list(raw["loss_curve"]),
        memory=raw["memory"],
        store_fingerprint=raw["store_fingerprint"],
    )
