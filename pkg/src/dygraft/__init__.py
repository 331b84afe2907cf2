"""Forecasting future edges in dynamic heterogeneous academic graphs."""
from .store import GraphStore, NodeKind, NodeRecord, Quadruplet, build_store

__version__ = "0.1.0"

__all__ = ["GraphStore", "NodeKind", "NodeRecord", "Quadruplet", "build_store", "__version__"]
