import numpy as np
import pytest
import torch

from dygraft.ingest import SyntheticConfig, default_splits, simulate
from dygraft.store import NodeKind, NodeRecord, Quadruplet, build_store

COLLAB, PARTNER, EXPERTISE = 0, 1, 2


def make_nodes(n_sci=4, n_inst=1, n_cap=1, features=None):
    nodes = []
    for i in range(n_sci):
        nodes.append(NodeRecord(i, NodeKind.SCIENTIST, {"country": "US" if i % 2 else "DE",
                                                        "name": f"s{i}", "sector": "academic"}))
    for i in range(n_inst):
        nodes.append(NodeRecord(n_sci + i, NodeKind.INSTITUTION, {"country": "UK", "name": f"i{i}",
                                                                  "sector": "academic"}))
    for i in range(n_cap):
        nodes.append(NodeRecord(n_sci + n_inst + i, NodeKind.CAPABILITY, {"country": "", "name": f"c{i}",
                                                                          "sector": ""}))
    return nodes


def random_events(rng, n_sci, n_inst, n_cap, n_events, n_times):
    """Signature-valid random quadruplets over the ``make_nodes`` id layout."""
    out = []
    while len(out) < n_events:
        r = int(rng.integers(3))
        h = int(rng.integers(n_sci))
        if r == COLLAB:
            t = int(rng.integers(n_sci))
            if t == h:
                continue
        elif r == PARTNER:
            t = n_sci + int(rng.integers(n_inst))
        else:
            t = n_sci + n_inst + int(rng.integers(n_cap))
        out.append(Quadruplet(h, r, t, int(rng.integers(n_times))))
    return out


def random_store(seed, n_sci=12, n_inst=3, n_cap=4, n_events=200, n_times=10):
    rng = np.random.default_rng(seed)
    return build_store(make_nodes(n_sci, n_inst, n_cap), random_events(rng, n_sci, n_inst, n_cap, n_events, n_times))


@pytest.fixture
def tiny_store():
    """Five scientists, one institution, one capability over four steps."""
    ev = [
        Quadruplet(0, COLLAB, 1, 0), Quadruplet(0, PARTNER, 5, 0), Quadruplet(1, COLLAB, 2, 1),
        Quadruplet(2, EXPERTISE, 6, 1), Quadruplet(0, COLLAB, 1, 2), Quadruplet(3, COLLAB, 0, 2),
        Quadruplet(1, PARTNER, 5, 3), Quadruplet(4, COLLAB, 2, 3),
    ]
    return build_store(make_nodes(5, 1, 1), ev)


@pytest.fixture(scope="session")
def clique_data():
    cfg = SyntheticConfig(n_scientists=20, n_institutions=3, n_capabilities=5, n_timesteps=16,
                          clique_size=4, newcomer_rate=0.2, repeat_prob=0.9, seed=7)
    nodes, quads = simulate(cfg)
    return build_store(nodes, quads), default_splits(cfg.n_timesteps)


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
