import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dygraft.ingest import (
    DatasetError,
    EdgeCategory,
    SplitSpec,
    SyntheticConfig,
    augment,
    categorize_edges,
    dataset_report,
    default_splits,
    generate_synthetic,
    load_dataset,
    part_mask,
    read_edges,
    simulate,
    write_edges,
    write_nodes,
)
from dygraft.store import NodeKind, Quadruplet, build_store

from conftest import COLLAB, EXPERTISE, PARTNER, make_nodes, random_store
from oracles import brute_augment, brute_categories

NODE_HEADER = "id\tkind\tcountry\tname\tsector\n"


def write_fixture(tmp_path, edges_text, nodes_text=None):
    nodes = tmp_path / "nodes.tsv"
    nodes.write_text(nodes_text or NODE_HEADER + "0\tscientist\tUS\ta\tacademic\n"
                     "1\tscientist\tDE\tb\tacademic\n2\tinstitution\tUK\tu\tacademic\n")
    edges = tmp_path / "edges.tsv"
    edges.write_text("head_id\trelation\ttail_id\ttime\n" + edges_text)
    return edges, nodes


class TestSplitSpec:
    def test_ordering_enforced(self):
        with pytest.raises(DatasetError):
            SplitSpec(3, 3, 5)

    def test_parts_are_disjoint_and_exhaustive(self):
        store = random_store(0, n_times=10)
        split = SplitSpec(5, 7, 9)
        masks = np.stack([part_mask(store, split, p) for p in ("train", "valid", "test")])
        assert (masks.sum(axis=0) == 1).all()

    def test_default_splits(self):
        assert default_splits(100).to_dict() == {"train_end": 69, "valid_end": 84, "test_end": 99}


class TestLoadDataset:
    def test_three_line_fixture(self, tmp_path):
        edges, nodes = write_fixture(tmp_path, "0\tcollab\t1\t0\n0\tpartner\t2\t1\n1\tpartner\t2\t2\n")
        store, split = load_dataset(edges, nodes, {"splits": {"train_end": 0, "valid_end": 1, "test_end": 2}})
        assert len(store) == 3
        rep = dataset_report(store, split)
        assert [rep["splits"][p]["n_events"] for p in ("train", "valid", "test")] == [1, 1, 1]
        assert rep["splits"]["test"]["active_nodes"] == {"scientist": 1, "institution": 1, "capability": 0}

    def test_bad_line_number(self, tmp_path):
        edges, nodes = write_fixture(tmp_path, "0\tcollab\tX\t0\n0\tpartner\t2\t1\n")
        with pytest.raises(DatasetError, match="line 2"):
            load_dataset(edges, nodes, {"splits": {"train_end": 0, "valid_end": 1, "test_end": 2}})

    def test_signature_error_names_line(self, tmp_path):
        edges, nodes = write_fixture(tmp_path, "0\tcollab\t1\t0\n0\tpartner\t1\t1\n")
        with pytest.raises(DatasetError, match="line 3"):
            load_dataset(edges, nodes, {"splits": {"train_end": 0, "valid_end": 1, "test_end": 2}})

    def test_split_outside_range(self, tmp_path):
        edges, nodes = write_fixture(tmp_path, "0\tcollab\t1\t0\n0\tpartner\t2\t9\n")
        with pytest.raises(DatasetError):
            load_dataset(edges, nodes, {"splits": {"train_end": 0, "valid_end": 1, "test_end": 2}})

    def test_missing_split_block(self, tmp_path):
        edges, nodes = write_fixture(tmp_path, "0\tcollab\t1\t0\n")
        with pytest.raises(DatasetError, match="splits"):
            load_dataset(edges, nodes, {})

    def test_round_trip(self, tmp_path):
        nodes, quads = simulate(SyntheticConfig(n_scientists=60, n_timesteps=40, newcomer_rate=0.2, seed=3))
        assert len(quads) > 10_000
        write_nodes(tmp_path / "n.tsv", nodes)
        write_edges(tmp_path / "e.tsv", quads)
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"splits": default_splits(40).to_dict()}))
        store, _ = load_dataset(tmp_path / "e.tsv", tmp_path / "n.tsv", cfg)
        assert store.events() == quads
        assert [n.metadata for n in store.nodes] == [n.metadata for n in nodes]


class TestCategories:
    def test_definitions(self):
        ev = [(0, COLLAB, 1, 0), (1, COLLAB, 2, 0), (0, COLLAB, 1, 2), (0, COLLAB, 2, 2), (0, COLLAB, 3, 2)]
        store = build_store(make_nodes(4, 0, 0), ev)
        cats = categorize_edges(store, SplitSpec(0, 1, 2), "test")
        assert cats[Quadruplet(0, COLLAB, 1, 2)] is EdgeCategory.TRANSDUCTIVE_REPEATED
        assert cats[Quadruplet(0, COLLAB, 2, 2)] is EdgeCategory.SEMI_TRANSDUCTIVE_FIRST_TIME
        assert cats[Quadruplet(0, COLLAB, 3, 2)] is EdgeCategory.INDUCTIVE

    def test_validation_newcomer_stays_unseen(self):
        ev = [(0, COLLAB, 1, 0), (0, COLLAB, 2, 1), (0, COLLAB, 2, 2)]
        store = build_store(make_nodes(3, 0, 0), ev)
        cats = categorize_edges(store, SplitSpec(0, 1, 2), "test")
        assert cats[Quadruplet(0, COLLAB, 2, 2)] is EdgeCategory.INDUCTIVE

    @settings(max_examples=15, deadline=None)
    @given(seed=st.integers(0, 10**6))
    def test_matches_two_pass_oracle(self, seed):
        store = random_store(seed, n_sci=30, n_inst=5, n_cap=8, n_events=400, n_times=12)
        split = SplitSpec(5, 8, 11)
        for part in ("valid", "test"):
            got = {tuple(q): c.value for q, c in categorize_edges(store, split, part).items()}
            lo, hi = split.bounds(part)
            assert got == brute_categories(store.events(), split.train_end, lo, hi)

    def test_no_newcomers_means_repeated(self):
        nodes, quads = simulate(SyntheticConfig(n_scientists=20, n_timesteps=20, newcomer_rate=0.0,
                                                repeat_prob=1.0, seed=1))
        store = build_store(nodes, quads)
        cats = categorize_edges(store, default_splits(20), "test")
        assert {c for q, c in cats.items() if q.relation == COLLAB} == {EdgeCategory.TRANSDUCTIVE_REPEATED}


class TestAugment:
    def test_first_event_is_newcomer(self):
        store = build_store(make_nodes(2, 1, 0), [(0, PARTNER, 2, 0), (0, PARTNER, 2, 1), (1, PARTNER, 2, 1)])
        lab = augment(store)
        assert lab.head_incumbent.tolist() == [False, True, False]
        assert lab.tail_is_new_partner.tolist() == [True, False, True]
        assert not lab.tail_is_new_capability.any()

    def test_matches_chronological_scan(self):
        store = random_store(11, n_events=150)
        lab = augment(store)
        ev = store.events()
        for i, (hi, ti, new_pair) in enumerate(brute_augment(ev)):
            assert lab.head_incumbent[i] == hi
            assert lab.tail_incumbent[i] == ti
            assert lab.tail_is_new_partner[i] == (new_pair and ev[i].relation == PARTNER)
            assert lab.tail_is_new_capability[i] == (new_pair and ev[i].relation == EXPERTISE)


class TestSynthetic:
    def test_same_seed_same_files(self, tmp_path):
        cfg = {"n_scientists": 15, "n_timesteps": 10, "clique_size": 5, "newcomer_rate": 0.3, "seed": 4}
        a = generate_synthetic(cfg, tmp_path / "a")
        b = generate_synthetic(cfg, tmp_path / "b")
        for x, y in zip(a, b):
            assert x.read_bytes() == y.read_bytes()

    def test_unknown_key(self, tmp_path):
        with pytest.raises(DatasetError, match="unknown"):
            generate_synthetic({"n_nodes": 3}, tmp_path)

    def test_invalid_probability(self):
        with pytest.raises(DatasetError):
            SyntheticConfig(repeat_prob=1.5)

    def test_clique_recurrence_rate(self):
        cfg = SyntheticConfig(n_scientists=10, n_timesteps=200, clique_size=5, repeat_prob=0.9, seed=5)
        _, quads = simulate(cfg)
        times = {q.time for q in quads if q.relation == COLLAB and q.head == 0 and q.tail == 1}
        assert len(times) / cfg.n_timesteps >= 0.85

    def test_newcomers_attach_to_incumbents(self):
        cfg = SyntheticConfig(n_scientists=20, n_timesteps=20, clique_size=5, newcomer_rate=0.5, seed=2)
        nodes, quads = simulate(cfg)
        store = build_store(nodes, quads)
        n_inc = cfg.n_cliques * cfg.clique_size
        newcomers = [n.id for n in nodes if n.kind == NodeKind.SCIENTIST and n.id >= n_inc]
        assert newcomers
        for s in newcomers:
            first = [q for q in quads if q.relation == COLLAB and s in (q.head, q.tail)][0]
            mentor = first.tail if first.head == s else first.head
            assert store.first_seen[mentor] < first.time

    def test_capabilities_persist(self):
        _, quads = simulate(SyntheticConfig(n_scientists=10, n_timesteps=30, clique_size=5, seed=6))
        caps: dict[int, set[int]] = {}
        for q in quads:
            if q.relation == EXPERTISE:
                caps.setdefault(q.head, set()).add(q.tail)
        assert all(1 <= len(c) <= 2 for c in caps.values())
