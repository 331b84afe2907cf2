import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dygraft.evaluation import (
    ConstantScorer,
    EvaluationError,
    FrequencyScorer,
    MetricReport,
    OracleScorer,
    RandomScorer,
    RankingQuery,
    RankingResult,
    RecencyScorer,
    build_queries,
    evaluate,
    expected_random_mrr,
    rank,
    summarize,
    write_results_tsv,
)
from dygraft.ingest import SplitSpec, augment, categorize_edges
from dygraft.store import ACADEMIC_SCHEMA, NodeKind, Quadruplet, build_store

from conftest import COLLAB, make_nodes, random_store
from oracles import random_mrr, sort_rank


def synthetic_queries(n, n_candidates=201):
    """Queries over a dummy event, only their candidate counts matter."""
    ev = Quadruplet(0, 0, 1, 0)
    return [RankingQuery(i, 0, 0, "predict_tail", 0, 1, np.arange(2, n_candidates + 1), ev) for i in range(n)]


class TestRank:
    def test_unique_max(self):
        s = np.zeros(201)
        s[0] = 1.0
        assert rank(s) == 1.0

    def test_all_equal(self):
        r = rank(np.ones(201))
        assert r == 101.0
        assert abs(1 / r - 0.0099) < 1e-4

    def test_non_finite(self):
        with pytest.raises(EvaluationError):
            rank([1.0, float("nan")])
        with pytest.raises(EvaluationError):
            rank([float("inf"), 0.0])

    @settings(max_examples=300, deadline=None)
    @given(st.lists(st.integers(0, 5), min_size=1, max_size=30), st.data())
    def test_matches_sort_oracle_with_ties(self, scores, data):
        i = data.draw(st.integers(0, len(scores) - 1))
        assert rank(scores, i) == sort_rank([float(s) for s in scores], i)


class TestBuildQueries:
    def test_exactly_200_pre_filter(self):
        nodes = make_nodes(201, 0, 0)
        store = build_store(nodes, [(0, COLLAB, 1, 0), (2, COLLAB, 3, 1), (4, COLLAB, 5, 2)])
        from dygraft.evaluation import negative_pool
        assert len(negative_pool(store, 0, COLLAB, 1)) == 200

    def test_invariants(self):
        store = random_store(3, n_sci=40, n_inst=6, n_cap=9, n_events=600, n_times=12)
        split = SplitSpec(5, 8, 11)
        queries = build_queries(store, split, "test", seed=1, n_negatives=20)
        n_test = int(((store.times > 8) & (store.times <= 11)).sum())
        assert len(queries) == 2 * n_test
        for q in queries:
            negs = q.negatives
            assert q.positive not in negs
            assert q.known not in negs
            assert len(set(negs.tolist())) == len(negs)
            assert (store.kinds[q.candidates] == store.tail_kind(q.relation)).all()
            assert not (set(negs.tolist()) & store.true_tails(q.known, q.relation))

    def test_head_queries_use_inverse(self, tiny_store):
        split = SplitSpec(1, 2, 3)
        qs = build_queries(tiny_store, split, "test", seed=0)
        heads = [q for q in qs if q.direction == "predict_head"]
        assert all(ACADEMIC_SCHEMA.is_inverse(q.relation) for q in heads)
        assert all(q.positive == q.event.head and q.known == q.event.tail for q in heads)

    def test_deterministic(self):
        store = random_store(4)
        a = build_queries(store, SplitSpec(5, 7, 9), "valid", seed=3)
        b = build_queries(store, SplitSpec(5, 7, 9), "valid", seed=3)
        assert [(q.known, q.positive, q.negatives.tolist()) for q in a] == \
               [(q.known, q.positive, q.negatives.tolist()) for q in b]


class TestScorers:
    def test_constant_mrr(self):
        qs = synthetic_queries(50)
        scores = ConstantScorer().score(qs)
        rr = [1 / rank(s) for s in scores]
        assert all(abs(x - 1 / 101) < 1e-12 for x in rr)

    def test_random_mrr_closed_form(self):
        assert abs(expected_random_mrr(201) - random_mrr(201)) < 1e-15
        assert abs(expected_random_mrr(201) - 0.0293) < 5e-5
        qs = synthetic_queries(10_000)
        scores = RandomScorer(seed=0).score(qs)
        mrr = math.fsum(1 / rank(s) for s in scores) / len(qs)
        assert abs(mrr - 0.0293) < 0.003

    def test_oracle(self, tiny_store):
        split = SplitSpec(1, 2, 3)
        qs = build_queries(tiny_store, split, "test", seed=0)
        rep, _ = evaluate(OracleScorer(), qs, tiny_store, categorize_edges(tiny_store, split, "test"))
        assert rep.overall["mrr"] == 1.0
        assert rep.overall["hits@1"] == 1.0

    def test_single_prior_tail_ranks_first(self):
        store = build_store(make_nodes(6, 0, 0), [(0, COLLAB, 1, 0), (0, COLLAB, 1, 3)])
        q = build_queries(store, SplitSpec(0, 1, 3), "test", seed=0)[0]
        for scorer in (FrequencyScorer(store), RecencyScorer(store)):
            assert rank(scorer.score([q])[0]) == 1.0

    def test_fresh_head_ties(self):
        store = build_store(make_nodes(250, 0, 0), [(0, COLLAB, 1, 0), (2, COLLAB, 3, 3)])
        q = build_queries(store, SplitSpec(0, 1, 3), "test", seed=0)[0]
        assert q.n_candidates == 201
        for scorer in (FrequencyScorer(store), RecencyScorer(store)):
            assert rank(scorer.score([q])[0]) == 101.0

    def test_frequency_beats_random(self, clique_data):
        store, split = clique_data
        qs = build_queries(store, split, "test", seed=0)
        cats = categorize_edges(store, split, "test")
        freq, _ = evaluate(FrequencyScorer(store), qs, store, cats)
        rnd, _ = evaluate(RandomScorer(1), qs, store, cats)
        assert freq.overall["mrr"] > rnd.overall["mrr"]


class TestEvaluate:
    def _run(self, store, split, scorer=None):
        qs = build_queries(store, split, "test", seed=0, n_negatives=30)
        cats = categorize_edges(store, split, "test")
        return qs, *evaluate(scorer or RandomScorer(2), qs, store, cats, augment(store),
                             ("relation", "direction", "category", "country_pair", "edge_status"))

    def test_partition_consistency(self):
        store = random_store(6, n_events=300)
        _, rep, _ = self._run(store, SplitSpec(5, 7, 9))
        for key in ("relation", "direction", "category", "edge_status"):
            groups = rep.groups[key]
            assert sum(g["count"] for g in groups.values()) == rep.overall["count"]
            weighted = math.fsum(g["mrr"] * g["count"] for g in groups.values()) / rep.overall["count"]
            assert abs(weighted - rep.overall["mrr"]) < 1e-12

    def test_result_invariants(self):
        store = random_store(7)
        _, _, results = self._run(store, SplitSpec(5, 7, 9))
        for r in results:
            assert r.reciprocal_rank == 1 / r.rank
            assert all(r.hits[k] == (r.rank <= k) for k in (1, 3, 10))

    def test_group_by_country_by_hand(self, tiny_store):
        split = SplitSpec(1, 2, 3)
        qs, rep, results = self._run(tiny_store, split, FrequencyScorer(tiny_store))
        by_pair: dict[str, list[float]] = {}
        for q, r in zip(qs, results):
            h, t = tiny_store.nodes[q.event.head], tiny_store.nodes[q.event.tail]
            key = f"{h.metadata['country']}->{t.metadata['country']}"
            by_pair.setdefault(key, []).append(1 / r.rank)
        for key, rrs in by_pair.items():
            assert rep.groups["country_pair"][key]["mrr"] == pytest.approx(sum(rrs) / len(rrs), abs=1e-15)

    def test_failing_scorer_aborts(self, tiny_store):
        class Broken:
            def score(self, queries):
                raise RuntimeError("boom")

        with pytest.raises(EvaluationError, match="boom"):
            self._run(tiny_store, SplitSpec(1, 2, 3), Broken())

    def test_wrong_shape(self, tiny_store):
        class Short:
            def score(self, queries):
                return [np.zeros(1) for _ in queries]

        with pytest.raises(EvaluationError, match="expected"):
            self._run(tiny_store, SplitSpec(1, 2, 3), Short())

    def test_reproducible(self):
        store = random_store(8)
        a = self._run(store, SplitSpec(5, 7, 9))[1]
        b = self._run(store, SplitSpec(5, 7, 9))[1]
        assert a.to_json() == b.to_json()

    def test_report_round_trip_and_tsv(self, tmp_path):
        store = random_store(9)
        qs, rep, results = self._run(store, SplitSpec(5, 7, 9))
        rep.write(tmp_path / "m.json")
        again = MetricReport.from_dict(__import__("json").loads((tmp_path / "m.json").read_text()))
        assert again.to_json() == rep.to_json()
        write_results_tsv(tmp_path / "r.tsv", qs, results)
        lines = (tmp_path / "r.tsv").read_text().splitlines()
        assert len(lines) == len(results) + 1
        assert lines[0].split("\t")[:3] == ["query_id", "t", "known"]

    def test_summarize_empty_group_value_skipped(self):
        res = [RankingResult(0, 1.0, 1.0, {1: True}, "Inductive", {"relation": "collab"}),
               RankingResult(1, 2.0, 0.5, {1: False}, "Inductive", {})]
        rep = summarize(res, ("relation",), (1,))
        assert rep.groups["relation"]["collab"]["count"] == 1
        assert rep.overall["mrr"] == 0.75
