"""Metric correctness against hand-computed values, TREC I/O, reranking."""

from __future__ import annotations

import math

import numpy as np
import pytest

from retfit.errors import DataError
from retfit.evaluation import (
    Qrels,
    RunFile,
    load_qrels,
    load_run,
    map_metric,
    ndcg_at_k,
    recall_at_k,
    rerank_run,
    write_qrels,
    write_run,
)


def run_of(qid: str, *pids: str) -> RunFile:
    return RunFile({qid: [(pid, float(len(pids) - i)) for i, pid in enumerate(pids)]})


class TestNDCG:
    def test_perfect_single_relevant(self):
        qrels = Qrels({("q", "a"): 1})
        assert ndcg_at_k(run_of("q", "a", "b"), qrels, k=10).mean == 1.0

    def test_relevant_at_rank_2(self):
        # DCG = 1/log2(3) = 0.6309, IDCG = 1
        qrels = Qrels({("q", "a"): 1})
        rep = ndcg_at_k(run_of("q", "b", "a"), qrels, k=10)
        assert rep.mean == pytest.approx(1 / math.log2(3), abs=1e-4)

    def test_all_irrelevant_zero(self):
        qrels = Qrels({("q", "z"): 1})
        assert ndcg_at_k(run_of("q", "a", "b", "c"), qrels, k=10).mean == 0.0

    def test_graded_gains(self):
        # grades 3,1 at ranks 1,2: DCG = 7 + 1/log2(3); ideal identical
        qrels = Qrels({("q", "a"): 3, ("q", "b"): 1})
        rep = ndcg_at_k(run_of("q", "a", "b"), qrels, k=10)
        assert rep.mean == pytest.approx(1.0, abs=1e-12)
        rep2 = ndcg_at_k(run_of("q", "b", "a"), qrels, k=10)
        expected = (1 + 7 / math.log2(3)) / (7 + 1 / math.log2(3))
        assert rep2.mean == pytest.approx(expected, abs=1e-4)

    def test_grade_2_at_rank_3(self):
        # DCG = 3/log2(4) = 1.5, IDCG = 3: ndcg = 0.5
        qrels = Qrels({("q", "c"): 2})
        rep = ndcg_at_k(run_of("q", "a", "b", "c"), qrels, k=10)
        assert rep.mean == pytest.approx(0.5, abs=1e-12)

    def test_cutoff_applies(self):
        qrels = Qrels({("q", "deep"): 1})
        run = run_of("q", *[f"x{i}" for i in range(10)], "deep")
        assert ndcg_at_k(run, qrels, k=10).mean == 0.0
        assert ndcg_at_k(run, qrels, k=11).mean > 0.0

    def test_ndcg_non_decreasing_in_k(self, rng):
        pids = [f"p{i}" for i in range(30)]
        qrels = Qrels({("q", pid): int(g) for pid, g in zip(pids, rng.integers(0, 3, 30)) if g})
        order = list(rng.permutation(pids))
        run = run_of("q", *order)
        values = [ndcg_at_k(run, qrels, k=k).mean for k in range(1, 31)]
        assert all(a <= b + 1e-12 for a, b in zip(values, values[1:]))

    def test_zero_positive_query_excluded_and_reported(self):
        qrels = Qrels({("q1", "a"): 1, ("q2", "b"): 0})
        rep = ndcg_at_k(run_of("q1", "a"), qrels, k=10)
        assert rep.excluded == ["q2"]
        assert list(rep.per_query) == ["q1"]

    def test_query_missing_from_run_scored_zero_flagged(self):
        qrels = Qrels({("q1", "a"): 1, ("q2", "b"): 1})
        rep = ndcg_at_k(run_of("q1", "a"), qrels, k=10)
        assert rep.per_query["q2"] == 0.0
        assert rep.missing == ["q2"]
        assert rep.mean == pytest.approx(0.5)

    def test_relabeling_invariance(self, rng):
        pids = [f"p{i}" for i in range(20)]
        grades = {pid: int(g) for pid, g in zip(pids, rng.integers(0, 3, 20))}
        order = list(rng.permutation(pids))
        qrels = Qrels({("q", pid): g for pid, g in grades.items() if g})
        before = ndcg_at_k(run_of("q", *order), qrels, k=10).mean
        rename = {pid: f"z{i:03d}" for i, pid in enumerate(pids)}
        qrels2 = Qrels({("q", rename[pid]): g for pid, g in grades.items() if g})
        after = ndcg_at_k(run_of("q", *[rename[p] for p in order]), qrels2, k=10).mean
        assert after == pytest.approx(before, abs=1e-12)


class TestRecall:
    def test_all_found(self):
        qrels = Qrels({("q", "a"): 1, ("q", "b"): 2})
        assert recall_at_k(run_of("q", "b", "a"), qrels, k=100).mean == 1.0

    def test_half_found(self):
        qrels = Qrels({("q", "a"): 1, ("q", "b"): 1, ("q", "c"): 1, ("q", "d"): 1})
        rep = recall_at_k(run_of("q", "a", "b", "x", "y"), qrels, k=100)
        assert rep.mean == 0.5

    def test_cutoff(self):
        qrels = Qrels({("q", "a"): 1, ("q", "b"): 1})
        rep = recall_at_k(run_of("q", "x", "a", "b"), qrels, k=2)
        assert rep.mean == 0.5

    def test_matches_set_oracle(self, rng):
        pids = [f"p{i:02d}" for i in range(50)]
        for trial in range(10):
            grades = {pid: int(g) for pid, g in zip(pids, rng.integers(0, 2, 50))}
            if not any(grades.values()):
                grades[pids[0]] = 1
            order = list(rng.permutation(pids))
            k = int(rng.integers(1, 50))
            qrels = Qrels({("q", pid): g for pid, g in grades.items() if g})
            rep = recall_at_k(run_of("q", *order), qrels, k=k)
            relevant = {pid for pid, g in grades.items() if g}
            oracle = len(relevant & set(order[:k])) / len(relevant)
            assert rep.mean == pytest.approx(oracle, abs=1e-12)

    def test_recall_non_decreasing_in_k(self, rng):
        pids = [f"p{i}" for i in range(30)]
        qrels = Qrels({("q", pid): 1 for pid in pids[:7]})
        order = list(rng.permutation(pids))
        run = run_of("q", *order)
        values = [recall_at_k(run, qrels, k=k).mean for k in range(1, 31)]
        assert all(a <= b + 1e-12 for a, b in zip(values, values[1:]))


class TestMAP:
    def test_single_relevant_rank_1(self):
        qrels = Qrels({("q", "a"): 1})
        assert map_metric(run_of("q", "a", "b"), qrels).mean == 1.0

    def test_ranks_1_and_3(self):
        # AP = (1/1 + 2/3) / 2 = 0.8333
        qrels = Qrels({("q", "a"): 1, ("q", "c"): 1})
        rep = map_metric(run_of("q", "a", "b", "c"), qrels)
        assert rep.mean == pytest.approx(0.8333, abs=1e-4)

    def test_none_retrieved(self):
        qrels = Qrels({("q", "z"): 1})
        assert map_metric(run_of("q", "a", "b"), qrels).mean == 0.0

    def test_unretrieved_relevant_counts_in_denominator(self):
        # one relevant at rank 1, a second never retrieved: AP = 1/2
        qrels = Qrels({("q", "a"): 1, ("q", "zz"): 1})
        assert map_metric(run_of("q", "a", "b"), qrels).mean == pytest.approx(0.5)

    def test_mean_over_queries(self):
        qrels = Qrels({("q1", "a"): 1, ("q2", "b"): 1})
        run = RunFile({"q1": [("a", 1.0)], "q2": [("x", 2.0), ("b", 1.0)]})
        assert map_metric(run, qrels).mean == pytest.approx((1.0 + 0.5) / 2)


class TestRerank:
    def test_identity_when_scores_match(self):
        run = RunFile({"q": [("a", 3.0), ("b", 2.0), ("c", 1.0)]}, tag="orig")
        scores = {("q", "a"): 3.0, ("q", "b"): 2.0, ("q", "c"): 1.0}
        out = rerank_run(run, scores, depth=100)
        assert out.rankings == run.rankings

    def test_reorders_by_teacher(self):
        run = RunFile({"q": [("a", 3.0), ("b", 2.0), ("c", 1.0)]})
        scores = {("q", "a"): 0.1, ("q", "b"): 0.9, ("q", "c"): 0.5}
        out = rerank_run(run, scores, depth=100)
        assert [pid for pid, _ in out.rankings["q"]] == ["b", "c", "a"]

    def test_tail_preserved_beyond_depth(self):
        run = RunFile({"q": [("a", 5.0), ("b", 4.0), ("c", 3.0), ("d", 2.0), ("e", 1.0)]})
        scores = {("q", "a"): 0.2, ("q", "b"): 0.8}
        out = rerank_run(run, scores, depth=2)
        pids = [pid for pid, _ in out.rankings["q"]]
        assert pids == ["b", "a", "c", "d", "e"]
        out_scores = [s for _, s in out.rankings["q"]]
        assert all(x >= y for x, y in zip(out_scores, out_scores[1:]))

    def test_tie_breaks_lexicographic(self):
        run = RunFile({"q": [("zz", 2.0), ("aa", 1.0)]})
        scores = {("q", "zz"): 0.5, ("q", "aa"): 0.5}
        out = rerank_run(run, scores, depth=10)
        assert [pid for pid, _ in out.rankings["q"]] == ["aa", "zz"]

    def test_missing_score_named(self):
        run = RunFile({"q": [("a", 1.0)]})
        with pytest.raises(DataError, match="'q'.*'a'"):
            rerank_run(run, {}, depth=10)

    def test_hand_built_three_query_fixture(self):
        run = RunFile(
            {
                "q1": [("a", 9.0), ("b", 8.0)],
                "q2": [("c", 9.0), ("d", 8.0), ("e", 7.0)],
                "q3": [("f", 9.0)],
            }
        )
        scores = {
            ("q1", "a"): 0.1, ("q1", "b"): 0.2,
            ("q2", "c"): 0.5, ("q2", "d"): 0.9, ("q2", "e"): 0.7,
            ("q3", "f"): 1.0,
        }
        out = rerank_run(run, scores, depth=100)
        assert [p for p, _ in out.rankings["q1"]] == ["b", "a"]
        assert [p for p, _ in out.rankings["q2"]] == ["d", "e", "c"]
        assert [p for p, _ in out.rankings["q3"]] == ["f"]

    def test_oracle_rerank_never_hurts_ndcg(self, rng):
        for trial in range(25):
            pids = [f"p{i:02d}" for i in range(30)]
            grades = {pid: int(g) for pid, g in zip(pids, rng.integers(0, 4, 30))}
            if not any(grades.values()):
                grades[pids[0]] = 2
            qrels = Qrels({("q", pid): g for pid, g in grades.items() if g})
            order = list(rng.permutation(pids))
            run = run_of("q", *order)
            oracle_scores = {("q", pid): float(grades[pid]) for pid in pids}
            reranked = rerank_run(run, oracle_scores, depth=30)
            before = ndcg_at_k(run, qrels, k=10).mean
            after = ndcg_at_k(reranked, qrels, k=10).mean
            assert after >= before - 1e-12


class TestMetricRanges:
    def test_all_metrics_in_unit_interval(self, rng):
        for _ in range(20):
            pids = [f"p{i:02d}" for i in range(25)]
            grades = {pid: int(g) for pid, g in zip(pids, rng.integers(0, 4, 25))}
            if not any(grades.values()):
                grades[pids[0]] = 1
            qrels = Qrels({("q", pid): g for pid, g in grades.items() if g})
            order = list(rng.permutation(pids))[: int(rng.integers(1, 25))]
            run = run_of("q", *order)
            for rep in (
                ndcg_at_k(run, qrels, k=10),
                recall_at_k(run, qrels, k=100),
                map_metric(run, qrels),
            ):
                assert 0.0 <= rep.mean <= 1.0
                assert all(0.0 <= v <= 1.0 for v in rep.per_query.values())


class TestIO:
    def test_qrels_round_trip(self, tmp_path):
        qrels = Qrels({("q1", "a"): 2, ("q2", "b"): 0})
        path = tmp_path / "qrels.txt"
        write_qrels(qrels, path)
        assert load_qrels(path).judgments == qrels.judgments
        assert path.read_text().splitlines()[0] == "q1 0 a 2"

    def test_run_round_trip(self, tmp_path):
        run = RunFile({"q2": [("b", 0.25)], "q1": [("a", 1.5), ("c", 0.5)]}, tag="mytag")
        path = tmp_path / "run.trec"
        write_run(run, path)
        back = load_run(path)
        assert back.rankings == run.rankings
        assert back.tag == "mytag"
        line = path.read_text().splitlines()[0]
        assert line == "q1 Q0 a 1 1.5 mytag"

    def test_run_rank_sequence_enforced(self, tmp_path):
        path = tmp_path / "run.trec"
        path.write_text("q Q0 a 1 2.0 t\nq Q0 b 3 1.0 t\n")
        with pytest.raises(DataError, match="out of sequence"):
            load_run(path)

    def test_run_depth_cap(self):
        entries = [(f"p{i:04d}", float(-i)) for i in range(1001)]
        with pytest.raises(DataError, match="max 1000"):
            RunFile({"q": entries})

    def test_increasing_scores_rejected(self):
        with pytest.raises(DataError, match="scores increase"):
            RunFile({"q": [("a", 1.0), ("b", 2.0)]})

    def test_duplicate_passage_rejected(self):
        with pytest.raises(DataError, match="twice"):
            RunFile({"q": [("a", 2.0), ("a", 1.0)]})

    def test_grades_must_be_non_negative_ints(self):
        with pytest.raises(DataError, match="non-negative integer"):
            Qrels({("q", "a"): -1})
