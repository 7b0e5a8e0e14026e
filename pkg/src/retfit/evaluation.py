"""Retrieval evaluation: NDCG@k, Recall@k, MAP, TREC run/qrels I/O, reranking.

NDCG uses the exponential gain (2^grade - 1) variant, matching standard TREC
tooling. Queries without a positive grade are excluded from means and
reported; unjudged retrieved documents count as grade 0.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

from .embeddings import EmbeddingStore, retrieve_all
from .errors import DataError

MAX_RUN_DEPTH = 1000


@dataclass
class Qrels:
    """Graded relevance judgments keyed by (query_id, passage_id)."""

    judgments: dict[tuple[str, str], int]

    def __post_init__(self) -> None:
        for key, grade in self.judgments.items():
            if not isinstance(grade, int) or grade < 0:
                raise DataError(f"grade for {key} must be a non-negative integer, got {grade!r}")

    def grade(self, query_id: str, passage_id: str) -> int:
        return self.judgments.get((query_id, passage_id), 0)

    def queries(self) -> list[str]:
        return sorted({q for q, _ in self.judgments})

    def grades_for(self, query_id: str) -> dict[str, int]:
        return {p: g for (q, p), g in self.judgments.items() if q == query_id}

    def relevant(self, query_id: str) -> set[str]:
        return {p for (q, p), g in self.judgments.items() if q == query_id and g >= 1}


def load_qrels(path: str | Path) -> Qrels:
    """Whitespace-separated "qid 0 docid grade" lines."""
    judgments: dict[tuple[str, str], int] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 4:
                raise DataError(f"{path}:{lineno}: expected 4 fields, got {len(parts)}")
            qid, _, pid, grade = parts
            try:
                g = int(grade)
            except ValueError:
                raise DataError(f"{path}:{lineno}: grade {grade!r} is not an integer") from None
            if (qid, pid) in judgments:
                raise DataError(f"{path}:{lineno}: duplicate judgment for ({qid!r}, {pid!r})")
            judgments[(qid, pid)] = g
    return Qrels(judgments)


def write_qrels(qrels: Qrels, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for (qid, pid), grade in sorted(qrels.judgments.items()):
            fh.write(f"{qid} 0 {pid} {grade}\n")


@dataclass
class RunFile:
    """Per-query ranked (passage_id, score) lists plus a run tag."""

    rankings: dict[str, list[tuple[str, float]]]
    tag: str = "retfit"

    def __post_init__(self) -> None:
        for qid, entries in self.rankings.items():
            if len(entries) > MAX_RUN_DEPTH:
                raise DataError(f"query {qid!r} has {len(entries)} entries (max {MAX_RUN_DEPTH})")
            seen = set()
            prev = math.inf
            for pid, score in entries:
                if pid in seen:
                    raise DataError(f"query {qid!r} ranks passage {pid!r} twice")
                seen.add(pid)
                if score > prev:
                    raise DataError(f"query {qid!r}: scores increase at passage {pid!r}")
                prev = score


def load_run(path: str | Path) -> RunFile:
    """TREC format: "qid Q0 docid rank score tag" lines."""
    rankings: dict[str, list[tuple[str, float]]] = {}
    tag = "retfit"
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 6:
                raise DataError(f"{path}:{lineno}: expected 6 fields, got {len(parts)}")
            qid, _, pid, rank, score, tag = parts
            rankings.setdefault(qid, []).append((pid, float(score)))
            if int(rank) != len(rankings[qid]):
                raise DataError(f"{path}:{lineno}: rank {rank} out of sequence for query {qid!r}")
    return RunFile(rankings, tag=tag)


def write_run(run: RunFile, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for qid in sorted(run.rankings):
            for rank, (pid, score) in enumerate(run.rankings[qid], start=1):
                fh.write(f"{qid} Q0 {pid} {rank} {score!r} {run.tag}\n")


def retrieve_run(
    query_store: EmbeddingStore,
    passage_store: EmbeddingStore,
    k: int = 100,
    tag: str = "retfit",
) -> RunFile:
    """Brute-force cosine run over every query in the store."""
    results = retrieve_all(query_store, passage_store, k=k)
    return RunFile({r.query_id: [(pid, score) for pid, score, _ in r.ranked] for r in results}, tag=tag)


@dataclass
class MetricReport:
    """Per-query values plus their mean over evaluated queries.

    ``excluded`` lists qrels queries without a positive grade (skipped);
    ``missing`` lists evaluated queries absent from the run (scored 0).
    """

    per_query: dict[str, float]
    mean: float
    excluded: list[str] = field(default_factory=list)
    missing: list[str] = field(default_factory=list)


def _evaluated_queries(qrels: Qrels) -> tuple[list[str], list[str]]:
    evaluated, excluded = [], []
    for qid in qrels.queries():
        (evaluated if qrels.relevant(qid) else excluded).append(qid)
    if not evaluated:
        raise DataError("qrels contain no query with a positive grade")
    return evaluated, excluded


def _report(per_query: dict[str, float], excluded: list[str], missing: list[str]) -> MetricReport:
    mean = sum(per_query.values()) / len(per_query)
    return MetricReport(per_query=per_query, mean=mean, excluded=excluded, missing=missing)


def ndcg_at_k(run: RunFile, qrels: Qrels, k: int = 10) -> MetricReport:
    """Normalized discounted cumulative gain with 2^grade - 1 gains.

    The ideal DCG runs over every judged grade sorted descending, not only
    the top k, which keeps NDCG@k non-decreasing in k for a fixed run.
    """
    if k < 1:
        raise DataError(f"k must be >= 1, got {k}")
    evaluated, excluded = _evaluated_queries(qrels)
    per_query: dict[str, float] = {}
    missing: list[str] = []
    for qid in evaluated:
        grades = qrels.grades_for(qid)
        ideal = sorted(grades.values(), reverse=True)
        idcg = sum((2**g - 1) / math.log2(r + 2) for r, g in enumerate(ideal))
        entries = run.rankings.get(qid)
        if entries is None:
            per_query[qid] = 0.0
            missing.append(qid)
            continue
        dcg = sum(
            (2 ** grades.get(pid, 0) - 1) / math.log2(r + 2)
            for r, (pid, _) in enumerate(entries[:k])
        )
        per_query[qid] = dcg / idcg
    return _report(per_query, excluded, missing)


def recall_at_k(run: RunFile, qrels: Qrels, k: int = 100) -> MetricReport:
    if k < 1:
        raise DataError(f"k must be >= 1, got {k}")
    evaluated, excluded = _evaluated_queries(qrels)
    per_query: dict[str, float] = {}
    missing: list[str] = []
    for qid in evaluated:
        relevant = qrels.relevant(qid)
        entries = run.rankings.get(qid)
        if entries is None:
            per_query[qid] = 0.0
            missing.append(qid)
            continue
        hits = sum(1 for pid, _ in entries[:k] if pid in relevant)
        per_query[qid] = hits / len(relevant)
    return _report(per_query, excluded, missing)


def map_metric(run: RunFile, qrels: Qrels) -> MetricReport:
    """Mean average precision over the full run depth; AP denominator is the
    total number of relevant passages, retrieved or not."""
    evaluated, excluded = _evaluated_queries(qrels)
    per_query: dict[str, float] = {}
    missing: list[str] = []
    for qid in evaluated:
        relevant = qrels.relevant(qid)
        entries = run.rankings.get(qid)
        if entries is None:
            per_query[qid] = 0.0
            missing.append(qid)
            continue
        hits = 0
        precision_sum = 0.0
        for r, (pid, _) in enumerate(entries, start=1):
            if pid in relevant:
                hits += 1
                precision_sum += hits / r
        per_query[qid] = precision_sum / len(relevant)
    return _report(per_query, excluded, missing)


def rerank_run(
    run: RunFile,
    scores: Mapping[tuple[str, str], float],
    depth: int = 100,
    tag: str | None = None,
) -> RunFile:
    """Reorder each query's top-``depth`` by teacher score (ties by passage id).

    Reranked entries carry the teacher scores; deeper entries keep their
    original relative order with scores clamped to the running minimum so the
    run's non-increasing-score invariant survives. When the teacher scores
    equal the original retrieval scores the run comes back unchanged.
    """
    if depth < 1:
        raise DataError(f"depth must be >= 1, got {depth}")
    rankings: dict[str, list[tuple[str, float]]] = {}
    for qid, entries in run.rankings.items():
        head, tail = entries[:depth], entries[depth:]
        for pid, _ in head:
            if (qid, pid) not in scores:
                raise DataError(f"no teacher score for pair ({qid!r}, {pid!r})")
        new_head = sorted(
            ((pid, float(scores[(qid, pid)])) for pid, _ in head),
            key=lambda e: (-e[1], e[0]),
        )
        floor = new_head[-1][1] if new_head else math.inf
        new_tail = []
        for pid, score in tail:
            score = min(score, floor)
            floor = score
            new_tail.append((pid, score))
        rankings[qid] = new_head + new_tail
    return RunFile(rankings, tag=tag if tag is not None else f"{run.tag}-rerank")


def metrics_to_json(reports: Mapping[str, MetricReport]) -> dict:
    return {
        name: {
            "mean": rep.mean,
            "per_query": dict(sorted(rep.per_query.items())),
            "excluded": sorted(rep.excluded),
            "missing": sorted(rep.missing),
        }
        for name, rep in reports.items()
    }


def write_metrics(reports: Mapping[str, MetricReport], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(metrics_to_json(reports), fh, indent=2, sort_keys=True)
        fh.write("\n")
