"""Generated-query ingestion, validation, and the two-stage quality filter.

Stage 1 retrieves the top 20 passages for each query with the student
embeddings and drops the query if its source passage is absent. Stage 2
reranks exactly that retrieved list by teacher score and drops the query if
the source passage is not rank 1. Over-length text is a warning rather than
a filter: the length constraint belongs to generation time.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

from .corpus import normalize_text
from .embeddings import EmbeddingStore, retrieve_all
from .errors import DataError
from .teacher import NormalizedScoreTable

logger = logging.getLogger(__name__)

QUERY_TYPES = (
    "question",
    "claim",
    "title",
    "keywords",
    "user_search",
    "user_search_fewshot",
    "human",
)

MAX_QUERY_WORDS = 20
DEFAULT_FILTER_DEPTH = 20


@dataclass(frozen=True)
class GeneratedQuery:
    query_id: str
    text: str
    source_passage_id: str
    qtype: str

    def __post_init__(self) -> None:
        if not self.query_id:
            raise DataError("query with empty query_id")
        if not self.text:
            raise DataError(f"query {self.query_id!r} has empty text")
        if self.qtype not in QUERY_TYPES:
            raise DataError(
                f"query {self.query_id!r} has unknown qtype {self.qtype!r}; "
                f"expected one of {', '.join(QUERY_TYPES)}"
            )


@dataclass
class FilterReport:
    """Partition of the input query ids across the two filter stages."""

    kept: list[str]
    dropped_stage1: list[str]
    dropped_stage2: list[str]

    def counts(self) -> dict[str, int]:
        return {
            "kept": len(self.kept),
            "dropped_stage1": len(self.dropped_stage1),
            "dropped_stage2": len(self.dropped_stage2),
        }

    def to_json(self) -> dict:
        return {
            "kept": self.kept,
            "dropped_stage1": self.dropped_stage1,
            "dropped_stage2": self.dropped_stage2,
            "counts": self.counts(),
        }


def validate_query(q: GeneratedQuery) -> list[str]:
    """Structural warnings; never rejects and never mutates.

    The generation-time constraint is "under 20 words", so a query of
    exactly 20 whitespace tokens already warns.
    """
    warnings = []
    tokens = q.text.split()
    if len(tokens) >= MAX_QUERY_WORDS:
        warnings.append(
            f"query {q.query_id!r} has {len(tokens)} words (limit: under {MAX_QUERY_WORDS})"
        )
    if not normalize_text(q.text):
        warnings.append(f"query {q.query_id!r} is empty after normalization")
    return warnings


def filter_queries(
    queries: Sequence[GeneratedQuery],
    query_embs: EmbeddingStore,
    passage_embs: EmbeddingStore,
    teacher: NormalizedScoreTable,
    depth: int = DEFAULT_FILTER_DEPTH,
) -> FilterReport:
    """Two-stage filter; raises on any missing embedding or teacher score."""
    seen = set()
    for q in queries:
        if q.query_id in seen:
            raise DataError(f"duplicate query id {q.query_id!r}")
        seen.add(q.query_id)
        if q.query_id not in query_embs:
            raise DataError(f"no embedding for id {q.query_id!r}")
        if q.source_passage_id not in passage_embs:
            raise DataError(f"no embedding for id {q.source_passage_id!r}")

    wanted = [q.query_id for q in queries]
    results = {
        r.query_id: r
        for r in retrieve_all(query_embs.subset(wanted), passage_embs, k=depth)
    }

    kept: list[str] = []
    dropped_stage1: list[str] = []
    dropped_stage2: list[str] = []
    for q in queries:
        retrieved = results[q.query_id].ids()
        if q.source_passage_id not in retrieved:
            dropped_stage1.append(q.query_id)
            continue
        reranked = sorted(
            retrieved,
            key=lambda pid: (-teacher.score(q.query_id, pid), pid),
        )
        if reranked[0] == q.source_passage_id:
            kept.append(q.query_id)
        else:
            dropped_stage2.append(q.query_id)
    report = FilterReport(kept, dropped_stage1, dropped_stage2)
    logger.info("query filter: %s", report.counts())
    return report


def load_queries(
    path: str | Path, passage_ids: Iterable[str] | None = None
) -> list[GeneratedQuery]:
    """Read JSON-Lines query records, optionally checking source passages exist."""
    known = set(passage_ids) if passage_ids is not None else None
    queries = []
    seen = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            rec = json.loads(line)
            try:
                q = GeneratedQuery(
                    query_id=rec["query_id"],
                    text=rec["text"],
                    source_passage_id=rec["source_passage_id"],
                    qtype=rec["qtype"],
                )
            except KeyError as exc:
                raise DataError(f"{path}:{lineno}: missing field {exc}") from None
            if q.query_id in seen:
                raise DataError(f"{path}:{lineno}: duplicate query id {q.query_id!r}")
            seen.add(q.query_id)
            if known is not None and q.source_passage_id not in known:
                raise DataError(
                    f"{path}:{lineno}: query {q.query_id!r} references unknown passage "
                    f"{q.source_passage_id!r}"
                )
            queries.append(q)
    return queries


def write_queries(queries: Sequence[GeneratedQuery], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for q in queries:
            fh.write(
                json.dumps(
                    {
                        "query_id": q.query_id,
                        "text": q.text,
                        "source_passage_id": q.source_passage_id,
                        "qtype": q.qtype,
                    },
                    ensure_ascii=False,
                )
                + "\n"
            )


def write_filter_report(report: FilterReport, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(report.to_json(), fh, indent=2)
        fh.write("\n")


def load_filter_report(path: str | Path) -> FilterReport:
    with open(path, encoding="utf-8") as fh:
        data = json.load(fh)
    return FilterReport(
        kept=list(data["kept"]),
        dropped_stage1=list(data["dropped_stage1"]),
        dropped_stage2=list(data["dropped_stage2"]),
    )
