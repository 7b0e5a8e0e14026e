"""Cross-encoder teacher scores: ingestion, global normalization, test oracle.

Normalization is percentile-clipped min-max over the pooled multiset of ALL
raw scores (global, not per-query): lo/hi are the 1st/99th percentiles under
linear interpolation between closest ranks (numpy's "linear" method, the
inclusive convention), and outputs are clamp((x - lo) / (hi - lo), 0, 1).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

from .errors import DataError, NumericError
from .evaluation import Qrels


@dataclass
class RawScoreTable:
    """Unbounded teacher logits keyed by (query_id, passage_id)."""

    entries: dict[tuple[str, str], float]

    def restrict(self, query_ids: Iterable[str]) -> "RawScoreTable":
        keep = set(query_ids)
        return RawScoreTable({k: v for k, v in self.entries.items() if k[0] in keep})


@dataclass
class NormalizedScoreTable:
    """Scores mapped into [0, 1]; lo/hi record the clipping percentiles."""

    entries: dict[tuple[str, str], float]
    lo: float
    hi: float

    def __post_init__(self) -> None:
        if not self.lo < self.hi:
            raise NumericError(f"normalization bounds must satisfy lo < hi, got {self.lo} >= {self.hi}")

    def score(self, query_id: str, passage_id: str) -> float:
        try:
            return self.entries[(query_id, passage_id)]
        except KeyError:
            raise DataError(f"no teacher score for pair ({query_id!r}, {passage_id!r})") from None


def normalize_scores(raw: RawScoreTable) -> NormalizedScoreTable:
    """Global percentile-clipped min-max normalization of a raw score table."""
    if len(raw.entries) < 2:
        raise DataError(f"need at least 2 raw scores to normalize, got {len(raw.entries)}")
    values = np.fromiter(raw.entries.values(), dtype=np.float64, count=len(raw.entries))
    if not np.all(np.isfinite(values)):
        raise NumericError("raw teacher scores contain non-finite values")
    lo = float(np.percentile(values, 1.0, method="linear"))
    hi = float(np.percentile(values, 99.0, method="linear"))
    if hi <= lo:
        raise NumericError(
            f"degenerate teacher: 1st and 99th percentiles coincide at {lo}"
        )
    scale = hi - lo
    entries = {
        key: float(np.clip((value - lo) / scale, 0.0, 1.0))
        for key, value in raw.entries.items()
    }
    return NormalizedScoreTable(entries=entries, lo=lo, hi=hi)


def oracle_teacher(
    ground_truth: Qrels,
    noise_seed: int,
    noise_sd: float,
    pairs: Iterable[tuple[str, str]] | None = None,
) -> RawScoreTable:
    """Synthetic teacher: raw score = relevance grade + Gaussian noise.

    Stands in for a real cross-encoder in fixtures and end-to-end tests.
    RNG recipe, pinned for portability: ``numpy.random.default_rng(seed)``
    (PCG64), one normal(0, noise_sd) draw per pair, pairs visited in sorted
    (query_id, passage_id) order. ``pairs`` defaults to the judged pairs;
    unjudged pairs score grade 0 plus noise.
    """
    if noise_sd < 0:
        raise DataError(f"noise_sd must be >= 0, got {noise_sd}")
    if not ground_truth.judgments:
        raise DataError("oracle teacher needs non-empty qrels")
    pair_list = sorted(set(pairs) if pairs is not None else ground_truth.judgments.keys())
    rng = np.random.default_rng(noise_seed)
    noise = rng.normal(0.0, noise_sd, size=len(pair_list))
    entries = {
        (qid, pid): float(ground_truth.grade(qid, pid)) + float(noise[i])
        for i, (qid, pid) in enumerate(pair_list)
    }
    return RawScoreTable(entries)


# --- file formats ----------------------------------------------------------


def load_raw_scores(path: str | Path) -> RawScoreTable:
    entries: dict[tuple[str, str], float] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            rec = json.loads(line)
            key = (rec["query_id"], rec["passage_id"])
            if key in entries:
                raise DataError(f"{path}:{lineno}: duplicate score for pair {key}")
            entries[key] = float(rec["score"])
    if not entries:
        raise DataError(f"{path}: no score records")
    return RawScoreTable(entries)


def write_raw_scores(table: RawScoreTable, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for (qid, pid), score in sorted(table.entries.items()):
            fh.write(json.dumps({"query_id": qid, "passage_id": pid, "score": score}) + "\n")


def load_normalized_scores(path: str | Path) -> NormalizedScoreTable:
    with open(path, encoding="utf-8") as fh:
        header_line = fh.readline()
        try:
            header = json.loads(header_line)
            lo, hi = float(header["lo"]), float(header["hi"])
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise DataError(f"{path}: missing or malformed lo/hi header line") from exc
        entries: dict[tuple[str, str], float] = {}
        for lineno, line in enumerate(fh, start=2):
            if not line.strip():
                continue
            rec = json.loads(line)
            key = (rec["query_id"], rec["passage_id"])
            if key in entries:
                raise DataError(f"{path}:{lineno}: duplicate score for pair {key}")
            score = float(rec["score"])
            if not 0.0 <= score <= 1.0:
                raise DataError(f"{path}:{lineno}: normalized score {score} outside [0, 1]")
            entries[key] = score
    return NormalizedScoreTable(entries=entries, lo=lo, hi=hi)


def write_normalized_scores(table: NormalizedScoreTable, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps({"lo": table.lo, "hi": table.hi}) + "\n")
        for (qid, pid), score in sorted(table.entries.items()):
            fh.write(json.dumps({"query_id": qid, "passage_id": pid, "score": score}) + "\n")
