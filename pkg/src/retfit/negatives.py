"""Hard-negative mining with teacher de-noising, and the threshold sweep.

Candidates come from the student's top ``mining_depth`` retrieval (depth 50
by default so slots emptied by the de-noising filter refill from deeper
ranks). A candidate survives iff its normalized teacher score is strictly
below ``threshold_fraction`` times the positive's; queries that cannot fill
all K slots are rejected rather than emitted short.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, replace
from pathlib import Path
from typing import TYPE_CHECKING, Iterable, Sequence

from .embeddings import EmbeddingStore, top_k
from .errors import DataError, RetfitError
from .teacher import NormalizedScoreTable

if TYPE_CHECKING:
    from .evaluation import Qrels
    from .trainer import TrainConfig

logger = logging.getLogger(__name__)


@dataclass
class MiningConfig:
    k: int = 19
    threshold_fraction: float = 0.60
    mining_depth: int = 50

    def __post_init__(self) -> None:
        if not 0.0 < self.threshold_fraction <= 1.0:
            raise DataError(
                f"threshold_fraction must be in (0, 1], got {self.threshold_fraction}"
            )
        if self.k < 1:
            raise DataError(f"k must be >= 1, got {self.k}")
        if self.mining_depth < self.k + 1:
            raise DataError(
                f"mining_depth must be >= k + 1 ({self.k + 1}), got {self.mining_depth}"
            )


@dataclass
class TrainingGroup:
    """One query, its positive, exactly K de-noised negatives, and the
    normalized teacher scores ordered [positive, negatives...]."""

    query_id: str
    positive_id: str
    negative_ids: list[str]
    teacher_scores: list[float]

    def validate(self, threshold_fraction: float | None = None) -> None:
        if self.positive_id in self.negative_ids:
            raise DataError(f"group {self.query_id!r}: positive appears in negatives")
        if len(set(self.negative_ids)) != len(self.negative_ids):
            raise DataError(f"group {self.query_id!r}: duplicate negative ids")
        if len(self.teacher_scores) != len(self.negative_ids) + 1:
            raise DataError(
                f"group {self.query_id!r}: {len(self.teacher_scores)} teacher scores for "
                f"{len(self.negative_ids)} negatives"
            )
        for s in self.teacher_scores:
            if not 0.0 <= s <= 1.0:
                raise DataError(f"group {self.query_id!r}: teacher score {s} outside [0, 1]")
        if threshold_fraction is not None:
            bound = threshold_fraction * self.teacher_scores[0]
            for pid, s in zip(self.negative_ids, self.teacher_scores[1:]):
                if not s < bound:
                    raise DataError(
                        f"group {self.query_id!r}: negative {pid!r} score {s} violates the "
                        f"de-noising bound {bound}"
                    )


@dataclass
class MiningRejection:
    query_id: str
    reason: str


def mine_negatives(
    query_id: str,
    positive_id: str,
    passage_embs: EmbeddingStore,
    query_embs: EmbeddingStore,
    teacher: NormalizedScoreTable,
    cfg: MiningConfig,
) -> TrainingGroup | MiningRejection:
    """Scan the student's top-``mining_depth`` in rank order, keeping
    candidates strictly below the de-noising bound, until K negatives."""
    positive_score = teacher.score(query_id, positive_id)
    if positive_score <= 0.0:
        return MiningRejection(query_id, "positive teacher score is zero")
    result = top_k(
        query_embs.vector(query_id),
        passage_embs,
        k=cfg.mining_depth,
        exclude={positive_id},
        query_id=query_id,
    )
    candidates = result.ids()
    scores = {pid: teacher.score(query_id, pid) for pid in candidates}
    bound = cfg.threshold_fraction * positive_score
    kept: list[str] = []
    for pid in candidates:
        if scores[pid] < bound:
            kept.append(pid)
            if len(kept) == cfg.k:
                break
    if len(kept) < cfg.k:
        return MiningRejection(query_id, "insufficient negatives")
    return TrainingGroup(
        query_id=query_id,
        positive_id=positive_id,
        negative_ids=kept,
        teacher_scores=[positive_score] + [scores[pid] for pid in kept],
    )


def mine_all(
    pairs: Sequence[tuple[str, str]],
    passage_embs: EmbeddingStore,
    query_embs: EmbeddingStore,
    teacher: NormalizedScoreTable,
    cfg: MiningConfig,
) -> tuple[list[TrainingGroup], list[MiningRejection]]:
    groups, rejections = [], []
    for query_id, positive_id in pairs:
        out = mine_negatives(query_id, positive_id, passage_embs, query_embs, teacher, cfg)
        if isinstance(out, TrainingGroup):
            groups.append(out)
        else:
            rejections.append(out)
    logger.info("mining: %d groups, %d rejections", len(groups), len(rejections))
    return groups, rejections


# --- threshold sweep ---------------------------------------------------------


@dataclass
class SweepBundle:
    """Everything one sweep point needs: mining inputs, a trainer config, and
    retrieval-evaluation data for the held-out queries."""

    pairs: list[tuple[str, str]]
    query_embs: EmbeddingStore
    passage_embs: EmbeddingStore
    teacher: NormalizedScoreTable
    mining: MiningConfig
    train_cfg: "TrainConfig"
    eval_query_embs: EmbeddingStore
    qrels: "Qrels"
    eval_depth: int = 100


@dataclass
class SweepRow:
    threshold: float
    map: float
    ndcg10: float
    recall100: float


def threshold_sweep(bundle: SweepBundle, thresholds: Iterable[float]) -> list[SweepRow]:
    """Re-mine, re-train, and re-evaluate at each de-noising threshold.

    Failures propagate with the offending threshold prepended to the message.
    An empty threshold list yields an empty table.
    """
    from .evaluation import map_metric, ndcg_at_k, recall_at_k, retrieve_run
    from .trainer import apply_adapter, train

    rows: list[SweepRow] = []
    for threshold in thresholds:
        try:
            mining = replace(bundle.mining, threshold_fraction=threshold)
            groups, rejections = mine_all(
                bundle.pairs, bundle.passage_embs, bundle.query_embs, bundle.teacher, mining
            )
            if not groups:
                raise DataError("every query was rejected during mining")
            model, _ = train(groups, bundle.query_embs, bundle.passage_embs, bundle.train_cfg)
            # evaluate what a pipeline run would ship: the f32 checkpoint
            import numpy as np

            from .trainer import AdapterModel

            model = AdapterModel(
                model.W.astype(np.float32).astype(np.float64),
                model.b.astype(np.float32).astype(np.float64),
            )
            adapted_queries = apply_adapter(model, bundle.eval_query_embs)
            adapted_passages = apply_adapter(model, bundle.passage_embs)
            run = retrieve_run(adapted_queries, adapted_passages, k=bundle.eval_depth)
            rows.append(
                SweepRow(
                    threshold=float(threshold),
                    map=map_metric(run, bundle.qrels).mean,
                    ndcg10=ndcg_at_k(run, bundle.qrels, k=10).mean,
                    recall100=recall_at_k(run, bundle.qrels, k=100).mean,
                )
            )
            logger.info(
                "sweep threshold %.2f: %d groups, ndcg10 %.4f",
                threshold,
                len(groups),
                rows[-1].ndcg10,
            )
        except RetfitError as exc:
            raise type(exc)(f"[threshold={threshold}] {exc}") from exc
    return rows


def write_sweep_csv(rows: Sequence[SweepRow], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["threshold", "map", "ndcg10", "recall100"])
        for row in rows:
            writer.writerow([row.threshold, row.map, row.ndcg10, row.recall100])


def load_sweep_csv(path: str | Path) -> list[SweepRow]:
    rows = []
    with open(path, encoding="utf-8", newline="") as fh:
        for rec in csv.DictReader(fh):
            rows.append(
                SweepRow(
                    threshold=float(rec["threshold"]),
                    map=float(rec["map"]),
                    ndcg10=float(rec["ndcg10"]),
                    recall100=float(rec["recall100"]),
                )
            )
    return rows


# --- file formats ------------------------------------------------------------


def load_groups(path: str | Path) -> list[TrainingGroup]:
    groups = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            rec = json.loads(line)
            try:
                group = TrainingGroup(
                    query_id=rec["query_id"],
                    positive_id=rec["positive_id"],
                    negative_ids=list(rec["negative_ids"]),
                    teacher_scores=[float(x) for x in rec["teacher_scores"]],
                )
            except KeyError as exc:
                raise DataError(f"{path}:{lineno}: missing field {exc}") from None
            group.validate()
            groups.append(group)
    return groups


def write_groups(groups: Sequence[TrainingGroup], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for g in groups:
            fh.write(
                json.dumps(
                    {
                        "query_id": g.query_id,
                        "positive_id": g.positive_id,
                        "negative_ids": g.negative_ids,
                        "teacher_scores": g.teacher_scores,
                    }
                )
                + "\n"
            )


def write_rejections(rejections: Sequence[MiningRejection], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in rejections:
            fh.write(json.dumps({"query_id": r.query_id, "reason": r.reason}) + "\n")
