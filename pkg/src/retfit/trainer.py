"""Adapter training over precomputed embeddings with the combined loss.

The adapter is a single dim x dim projection plus bias, identity-initialized
so epoch 0 reproduces base-model retrieval exactly, applied to queries and
passages alike and followed by re-normalization. Batches run as a two-pass
gradient-cache step: pass 1 computes every adapted embedding and the loss
gradients with respect to each of them; pass 2 walks fixed-size chunks of
the batch accumulating parameter gradients, which is mathematically the
monolithic batch gradient in a different summation order.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Sequence

import numpy as np

from .embeddings import EmbeddingStore
from .errors import DataError, NumericError
from .loss import (
    BatchScores,
    LossConfig,
    ScoreGrads,
    backprop_scores_to_embeddings,
    batch_scores_from_embeddings,
    combined_loss,
    infonce_loss,
    listwise_kl_loss,
)
from .negatives import TrainingGroup

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1

LOSS_MODES = ("combined", "listwise_only", "contrastive_only")


@dataclass
class TrainConfig:
    learning_rate: float = 2e-4
    queries_per_batch: int = 4096
    max_epochs: int = 30
    patience: int = 2
    dev_fraction: float = 0.1
    chunk_size: int = 256
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    loss: LossConfig = field(default_factory=LossConfig)
    loss_mode: str = "combined"

    def __post_init__(self) -> None:
        if not 0.0 < self.dev_fraction < 1.0:
            raise DataError(f"dev_fraction must be in (0, 1), got {self.dev_fraction}")
        if self.chunk_size < 1 or self.chunk_size > self.queries_per_batch:
            raise DataError(
                f"chunk_size must be in [1, queries_per_batch], got {self.chunk_size}"
            )
        if self.max_epochs < 1:
            raise DataError(f"max_epochs must be >= 1, got {self.max_epochs}")
        if self.patience < 1:
            raise DataError(f"patience must be >= 1, got {self.patience}")
        if self.loss_mode not in LOSS_MODES:
            raise DataError(f"loss_mode must be one of {LOSS_MODES}, got {self.loss_mode!r}")


class AdapterModel:
    """Trainable projection v -> normalize(W v + b) shared by queries and passages."""

    def __init__(self, W: np.ndarray, b: np.ndarray):
        W = np.asarray(W, dtype=np.float64)
        b = np.asarray(b, dtype=np.float64)
        if W.ndim != 2 or W.shape[0] != W.shape[1]:
            raise DataError(f"adapter matrix must be square, got {W.shape}")
        if b.shape != (W.shape[0],):
            raise DataError(f"adapter bias shape {b.shape} does not match dim {W.shape[0]}")
        self.W = W
        self.b = b

    @property
    def dim(self) -> int:
        return int(self.W.shape[0])

    @classmethod
    def identity(cls, dim: int) -> "AdapterModel":
        return cls(np.eye(dim), np.zeros(dim))

    def transform_raw(self, X: np.ndarray) -> np.ndarray:
        """Pre-normalization adapter outputs (the raw vectors losses see)."""
        X = np.asarray(X, dtype=np.float64)
        if X.shape[-1] != self.dim:
            raise DataError(f"input dim {X.shape[-1]} does not match adapter dim {self.dim}")
        return X @ self.W.T + self.b

    def clone(self) -> "AdapterModel":
        return AdapterModel(self.W.copy(), self.b.copy())

    def save(self, path: str | Path, seed: int | None = None, config: dict | None = None) -> None:
        """JSON header line, then packed little-endian f32: W row-major, then b."""
        header = {
            "dim": self.dim,
            "format_version": CHECKPOINT_VERSION,
            "seed": seed,
            "config": config or {},
        }
        with open(path, "wb") as fh:
            fh.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
            fh.write(np.ascontiguousarray(self.W, dtype="<f4").tobytes())
            fh.write(np.ascontiguousarray(self.b, dtype="<f4").tobytes())

    @classmethod
    def load(cls, path: str | Path) -> "AdapterModel":
        with open(path, "rb") as fh:
            header_line = fh.readline()
            try:
                header = json.loads(header_line)
                dim = int(header["dim"])
            except (json.JSONDecodeError, KeyError, ValueError) as exc:
                raise DataError(f"{path}: malformed checkpoint header") from exc
            if header.get("format_version") != CHECKPOINT_VERSION:
                raise DataError(
                    f"{path}: unsupported checkpoint version {header.get('format_version')}"
                )
            body = fh.read()
        expected = 4 * (dim * dim + dim)
        if len(body) != expected:
            raise DataError(f"{path}: expected {expected} payload bytes, got {len(body)}")
        W = np.frombuffer(body, dtype="<f4", count=dim * dim).reshape(dim, dim)
        b = np.frombuffer(body, dtype="<f4", count=dim, offset=4 * dim * dim)
        return cls(W.astype(np.float64), b.astype(np.float64))


@dataclass
class EpochStats:
    epoch: int
    train_loss: float | None
    dev_loss: float


@dataclass
class TrainReport:
    epochs: list[EpochStats]
    best_epoch: int
    stopping_reason: str
    final_model_path: str | None = None

    def to_json(self) -> dict:
        return {
            "epochs": [asdict(e) for e in self.epochs],
            "best_epoch": self.best_epoch,
            "stopping_reason": self.stopping_reason,
            "final_model_path": self.final_model_path,
        }

    @classmethod
    def from_json(cls, data: dict) -> "TrainReport":
        return cls(
            epochs=[EpochStats(**e) for e in data["epochs"]],
            best_epoch=data["best_epoch"],
            stopping_reason=data["stopping_reason"],
            final_model_path=data.get("final_model_path"),
        )


def split_train_dev(
    groups: Sequence[TrainingGroup], dev_fraction: float, seed: int
) -> tuple[list[TrainingGroup], list[TrainingGroup]]:
    """Seeded shuffle, then split by query id; dev takes floor(n * fraction)."""
    if not 0.0 < dev_fraction < 1.0:
        raise DataError(f"dev_fraction must be in (0, 1), got {dev_fraction}")
    if len(groups) < 10:
        raise DataError(f"need at least 10 groups to split, got {len(groups)}")
    qids = []
    seen = set()
    for g in groups:
        if g.query_id not in seen:
            seen.add(g.query_id)
            qids.append(g.query_id)
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(qids))
    n_dev = int(len(qids) * dev_fraction)
    if n_dev == 0 or n_dev == len(qids):
        raise DataError(
            f"dev_fraction {dev_fraction} leaves an empty split for {len(qids)} queries"
        )
    shuffled = [qids[i] for i in order]
    dev_ids = set(shuffled[len(qids) - n_dev :])
    train = [g for g in groups if g.query_id not in dev_ids]
    dev = [g for g in groups if g.query_id in dev_ids]
    return train, dev


class _GroupArrays:
    """Base embeddings and teacher scores for a set of groups, pre-gathered."""

    def __init__(
        self,
        groups: Sequence[TrainingGroup],
        query_embs: EmbeddingStore,
        passage_embs: EmbeddingStore,
    ):
        if not groups:
            raise DataError("no training groups")
        k = len(groups[0].negative_ids)
        qv, pv, nv, tp, tn = [], [], [], [], []
        for g in groups:
            if len(g.negative_ids) != k:
                raise DataError(
                    f"group {g.query_id!r} has {len(g.negative_ids)} negatives, expected {k}"
                )
            qv.append(query_embs.vector(g.query_id))
            pv.append(passage_embs.vector(g.positive_id))
            nv.append([passage_embs.vector(pid) for pid in g.negative_ids])
            tp.append(g.teacher_scores[0])
            tn.append(g.teacher_scores[1:])
        self.queries = np.asarray(qv, dtype=np.float64)
        self.positives = np.asarray(pv, dtype=np.float64)
        self.negatives = np.asarray(nv, dtype=np.float64)
        self.teacher_pos = np.asarray(tp, dtype=np.float64)
        self.teacher_neg = np.asarray(tn, dtype=np.float64)
        self.k = k

    def __len__(self) -> int:
        return self.queries.shape[0]

    def take(self, idx: np.ndarray) -> "_GroupArrays":
        out = object.__new__(_GroupArrays)
        out.queries = self.queries[idx]
        out.positives = self.positives[idx]
        out.negatives = self.negatives[idx]
        out.teacher_pos = self.teacher_pos[idx]
        out.teacher_neg = self.teacher_neg[idx]
        out.k = self.k
        return out


def _mode_loss(batch: BatchScores, cfg: TrainConfig) -> tuple[float, ScoreGrads]:
    if cfg.loss_mode == "combined":
        return combined_loss(batch, cfg.loss)
    if cfg.loss_mode == "listwise_only":
        return listwise_kl_loss(batch, cfg.loss)
    # contrastive_only keeps the combined loss's weighting, minus the listwise term.
    nce, grads = infonce_loss(batch, cfg.loss)
    w = cfg.loss.contrastive_weight
    return w * nce, ScoreGrads(w * grads.d_cross, w * grads.d_cross_neg)


def _batch_loss(model: AdapterModel, data: _GroupArrays, cfg: TrainConfig) -> tuple[
    float, BatchScores, tuple[np.ndarray, np.ndarray, np.ndarray], ScoreGrads
]:
    n, d = data.queries.shape
    u_q = model.transform_raw(data.queries)
    u_p = model.transform_raw(data.positives)
    u_n = model.transform_raw(data.negatives.reshape(n * data.k, d)).reshape(n, data.k, d)
    batch = batch_scores_from_embeddings(u_q, u_p, u_n, data.teacher_pos, data.teacher_neg)
    loss, score_grads = _mode_loss(batch, cfg)
    return loss, batch, (u_q, u_p, u_n), score_grads


class _AdamW:
    """Adaptive-moment optimizer with decoupled weight decay (decay on W only)."""

    def __init__(self, model: AdapterModel, cfg: TrainConfig):
        self.cfg = cfg
        self.t = 0
        self.m_w = np.zeros_like(model.W)
        self.v_w = np.zeros_like(model.W)
        self.m_b = np.zeros_like(model.b)
        self.v_b = np.zeros_like(model.b)

    def step(self, model: AdapterModel, g_w: np.ndarray, g_b: np.ndarray) -> None:
        cfg = self.cfg
        self.t += 1
        model.W -= cfg.learning_rate * cfg.weight_decay * model.W
        for param, grad, m, v in (
            (model.W, g_w, self.m_w, self.v_w),
            (model.b, g_b, self.m_b, self.v_b),
        ):
            m *= cfg.beta1
            m += (1 - cfg.beta1) * grad
            v *= cfg.beta2
            v += (1 - cfg.beta2) * grad**2
            m_hat = m / (1 - cfg.beta1**self.t)
            v_hat = v / (1 - cfg.beta2**self.t)
            param -= cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.eps)


def _train_step(
    model: AdapterModel, opt: _AdamW, data: _GroupArrays, cfg: TrainConfig, batch_tag: str
) -> float:
    """One gradient-cache batch step; returns the batch loss."""
    n, d = data.queries.shape
    loss, batch, (u_q, u_p, u_n), score_grads = _batch_loss(model, data, cfg)
    if not np.isfinite(loss):
        raise NumericError(
            f"non-finite loss in batch {batch_tag}: score range "
            f"[{batch.student_cross.min():.4f}, {batch.student_cross.max():.4f}]"
        )
    # Pass 1 gradients with respect to every adapted (raw) embedding.
    g_q, g_p, g_n = backprop_scores_to_embeddings(score_grads, u_q, u_p, u_n)
    X = np.concatenate([data.queries, data.positives, data.negatives.reshape(n * data.k, d)])
    G = np.concatenate([g_q, g_p, g_n.reshape(n * data.k, d)])
    # Pass 2: chunked parameter-gradient accumulation in a fixed order.
    g_w = np.zeros_like(model.W)
    g_b = np.zeros_like(model.b)
    for start in range(0, X.shape[0], cfg.chunk_size):
        xc = X[start : start + cfg.chunk_size]
        gc = G[start : start + cfg.chunk_size]
        g_w += gc.T @ xc
        g_b += gc.sum(axis=0)
    opt.step(model, g_w, g_b)
    return loss


def _dev_loss(model: AdapterModel, dev: _GroupArrays, cfg: TrainConfig) -> float:
    """Dev loss in fixed-order batches of queries_per_batch, size-weighted."""
    total, count = 0.0, 0
    for start in range(0, len(dev), cfg.queries_per_batch):
        idx = np.arange(start, min(start + cfg.queries_per_batch, len(dev)))
        loss, _, _, _ = _batch_loss(model, dev.take(idx), cfg)
        total += loss * idx.size
        count += idx.size
    return total / count


def train(
    groups: Sequence[TrainingGroup],
    query_embs: EmbeddingStore,
    passage_embs: EmbeddingStore,
    cfg: TrainConfig,
) -> tuple[AdapterModel, TrainReport]:
    """Train the adapter with dev-loss early stopping; returns the best-dev model."""
    for g in groups:
        g.validate()
    train_groups, dev_groups = split_train_dev(groups, cfg.dev_fraction, cfg.seed)
    train_arr = _GroupArrays(train_groups, query_embs, passage_embs)
    dev_arr = _GroupArrays(dev_groups, query_embs, passage_embs)
    dim = query_embs.dim
    if passage_embs.dim != dim:
        raise DataError(f"query dim {dim} does not match passage dim {passage_embs.dim}")

    model = AdapterModel.identity(dim)
    opt = _AdamW(model, cfg)
    rng = np.random.default_rng(cfg.seed)

    dev0 = _dev_loss(model, dev_arr, cfg)
    epochs = [EpochStats(epoch=0, train_loss=None, dev_loss=dev0)]
    best_loss, best_epoch, best_model = dev0, 0, model.clone()
    stopping_reason = "max_epochs"
    stale = 0

    for epoch in range(1, cfg.max_epochs + 1):
        order = rng.permutation(len(train_arr))
        batch_losses = []
        for start in range(0, len(train_arr), cfg.queries_per_batch):
            idx = order[start : start + cfg.queries_per_batch]
            loss = _train_step(
                model, opt, train_arr.take(idx), cfg, batch_tag=f"epoch{epoch}:{start}"
            )
            batch_losses.append(loss)
        dev = _dev_loss(model, dev_arr, cfg)
        epochs.append(
            EpochStats(epoch=epoch, train_loss=float(np.mean(batch_losses)), dev_loss=dev)
        )
        logger.info("epoch %d: train %.6f dev %.6f", epoch, epochs[-1].train_loss, dev)
        if dev < best_loss:
            best_loss, best_epoch, best_model = dev, epoch, model.clone()
            stale = 0
        else:
            stale += 1
            if stale >= cfg.patience:
                stopping_reason = "early_stop"
                break

    report = TrainReport(epochs=epochs, best_epoch=best_epoch, stopping_reason=stopping_reason)
    return best_model, report


def apply_adapter(model: AdapterModel, store: EmbeddingStore) -> EmbeddingStore:
    """Map every row through the adapter and re-normalize; id order preserved."""
    if store.dim != model.dim:
        raise DataError(f"store dim {store.dim} does not match adapter dim {model.dim}")
    raw = model.transform_raw(store.vectors.astype(np.float64))
    norms = np.linalg.norm(raw, axis=1)
    collapsed = np.flatnonzero(norms < 1e-12)
    if collapsed.size:
        raise NumericError(
            f"adapter collapses embedding {store.ids[int(collapsed[0])]!r} to zero norm"
        )
    return EmbeddingStore(list(store.ids), (raw / norms[:, None]).astype(np.float32))


def write_train_report(report: TrainReport, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(report.to_json(), fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_train_report(path: str | Path) -> TrainReport:
    with open(path, encoding="utf-8") as fh:
        return TrainReport.from_json(json.load(fh))
