"""Listwise distillation loss, in-batch InfoNCE, their combination, and exact
analytic gradients through the cosine scores back to raw embeddings.

Scores live in two arrays: ``student_cross[i, j] = cos(q_i, p_j)`` over the
batch positives and ``student_cross_neg[i, j, k] = cos(q_i, p_jk)`` over
every query's mined negatives. The per-query positive and own-negative
scores are the diagonal blocks of those arrays, so each underlying score has
exactly one storage slot and gradient accumulation is unambiguous.

Everything is computed in float64: the contrastive temperature of 0.01 maps
cosines in [-1, 1] to exponents in [-100, 100], so stable softmax (per-row
max subtraction) is mandatory, not an optimization. All reductions are plain
numpy sums over fixed axis orders, so results are bitwise-reproducible for a
given build and thread count.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError, NumericError

# Slack on the [-1, 1] / [0, 1] range checks: loose enough that finite
# difference probes (step 1e-5) at a boundary score stay legal, tight enough
# to catch genuinely out-of-range inputs.
_RANGE_EPS = 1e-4


@dataclass(frozen=True)
class LossConfig:
    """Temperatures and weights; defaults follow the training recipe."""

    tau_student: float = 0.05
    tau_teacher: float = 0.3
    tau_contrastive: float = 0.01
    contrastive_weight: float = 0.1
    k_negatives: int = 19

    def __post_init__(self) -> None:
        for name in ("tau_student", "tau_teacher", "tau_contrastive"):
            if getattr(self, name) <= 0:
                raise DataError(f"{name} must be > 0, got {getattr(self, name)}")
        if self.contrastive_weight < 0:
            raise DataError(f"contrastive_weight must be >= 0, got {self.contrastive_weight}")
        if self.k_negatives < 0:
            raise DataError(f"k_negatives must be >= 0, got {self.k_negatives}")


class BatchScores:
    """All student cosines and teacher scores for a batch of n queries.

    student_cross: (n, n) cosines of query i against positive j.
    student_cross_neg: (n, n, K) cosines of query i against negative k of query j.
    teacher_pos / teacher_neg: normalized teacher scores in [0, 1] for each
    query's own positive and negatives.
    """

    def __init__(
        self,
        student_cross: np.ndarray,
        student_cross_neg: np.ndarray,
        teacher_pos: np.ndarray,
        teacher_neg: np.ndarray,
    ):
        cross = np.asarray(student_cross, dtype=np.float64)
        cross_neg = np.asarray(student_cross_neg, dtype=np.float64)
        t_pos = np.asarray(teacher_pos, dtype=np.float64)
        t_neg = np.asarray(teacher_neg, dtype=np.float64)
        n = cross.shape[0]
        if cross.shape != (n, n):
            raise DataError(f"student_cross must be square, got {cross.shape}")
        if cross_neg.ndim != 3 or cross_neg.shape[:2] != (n, n):
            raise DataError(f"student_cross_neg must be (n, n, K), got {cross_neg.shape}")
        k = cross_neg.shape[2]
        if t_pos.shape != (n,) or t_neg.shape != (n, k):
            raise DataError(
                f"teacher shapes {t_pos.shape}/{t_neg.shape} do not match batch (n={n}, K={k})"
            )
        if n == 0:
            raise DataError("empty batch")
        for name, arr in (("student_cross", cross), ("student_cross_neg", cross_neg)):
            if not np.all(np.isfinite(arr)):
                raise NumericError(f"{name} contains non-finite values")
            if np.any(np.abs(arr) > 1.0 + _RANGE_EPS):
                raise DataError(f"{name} contains values outside [-1, 1]")
        for name, arr in (("teacher_pos", t_pos), ("teacher_neg", t_neg)):
            if not np.all(np.isfinite(arr)):
                raise NumericError(f"{name} contains non-finite values")
            if np.any(arr < -_RANGE_EPS) or np.any(arr > 1.0 + _RANGE_EPS):
                raise DataError(f"{name} contains values outside [0, 1]")
        self.student_cross = cross
        self.student_cross_neg = cross_neg
        self.teacher_pos = t_pos
        self.teacher_neg = t_neg
        self.n = n
        self.k = k

    @property
    def student_pos(self) -> np.ndarray:
        """cos(q_i, p_i): the diagonal of the cross matrix."""
        return np.diagonal(self.student_cross)

    @property
    def student_neg(self) -> np.ndarray:
        """cos(q_i, p_ik): the diagonal block of the cross-negative tensor."""
        idx = np.arange(self.n)
        return self.student_cross_neg[idx, idx, :]


@dataclass
class ScoreGrads:
    """Gradients with respect to every student score slot."""

    d_cross: np.ndarray
    d_cross_neg: np.ndarray

    @classmethod
    def zeros(cls, n: int, k: int) -> "ScoreGrads":
        return cls(np.zeros((n, n)), np.zeros((n, n, k)))

    def scaled_add(self, other: "ScoreGrads", weight: float) -> "ScoreGrads":
        return ScoreGrads(
            self.d_cross + weight * other.d_cross,
            self.d_cross_neg + weight * other.d_cross_neg,
        )


def listwise_distributions(scores: np.ndarray, tau: float) -> np.ndarray:
    """Temperature softmax over the last axis, max-subtracted for stability."""
    if tau <= 0:
        raise DataError(f"tau must be > 0, got {tau}")
    scores = np.asarray(scores, dtype=np.float64)
    if not np.all(np.isfinite(scores)):
        raise NumericError("softmax input contains non-finite values")
    z = scores / tau
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def _own_rows(batch: BatchScores) -> tuple[np.ndarray, np.ndarray]:
    """(n, K+1) student and teacher rows ordered [positive, negatives...]."""
    student = np.concatenate([batch.student_pos[:, None], batch.student_neg], axis=1)
    teacher = np.concatenate([batch.teacher_pos[:, None], batch.teacher_neg], axis=1)
    return student, teacher


def listwise_kl_loss(batch: BatchScores, cfg: LossConfig) -> tuple[float, ScoreGrads]:
    """KL(teacher || student) between the two listwise distributions, averaged
    over queries. Gradient per query is (p_s - p_t) / tau_student / n."""
    student, teacher = _own_rows(batch)
    log_ps = _log_softmax(student / cfg.tau_student)
    p_s = np.exp(log_ps)
    log_pt = _log_softmax(teacher / cfg.tau_teacher)
    p_t = np.exp(log_pt)
    loss = float(np.mean(np.sum(p_t * (log_pt - log_ps), axis=1)))
    if not np.isfinite(loss):
        raise NumericError("listwise distillation loss is non-finite")
    d_rows = (p_s - p_t) / (cfg.tau_student * batch.n)
    grads = ScoreGrads.zeros(batch.n, batch.k)
    idx = np.arange(batch.n)
    grads.d_cross[idx, idx] = d_rows[:, 0]
    grads.d_cross_neg[idx, idx, :] = d_rows[:, 1:]
    return loss, grads


def infonce_loss(batch: BatchScores, cfg: LossConfig) -> tuple[float, ScoreGrads]:
    """In-batch contrastive loss: each query's positive against all n batch
    positives (itself included, as the formula is written) and all n*K mined
    negatives in the batch."""
    n, k = batch.n, batch.k
    tau = cfg.tau_contrastive
    flat = np.concatenate(
        [batch.student_cross, batch.student_cross_neg.reshape(n, n * k)], axis=1
    ) / tau
    row_max = flat.max(axis=1, keepdims=True)
    shifted = np.exp(flat - row_max)
    denom = shifted.sum(axis=1, keepdims=True)
    lse = (np.log(denom) + row_max)[:, 0]
    pos = np.diagonal(batch.student_cross) / tau
    loss = float(np.mean(lse - pos))
    if not np.isfinite(loss):
        raise NumericError("contrastive loss is non-finite")
    weights = shifted / denom
    d_flat = weights / (n * tau)
    grads = ScoreGrads(
        d_flat[:, :n].copy(),
        d_flat[:, n:].reshape(n, n, k).copy(),
    )
    idx = np.arange(n)
    grads.d_cross[idx, idx] -= 1.0 / (n * tau)
    return loss, grads


def combined_loss(batch: BatchScores, cfg: LossConfig) -> tuple[float, ScoreGrads]:
    """Listwise distillation plus ``contrastive_weight`` times InfoNCE."""
    kl, kl_grads = listwise_kl_loss(batch, cfg)
    nce, nce_grads = infonce_loss(batch, cfg)
    return kl + cfg.contrastive_weight * nce, kl_grads.scaled_add(
        nce_grads, cfg.contrastive_weight
    )


def per_query_loss_terms(batch: BatchScores, cfg: LossConfig) -> dict[str, np.ndarray]:
    """Per-query decomposition of each term, for debug dumps."""
    student, teacher = _own_rows(batch)
    log_ps = _log_softmax(student / cfg.tau_student)
    log_pt = _log_softmax(teacher / cfg.tau_teacher)
    p_t = np.exp(log_pt)
    kl = np.sum(p_t * (log_pt - log_ps), axis=1)
    flat = np.concatenate(
        [batch.student_cross, batch.student_cross_neg.reshape(batch.n, batch.n * batch.k)],
        axis=1,
    ) / cfg.tau_contrastive
    row_max = flat.max(axis=1)
    lse = np.log(np.exp(flat - row_max[:, None]).sum(axis=1)) + row_max
    nce = lse - np.diagonal(batch.student_cross) / cfg.tau_contrastive
    return {
        "listwise": kl,
        "infonce": nce,
        "combined": kl + cfg.contrastive_weight * nce,
    }


# --- chain rule through the cosine ------------------------------------------


def _cosine_backprop(
    grad: np.ndarray, q: np.ndarray, p: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Given d loss / d cos(q_i, p_j) for all pairs, return (cosines, dq, dp).

    d cos / d q = p / (|q||p|) - cos * q / |q|^2, and symmetrically for p.
    """
    qn = np.linalg.norm(q, axis=1)
    pn = np.linalg.norm(p, axis=1)
    if np.any(qn == 0.0) or np.any(pn == 0.0):
        raise NumericError("cannot backpropagate through a zero-norm embedding")
    inv = 1.0 / np.outer(qn, pn)
    cos = (q @ p.T) * inv
    g_inv = grad * inv
    dq = g_inv @ p - ((grad * cos).sum(axis=1) / qn**2)[:, None] * q
    dp = g_inv.T @ q - ((grad * cos).sum(axis=0) / pn**2)[:, None] * p
    return cos, dq, dp


def cosine_score_matrix(q_raw: np.ndarray, p_raw: np.ndarray) -> np.ndarray:
    """Cosine of every (query row, passage row) pair of raw vectors."""
    q = np.asarray(q_raw, dtype=np.float64)
    p = np.asarray(p_raw, dtype=np.float64)
    qn = np.linalg.norm(q, axis=1)
    pn = np.linalg.norm(p, axis=1)
    if np.any(qn == 0.0) or np.any(pn == 0.0):
        raise NumericError("zero-norm embedding in cosine computation")
    return np.clip((q @ p.T) / np.outer(qn, pn), -1.0, 1.0)


def batch_scores_from_embeddings(
    q_raw: np.ndarray,
    pos_raw: np.ndarray,
    neg_raw: np.ndarray,
    teacher_pos: np.ndarray,
    teacher_neg: np.ndarray,
) -> BatchScores:
    """Assemble a BatchScores from raw (pre-normalization) embeddings."""
    n, d = np.asarray(q_raw).shape
    k = np.asarray(neg_raw).shape[1]
    cross = cosine_score_matrix(q_raw, pos_raw)
    cross_neg = cosine_score_matrix(q_raw, np.asarray(neg_raw).reshape(n * k, d)).reshape(
        n, n, k
    )
    return BatchScores(cross, cross_neg, teacher_pos, teacher_neg)


def backprop_scores_to_embeddings(
    score_grads: ScoreGrads,
    q_raw: np.ndarray,
    pos_raw: np.ndarray,
    neg_raw: np.ndarray,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Accumulate score gradients into gradients on the raw embeddings.

    Returns (d_queries, d_positives, d_negatives) with the input shapes
    (n, d), (n, d), (n, K, d).
    """
    q = np.asarray(q_raw, dtype=np.float64)
    pos = np.asarray(pos_raw, dtype=np.float64)
    neg = np.asarray(neg_raw, dtype=np.float64)
    n, d = q.shape
    k = neg.shape[1]
    if score_grads.d_cross.shape != (n, n) or score_grads.d_cross_neg.shape != (n, n, k):
        raise DataError("score gradient shapes do not match the embedding batch")
    p_all = np.concatenate([pos, neg.reshape(n * k, d)], axis=0)
    g_all = np.concatenate(
        [score_grads.d_cross, score_grads.d_cross_neg.reshape(n, n * k)], axis=1
    )
    _, dq, dp_all = _cosine_backprop(g_all, q, p_all)
    return dq, dp_all[:n], dp_all[n:].reshape(n, k, d)
