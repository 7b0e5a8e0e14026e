"""Fixed-dimension embedding store with exact cosine top-k retrieval.

Rows are validated to be unit-norm within 1e-3 on load and re-normalized to
exact unit norm internally, so cosine similarity reduces to a dot product
everywhere downstream. Search is exact brute force: at desk scale (<= 200K
vectors) a flat matmul beats any index and keeps oracle testing trivial.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import DataError, NumericError

BINARY_MAGIC = b"EMBF0001"
NORM_TOLERANCE = 1e-3


@dataclass
class RetrievalResult:
    """Ranked passages for one query; scores non-increasing, ranks from 1."""

    query_id: str
    ranked: list[tuple[str, float, int]]

    def ids(self) -> list[str]:
        return [pid for pid, _, _ in self.ranked]


class EmbeddingStore:
    """Immutable id-indexed matrix of unit-norm float32 vectors."""

    def __init__(self, ids: Sequence[str], vectors: np.ndarray):
        vectors = np.asarray(vectors, dtype=np.float32)
        if vectors.ndim != 2:
            raise DataError(f"expected a 2-D vector matrix, got shape {vectors.shape}")
        if len(ids) != vectors.shape[0]:
            raise DataError(f"{len(ids)} ids but {vectors.shape[0]} vector rows")
        if vectors.shape[1] == 0:
            raise DataError("embedding dimension must be positive")
        norms = np.linalg.norm(vectors.astype(np.float64), axis=1)
        bad = np.flatnonzero(np.abs(norms - 1.0) > NORM_TOLERANCE)
        if bad.size:
            raise DataError(
                f"embedding for id {ids[int(bad[0])]!r} has norm {norms[int(bad[0])]:.6f}, "
                f"expected 1 +/- {NORM_TOLERANCE}"
            )
        self.ids = list(ids)
        self._row: dict[str, int] = {}
        for i, eid in enumerate(self.ids):
            if eid in self._row:
                raise DataError(f"duplicate embedding id: {eid!r}")
            self._row[eid] = i
        self.vectors = (vectors / norms[:, None]).astype(np.float32)
        self._id_rank: np.ndarray | None = None

    @property
    def dim(self) -> int:
        return int(self.vectors.shape[1])

    def __len__(self) -> int:
        return len(self.ids)

    def __contains__(self, eid: str) -> bool:
        return eid in self._row

    def row(self, eid: str) -> int:
        try:
            return self._row[eid]
        except KeyError:
            raise DataError(f"no embedding for id {eid!r}") from None

    def vector(self, eid: str) -> np.ndarray:
        return self.vectors[self.row(eid)]

    def subset(self, keep: Iterable[str]) -> "EmbeddingStore":
        """New store restricted to ``keep``, preserving this store's order."""
        keep = set(keep)
        missing = keep - self._row.keys()
        if missing:
            raise DataError(f"no embedding for id {sorted(missing)[0]!r}")
        idx = [i for i, eid in enumerate(self.ids) if eid in keep]
        return EmbeddingStore([self.ids[i] for i in idx], self.vectors[idx])

    def id_rank(self) -> np.ndarray:
        """Lexicographic rank of each row's id (tie-break key for retrieval)."""
        if self._id_rank is None:
            order = sorted(range(len(self.ids)), key=self.ids.__getitem__)
            rank = np.empty(len(self.ids), dtype=np.int64)
            rank[order] = np.arange(len(self.ids))
            self._id_rank = rank
        return self._id_rank


def cosine_similarity(u: np.ndarray, v: np.ndarray) -> float:
    """Cosine of two raw vectors; clamped to [-1, 1]."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape:
        raise DataError(f"dimension mismatch: {u.shape} vs {v.shape}")
    nu = float(np.linalg.norm(u))
    nv = float(np.linalg.norm(v))
    if nu == 0.0 or nv == 0.0:
        raise NumericError("cosine similarity of a zero-norm vector is undefined")
    return float(np.clip(np.dot(u, v) / (nu * nv), -1.0, 1.0))


def _select_top(scores: np.ndarray, k: int, id_rank: np.ndarray, mask: np.ndarray | None):
    """Indices of the top-k scores, ties broken by lexicographic id rank."""
    s = scores.astype(np.float64, copy=True)
    if mask is not None:
        s[~mask] = -np.inf
    valid = np.isfinite(s)
    k_eff = min(k, int(valid.sum()))
    if k_eff == 0:
        return np.empty(0, dtype=np.int64)
    if k_eff < s.size:
        part = np.argpartition(-s, k_eff - 1)[:k_eff]
        boundary = s[part].min()
        cand = np.flatnonzero(s >= boundary)
    else:
        cand = np.flatnonzero(valid)
    order = np.lexsort((id_rank[cand], -s[cand]))
    return cand[order[:k_eff]]


def top_k(
    query_vec: np.ndarray,
    store: EmbeddingStore,
    k: int,
    exclude: set[str] | None = None,
    query_id: str = "",
) -> RetrievalResult:
    """Exact cosine top-k over the store; ties go to the smaller passage id."""
    if k < 1:
        raise DataError(f"k must be >= 1, got {k}")
    if len(store) == 0:
        raise DataError("cannot retrieve from an empty store")
    q = np.asarray(query_vec, dtype=np.float64)
    if q.shape != (store.dim,):
        raise DataError(f"query dim {q.shape} does not match store dim {store.dim}")
    nq = float(np.linalg.norm(q))
    if nq == 0.0:
        raise NumericError("zero-norm query vector")
    scores = store.vectors.astype(np.float64) @ (q / nq)
    mask = None
    if exclude:
        mask = np.fromiter((eid not in exclude for eid in store.ids), dtype=bool, count=len(store))
    idx = _select_top(scores, k, store.id_rank(), mask)
    ranked = [(store.ids[int(i)], float(scores[int(i)]), r + 1) for r, i in enumerate(idx)]
    return RetrievalResult(query_id=query_id, ranked=ranked)


def retrieve_all(
    query_store: EmbeddingStore,
    passage_store: EmbeddingStore,
    k: int,
    exclude: Mapping[str, set[str]] | None = None,
) -> list[RetrievalResult]:
    """top_k for every query in store order, sharing one score matrix."""
    if k < 1:
        raise DataError(f"k must be >= 1, got {k}")
    if len(passage_store) == 0:
        raise DataError("cannot retrieve from an empty store")
    if query_store.dim != passage_store.dim:
        raise DataError(
            f"query dim {query_store.dim} does not match passage dim {passage_store.dim}"
        )
    scores = query_store.vectors.astype(np.float64) @ passage_store.vectors.astype(np.float64).T
    id_rank = passage_store.id_rank()
    results = []
    for qi, qid in enumerate(query_store.ids):
        mask = None
        if exclude and qid in exclude and exclude[qid]:
            banned = exclude[qid]
            mask = np.fromiter(
                (eid not in banned for eid in passage_store.ids), dtype=bool, count=len(passage_store)
            )
        idx = _select_top(scores[qi], k, id_rank, mask)
        results.append(
            RetrievalResult(
                query_id=qid,
                ranked=[
                    (passage_store.ids[int(i)], float(scores[qi, int(i)]), r + 1)
                    for r, i in enumerate(idx)
                ],
            )
        )
    return results


# --- file formats ----------------------------------------------------------


def load_embeddings(path: str | Path, expect_dim: int | None = None) -> EmbeddingStore:
    """Load either format by sniffing the 8-byte magic."""
    path = Path(path)
    with open(path, "rb") as fh:
        magic = fh.read(8)
    if magic == BINARY_MAGIC:
        return load_embeddings_binary(path, expect_dim=expect_dim)
    return load_embeddings_jsonl(path, expect_dim=expect_dim)


def load_embeddings_jsonl(path: str | Path, expect_dim: int | None = None) -> EmbeddingStore:
    ids: list[str] = []
    rows: list[list[float]] = []
    dim: int | None = expect_dim
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            rec = json.loads(line)
            if not isinstance(rec.get("id"), str) or not isinstance(rec.get("vector"), list):
                raise DataError(f"{path}:{lineno}: expected fields 'id' and 'vector'")
            vec = rec["vector"]
            if dim is None:
                dim = len(vec)
            if len(vec) != dim:
                raise DataError(
                    f"{path}:{lineno}: vector for id {rec['id']!r} has dim {len(vec)}, expected {dim}"
                )
            ids.append(rec["id"])
            rows.append(vec)
    if not ids:
        raise DataError(f"{path}: no embedding records")
    return EmbeddingStore(ids, np.asarray(rows, dtype=np.float32))


def write_embeddings_jsonl(store: EmbeddingStore, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for eid, vec in zip(store.ids, store.vectors):
            fh.write(json.dumps({"id": eid, "vector": [float(x) for x in vec]}) + "\n")


def load_embeddings_binary(path: str | Path, expect_dim: int | None = None) -> EmbeddingStore:
    """Packed format: magic, u32 dim, u64 count, then (u16 id-len, id, dim*f32) records."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:8] != BINARY_MAGIC:
        raise DataError(f"{path}: bad magic {data[:8]!r}, expected {BINARY_MAGIC!r}")
    if len(data) < 20:
        raise DataError(f"{path}: truncated header")
    dim = struct.unpack_from("<I", data, 8)[0]
    count = struct.unpack_from("<Q", data, 12)[0]
    if dim == 0:
        raise DataError(f"{path}: zero embedding dimension")
    if expect_dim is not None and dim != expect_dim:
        raise DataError(f"{path}: file dim {dim} does not match expected dim {expect_dim}")
    offset = 20
    ids: list[str] = []
    vectors = np.empty((count, dim), dtype=np.float32)
    vec_bytes = 4 * dim
    for i in range(count):
        if offset + 2 > len(data):
            raise DataError(f"{path}: truncated at record {i}")
        (id_len,) = struct.unpack_from("<H", data, offset)
        offset += 2
        if offset + id_len + vec_bytes > len(data):
            raise DataError(f"{path}: truncated at record {i}")
        ids.append(data[offset : offset + id_len].decode("utf-8"))
        offset += id_len
        vectors[i] = np.frombuffer(data, dtype="<f4", count=dim, offset=offset)
        offset += vec_bytes
    if offset != len(data):
        raise DataError(f"{path}: {len(data) - offset} trailing bytes after {count} records")
    return EmbeddingStore(ids, vectors)


def write_embeddings_binary(store: EmbeddingStore, path: str | Path) -> None:
    with open(path, "wb") as fh:
        fh.write(BINARY_MAGIC)
        fh.write(struct.pack("<I", store.dim))
        fh.write(struct.pack("<Q", len(store)))
        for eid, vec in zip(store.ids, store.vectors):
            raw = eid.encode("utf-8")
            if len(raw) > 0xFFFF:
                raise DataError(f"id too long for binary format: {eid[:32]!r}...")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(np.ascontiguousarray(vec, dtype="<f4").tobytes())
