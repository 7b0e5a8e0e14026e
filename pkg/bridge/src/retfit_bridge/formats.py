"""Writers and readers for the pipeline's file formats.

This module is the whole coupling surface to the main package: the corpus
and query JSON-Lines shapes, the score JSON-Lines shape, and the EMBF0001
packed embedding layout are implemented here independently so the bridge
never imports the pipeline code. The pipeline's readers validate every file
the bridge writes; the bridge test suite runs that round trip.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from . import InputError

BINARY_MAGIC = b"EMBF0001"


def read_texts(path: str | Path) -> list[tuple[str, str]]:
    """(id, text) pairs from corpus records {"id", "text"} or query records
    {"query_id", "text", ...}."""
    out: list[tuple[str, str]] = []
    seen: set[str] = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise InputError(f"{path}:{lineno}: invalid JSON: {exc}") from exc
            rid = rec.get("id", rec.get("query_id"))
            text = rec.get("text")
            if not isinstance(rid, str) or not isinstance(text, str):
                raise InputError(f"{path}:{lineno}: expected an id and a text field")
            if rid in seen:
                raise InputError(f"{path}:{lineno}: duplicate id {rid!r}")
            seen.add(rid)
            out.append((rid, text))
    if not out:
        raise InputError(f"{path}: no records")
    return out


def read_pairs(path: str | Path) -> list[tuple[str, str]]:
    """Scoring pairs {"query_id", "passage_id"}, duplicates rejected."""
    pairs: list[tuple[str, str]] = []
    seen: set[tuple[str, str]] = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            rec = json.loads(line)
            try:
                key = (rec["query_id"], rec["passage_id"])
            except KeyError as exc:
                raise InputError(f"{path}:{lineno}: missing field {exc}") from None
            if key in seen:
                raise InputError(f"{path}:{lineno}: duplicate pair {key}")
            seen.add(key)
            pairs.append(key)
    if not pairs:
        raise InputError(f"{path}: no pairs")
    return pairs


def write_embeddings_binary(ids: list[str], vectors: np.ndarray, path: str | Path) -> None:
    """EMBF0001: magic, u32 dim, u64 count, then (u16 id-len, id, dim x f32)."""
    vectors = np.asarray(vectors, dtype=np.float32)
    with open(path, "wb") as fh:
        fh.write(BINARY_MAGIC)
        fh.write(struct.pack("<I", vectors.shape[1]))
        fh.write(struct.pack("<Q", len(ids)))
        for rid, vec in zip(ids, vectors):
            raw = rid.encode("utf-8")
            if len(raw) > 0xFFFF:
                raise InputError(f"id too long for the binary format: {rid[:32]!r}...")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(np.ascontiguousarray(vec, dtype="<f4").tobytes())


def write_embeddings_jsonl(ids: list[str], vectors: np.ndarray, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rid, vec in zip(ids, np.asarray(vectors, dtype=np.float32)):
            fh.write(json.dumps({"id": rid, "vector": [float(x) for x in vec]}) + "\n")


def write_scores(entries: dict[tuple[str, str], float], path: str | Path) -> None:
    """Raw score JSON-Lines, sorted by (query_id, passage_id) for determinism."""
    with open(path, "w", encoding="utf-8") as fh:
        for (qid, pid), score in sorted(entries.items()):
            fh.write(json.dumps({"query_id": qid, "passage_id": pid, "score": score}) + "\n")


def write_queries(records: list[dict], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, ensure_ascii=False) + "\n")


def read_examples(path: str | Path, limit: int = 3) -> list[tuple[str, str]]:
    """Few-shot (passage, query) pairs; more than ``limit`` is a usage error."""
    from . import UsageError

    examples: list[tuple[str, str]] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            rec = json.loads(line)
            try:
                examples.append((rec["passage"], rec["query"]))
            except KeyError as exc:
                raise InputError(f"{path}:{lineno}: missing field {exc}") from None
    if len(examples) > limit:
        raise UsageError(f"{path}: {len(examples)} examples given, at most {limit} allowed")
    return examples
