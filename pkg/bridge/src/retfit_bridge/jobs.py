"""The three bridge operations: embedding export, score export, query generation.

All stateless: read declared inputs, write the pipeline's file formats,
nothing else. Outputs are ordered by id so repeated runs are byte-identical
whenever the backend is deterministic.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import InputError, UsageError
from .encoders import make_encoder
from .formats import (
    read_examples,
    read_pairs,
    read_texts,
    write_embeddings_binary,
    write_embeddings_jsonl,
    write_queries,
    write_scores,
)
from .llm import LlmClient, LlmConfig
from .scorers import make_scorer

logger = logging.getLogger(__name__)

GENERATED_QUERY_TYPES = (
    "question",
    "claim",
    "title",
    "keywords",
    "user_search",
    "user_search_fewshot",
)

# Prompt templates are deliberately plain; real prompt engineering is
# user-supplied configuration, not bridge code.
PROMPT_TEMPLATES = {
    "question": "Write a question of under 20 words that the passage below answers.",
    "claim": "Write a factual claim of under 20 words that the passage below supports.",
    "title": "Write a title of under 20 words for the passage below.",
    "keywords": "Write a keyword query of under 20 words for the passage below.",
    "user_search": "Write a natural web search query of under 20 words answered by the passage below.",
    "user_search_fewshot": "Write a natural web search query of under 20 words answered by the passage below, in the style of the examples.",
}


@dataclass
class ExportJob:
    model: str
    input_path: str | Path
    output_path: str | Path
    batch_size: int = 32
    device: str = "cpu"
    deterministic: bool = True
    expect_dim: int | None = None
    output_format: str = "binary"  # binary | jsonl

    def __post_init__(self) -> None:
        if self.batch_size < 1:
            raise UsageError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.output_format not in ("binary", "jsonl"):
            raise UsageError(f"output_format must be binary or jsonl, got {self.output_format!r}")


def export_embeddings(job: ExportJob) -> Path:
    """One unit-norm vector per input id, in declared-id order."""
    records = read_texts(job.input_path)
    encoder = make_encoder(job.model, device=job.device)
    if job.expect_dim is not None and encoder.dim != job.expect_dim:
        raise InputError(
            f"encoder dimension {encoder.dim} does not match declared dim {job.expect_dim}"
        )
    ids = [rid for rid, _ in records]
    texts = [text for _, text in records]
    chunks = []
    for start in range(0, len(texts), job.batch_size):
        chunks.append(encoder.encode(texts[start : start + job.batch_size], job.batch_size))
    vectors = np.vstack(chunks)
    norms = np.linalg.norm(vectors.astype(np.float64), axis=1)
    bad = np.flatnonzero(np.abs(norms - 1.0) > 1e-3)
    if bad.size:
        raise InputError(
            f"encoder produced a non-unit vector for id {ids[int(bad[0])]!r} "
            f"(norm {norms[int(bad[0])]:.6f})"
        )
    out = Path(job.output_path)
    if job.output_format == "binary":
        write_embeddings_binary(ids, vectors, out)
    else:
        write_embeddings_jsonl(ids, vectors, out)
    logger.info("exported %d embeddings (dim %d) to %s", len(ids), vectors.shape[1], out)
    return out


def export_teacher_scores(
    job: ExportJob, pairs_path: str | Path, queries_path: str | Path
) -> Path:
    """One raw score per (query, passage) pair; job.input_path is the corpus."""
    passages = dict(read_texts(job.input_path))
    queries = dict(read_texts(queries_path))
    pairs = read_pairs(pairs_path)
    for qid, pid in pairs:
        if qid not in queries:
            raise InputError(f"pair references unknown query id {qid!r}")
        if pid not in passages:
            raise InputError(f"pair references unknown passage id {pid!r}")
    scorer = make_scorer(job.model, device=job.device)
    entries: dict[tuple[str, str], float] = {}
    ordered = sorted(pairs)
    for start in range(0, len(ordered), job.batch_size):
        chunk = ordered[start : start + job.batch_size]
        texts = [(queries[qid], passages[pid]) for qid, pid in chunk]
        for key, score in zip(chunk, scorer.score_pairs(texts, job.batch_size)):
            entries[key] = float(score)
    out = Path(job.output_path)
    write_scores(entries, out)
    logger.info("exported %d scores to %s", len(entries), out)
    return out


def build_prompt(qtype: str, passage: str, examples: list[tuple[str, str]]) -> str:
    parts = [PROMPT_TEMPLATES[qtype]]
    for ex_passage, ex_query in examples:
        parts.append(f"Passage: {ex_passage}\nQuery: {ex_query}")
    parts.append(f"Passage: {passage}\nQuery:")
    return "\n\n".join(parts)


def generate_queries(
    job: ExportJob,
    qtype: str,
    examples_path: str | Path | None = None,
    client: LlmClient | None = None,
) -> tuple[Path, list[str]]:
    """One generated query per passage, tagged with ``qtype``.

    Endpoint failures retry with backoff inside the client; passages that
    still fail are recorded as skipped ids (returned and written next to the
    output) instead of aborting the run.
    """
    if qtype not in GENERATED_QUERY_TYPES:
        raise UsageError(
            f"cannot generate qtype {qtype!r}; expected one of {', '.join(GENERATED_QUERY_TYPES)}"
        )
    examples = read_examples(examples_path) if examples_path else []
    records = read_texts(job.input_path)
    client = client or LlmClient(LlmConfig.from_env())
    out_records: list[dict] = []
    skipped: list[str] = []
    for pid, text in records:
        prompt = build_prompt(qtype, text, examples)
        try:
            query_text = client.complete(prompt, deterministic=job.deterministic)
        except Exception as exc:
            logger.warning("skipping passage %s: %s", pid, exc)
            skipped.append(pid)
            continue
        query_text = " ".join(query_text.split())
        if not query_text:
            skipped.append(pid)
            continue
        out_records.append(
            {
                "query_id": f"{qtype}-{pid}",
                "text": query_text,
                "source_passage_id": pid,
                "qtype": qtype,
            }
        )
    out = Path(job.output_path)
    write_queries(out_records, out)
    if skipped:
        skip_path = out.with_suffix(out.suffix + ".skipped")
        skip_path.write_text("".join(pid + "\n" for pid in skipped), encoding="utf-8")
        logger.warning("%d passages skipped; ids in %s", len(skipped), skip_path)
    logger.info("generated %d %s queries to %s", len(out_records), qtype, out)
    return out, skipped
