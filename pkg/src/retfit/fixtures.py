"""Bundled synthetic task generators for tests, acceptance runs, and demos.

The end-to-end task plants a recoverable structure: embeddings concatenate a
signal block (cluster direction) with a nuisance block (random), so base
retrieval carries partial signal and a linear adapter that re-weights the
blocks can recover most of it. Passages come in near-duplicate sibling
clusters; sibling teacher grades sit between the positive's and the noise
floor, which makes them false negatives for mining at high thresholds and
in-batch false negatives for the contrastive loss.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .corpus import Corpus, Passage, write_corpus
from .embeddings import EmbeddingStore, retrieve_all, write_embeddings_binary
from .evaluation import Qrels, write_qrels
from .querygen import GeneratedQuery, write_queries
from .teacher import RawScoreTable, oracle_teacher, write_raw_scores


@dataclass
class TaskParams:
    dim_signal: int = 24
    dim_nuisance: int = 24
    n_clusters: int = 500
    siblings_per_cluster: int = 4
    n_train_queries: int = 400
    n_eval_queries: int = 100
    train_cluster_pool: int = 60
    signal_weight: float = 0.7
    nuisance_weight: float = 0.85
    sibling_spread: float = 0.15
    query_spread: float = 0.45
    teacher_noise_sd: float = 0.05
    mining_depth: int = 50
    n_planted_duplicates: int = 20
    seed: int = 20240901

    @property
    def dim(self) -> int:
        return self.dim_signal + self.dim_nuisance


@dataclass
class SyntheticTask:
    params: TaskParams
    corpus: Corpus
    train_queries: list[GeneratedQuery]
    query_embs: EmbeddingStore
    passage_embs: EmbeddingStore
    eval_query_embs: EmbeddingStore
    raw_scores: RawScoreTable
    eval_qrels: Qrels
    teacher_qrels: Qrels
    positives: dict[str, str] = field(default_factory=dict)


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def _jitter(rng: np.random.Generator, base: np.ndarray, spread: float) -> np.ndarray:
    """Unit vector at a dimension-independent angle from ``base``:
    normalize(base + spread * unit_noise) has cos ~ 1/sqrt(1 + spread^2)."""
    noise = rng.normal(0, 1, base.shape)
    return _unit(base + spread * _unit(noise))


def _compose(signal: np.ndarray, nuisance: np.ndarray, p: TaskParams) -> np.ndarray:
    full = np.concatenate(
        [p.signal_weight * signal, p.nuisance_weight * nuisance], axis=-1
    )
    return _unit(full).astype(np.float32)


def _words(rng: np.random.Generator, count: int) -> str:
    vocab = "alpha beta gamma delta epsilon zeta eta theta iota kappa lam mu nu xi omicron pi rho sigma tau upsilon".split()
    return " ".join(vocab[i] for i in rng.integers(0, len(vocab), count))


def build_synthetic_task(params: TaskParams | None = None) -> SyntheticTask:
    """Deterministic cluster-structured retrieval task; see module docstring."""
    p = params or TaskParams()
    rng = np.random.default_rng(p.seed)

    centers = _unit(rng.normal(0, 1, (p.n_clusters, p.dim_signal)))
    # Siblings are near-duplicates: shared signal direction AND shared
    # nuisance direction, each with a small angular jitter.
    nuisance_centers = _unit(rng.normal(0, 1, (p.n_clusters, p.dim_nuisance)))
    passages: list[Passage] = []
    sig_rows, nui_rows, pids = [], [], []
    for c in range(p.n_clusters):
        for s in range(p.siblings_per_cluster):
            pid = f"p{c:04d}s{s}"
            text = f"cluster {c} sibling {s} " + _words(rng, 8) + f" tag{c}x{s}"
            passages.append(Passage.make(pid, text))
            sig_rows.append(_jitter(rng, centers[c], p.sibling_spread))
            nui_rows.append(_jitter(rng, nuisance_centers[c], p.sibling_spread))
            pids.append(pid)
    passage_vecs = _compose(np.asarray(sig_rows), np.asarray(nui_rows), p)

    # Planted exact duplicates and substrings exercise the dedup stage; their
    # embeddings exist but the passages vanish before any downstream stage.
    dup_passages = []
    for i in range(p.n_planted_duplicates):
        victim = passages[int(rng.integers(0, len(passages)))]
        pid = f"dup{i:03d}"
        if i % 2 == 0:
            text = victim.text
        else:
            words = victim.text.split()
            text = " ".join(words[1 : max(2, len(words) - 1)])
        dup_passages.append(Passage.make(pid, text))
    dup_vecs = _compose(
        _unit(rng.normal(0, 1, (len(dup_passages), p.dim_signal))),
        _unit(rng.normal(0, 1, (len(dup_passages), p.dim_nuisance))),
        p,
    )

    corpus = Corpus(passages + dup_passages)
    passage_embs = EmbeddingStore(
        pids + [q.id for q in dup_passages], np.vstack([passage_vecs, dup_vecs])
    )

    def make_queries(count: int, prefix: str, cluster_pool: int, qtype_cycle: bool):
        queries, q_sig, q_nui, targets = [], [], [], []
        for i in range(count):
            c = int(rng.integers(0, cluster_pool))
            s = int(rng.integers(0, p.siblings_per_cluster))
            qid = f"{prefix}{i:04d}"
            qtype = (
                ("question", "claim", "title", "keywords", "user_search", "user_search_fewshot")[i % 6]
                if qtype_cycle
                else "question"
            )
            queries.append(
                GeneratedQuery(
                    query_id=qid,
                    text=f"looking for cluster {c} sibling {s} " + _words(rng, 5),
                    source_passage_id=f"p{c:04d}s{s}",
                    qtype=qtype,
                )
            )
            q_sig.append(_jitter(rng, centers[c], p.query_spread))
            q_nui.append(_unit(rng.normal(0, 1, p.dim_nuisance)))
            targets.append((qid, c, f"p{c:04d}s{s}"))
        vecs = _compose(np.asarray(q_sig), np.asarray(q_nui), p)
        return queries, vecs, targets

    train_queries, train_vecs, train_targets = make_queries(
        p.n_train_queries, "q", p.train_cluster_pool, qtype_cycle=True
    )
    query_embs = EmbeddingStore([q.query_id for q in train_queries], train_vecs)

    eval_queries, eval_vecs, eval_targets = make_queries(
        p.n_eval_queries, "e", p.n_clusters, qtype_cycle=False
    )
    eval_query_embs = EmbeddingStore([q.query_id for q in eval_queries], eval_vecs)

    # Teacher ground truth: the targeted sibling grades 3, its near-duplicate
    # siblings 2 (the planted false negatives), everything else 0.
    teacher_judgments: dict[tuple[str, str], int] = {}
    positives: dict[str, str] = {}
    for qid, c, target_pid in train_targets:
        positives[qid] = target_pid
        teacher_judgments[(qid, target_pid)] = 3
        for s in range(p.siblings_per_cluster):
            pid = f"p{c:04d}s{s}"
            if pid != target_pid:
                teacher_judgments[(qid, pid)] = 2
    teacher_qrels = Qrels(teacher_judgments)

    # Held-out relevance: every sibling of the query's cluster is relevant.
    eval_judgments: dict[tuple[str, str], int] = {}
    for qid, c, _ in eval_targets:
        for s in range(p.siblings_per_cluster):
            eval_judgments[(qid, f"p{c:04d}s{s}")] = 1
    eval_qrels = Qrels(eval_judgments)

    # Raw teacher scores for every pair filtering or mining can touch: each
    # train query's top-(mining_depth + 1) retrieval (mining excludes the
    # positive, which shifts candidates one rank deeper) plus its positive.
    survivors = passage_embs.subset([pp.id for pp in passages])
    needed: set[tuple[str, str]] = set()
    for result in retrieve_all(query_embs, survivors, k=p.mining_depth + 1):
        for pid, _, _ in result.ranked:
            needed.add((result.query_id, pid))
    for qid, _, target_pid in train_targets:
        needed.add((qid, target_pid))
    raw_scores = oracle_teacher(
        teacher_qrels, noise_seed=p.seed + 1, noise_sd=p.teacher_noise_sd, pairs=needed
    )

    return SyntheticTask(
        params=p,
        corpus=corpus,
        train_queries=train_queries,
        query_embs=query_embs,
        passage_embs=passage_embs,
        eval_query_embs=eval_query_embs,
        raw_scores=raw_scores,
        eval_qrels=eval_qrels,
        teacher_qrels=teacher_qrels,
        positives=positives,
    )


def write_task(task: SyntheticTask, outdir: str | Path) -> dict[str, str]:
    """Materialize every input file plus a ready-to-run pipeline config."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    paths = {
        "corpus": outdir / "corpus.jsonl",
        "queries": outdir / "queries.jsonl",
        "query_embeddings": outdir / "queries.embf",
        "passage_embeddings": outdir / "passages.embf",
        "eval_query_embeddings": outdir / "queries.eval.embf",
        "teacher_scores": outdir / "teacher_scores.jsonl",
        "qrels": outdir / "qrels.txt",
        "output_dir": outdir / "out",
    }
    write_corpus(task.corpus, paths["corpus"])
    write_queries(task.train_queries, paths["queries"])
    write_embeddings_binary(task.query_embs, paths["query_embeddings"])
    write_embeddings_binary(task.passage_embs, paths["passage_embeddings"])
    write_embeddings_binary(task.eval_query_embs, paths["eval_query_embeddings"])
    write_raw_scores(task.raw_scores, paths["teacher_scores"])
    write_qrels(task.eval_qrels, paths["qrels"])

    config = {
        "paths": {k: str(v) for k, v in paths.items()},
        "seed": task.params.seed,
        "mining": {"k": 19, "threshold_fraction": 0.6, "mining_depth": task.params.mining_depth},
        "train": {
            "learning_rate": 0.05,
            "queries_per_batch": 128,
            "chunk_size": 64,
            "max_epochs": 30,
            "patience": 2,
            "dev_fraction": 0.1,
            "seed": task.params.seed,
        },
        "retrieval": {"filter_depth": 20, "eval_k": 100, "run_tag": "retfit-synthetic"},
        "log_level": "info",
    }
    config_path = outdir / "config.json"
    with open(config_path, "w", encoding="utf-8") as fh:
        json.dump(config, fh, indent=2)
        fh.write("\n")
    out = {k: str(v) for k, v in paths.items()}
    out["config"] = str(config_path)
    return out


@dataclass
class FilterFixture:
    """50 queries with a planted stage partition: 25 kept, 15 stage-1 drops,
    10 stage-2 drops."""

    queries: list[GeneratedQuery]
    query_embs: EmbeddingStore
    passage_embs: EmbeddingStore
    teacher: "NormalizedScoreTable"
    expected_kept: list[str]
    expected_stage1: list[str]
    expected_stage2: list[str]


def build_filter_fixture(seed: int = 4242):
    """Geometry-planted two-stage filter case; see FilterFixture.

    Kept queries sit on top of their source passage (retrieval rank 1,
    teacher grade 3 unrivalled). Stage-1 drops point their query vector at a
    different passage and name the retrieval-farthest passage as source.
    Stage-2 drops retrieve their source fine but a rank-2 passage carries a
    higher teacher grade.
    """
    from .embeddings import top_k
    from .teacher import normalize_scores

    rng = np.random.default_rng(seed)
    dim, n_passages = 16, 80
    pids = [f"fp{i:02d}" for i in range(n_passages)]
    vectors = _unit(rng.normal(0, 1, (n_passages, dim))).astype(np.float32)
    passage_embs = EmbeddingStore(pids, vectors)

    queries: list[GeneratedQuery] = []
    qvecs: list[np.ndarray] = []
    judgments: dict[tuple[str, str], int] = {}
    expected_kept, expected_stage1, expected_stage2 = [], [], []

    def add_query(qid: str, vec: np.ndarray, source: str) -> None:
        queries.append(
            GeneratedQuery(
                query_id=qid,
                text=f"probe {qid} " + _words(rng, 4),
                source_passage_id=source,
                qtype="question",
            )
        )
        qvecs.append(vec.astype(np.float32))

    for i in range(25):
        anchor = int(rng.integers(0, n_passages))
        vec = _jitter(rng, vectors[anchor].astype(np.float64), 0.15)
        qid = f"keep{i:02d}"
        add_query(qid, vec, pids[anchor])
        judgments[(qid, pids[anchor])] = 3
        expected_kept.append(qid)

    for i in range(15):
        anchor = int(rng.integers(0, n_passages))
        vec = _jitter(rng, vectors[anchor].astype(np.float64), 0.15)
        qid = f"far{i:02d}"
        ranked = top_k(vec, passage_embs, k=n_passages).ids()
        source = ranked[-1]
        add_query(qid, vec, source)
        judgments[(qid, source)] = 3
        expected_stage1.append(qid)

    for i in range(10):
        anchor = int(rng.integers(0, n_passages))
        vec = _jitter(rng, vectors[anchor].astype(np.float64), 0.15)
        qid = f"usurp{i:02d}"
        ranked = top_k(vec, passage_embs, k=20).ids()
        source, rival = ranked[0], ranked[1]
        add_query(qid, vec, source)
        judgments[(qid, source)] = 3
        judgments[(qid, rival)] = 5
        expected_stage2.append(qid)

    query_embs = EmbeddingStore([q.query_id for q in queries], np.asarray(qvecs))
    needed = set()
    for q, vec in zip(queries, qvecs):
        for pid, _, _ in top_k(vec.astype(np.float64), passage_embs, k=20).ranked:
            needed.add((q.query_id, pid))
    raw = oracle_teacher(Qrels(judgments), noise_seed=seed + 1, noise_sd=0.0, pairs=needed)
    teacher = normalize_scores(raw)

    # The plant must be self-consistent: sources of kept/stage-2 queries are
    # retrieval rank 1, stage-1 sources sit outside the top 20.
    for q, vec in zip(queries, qvecs):
        rank_ids = top_k(vec.astype(np.float64), passage_embs, k=20).ids()
        if q.query_id.startswith(("keep", "usurp")):
            assert rank_ids[0] == q.source_passage_id
        else:
            assert q.source_passage_id not in rank_ids

    return FilterFixture(
        queries=queries,
        query_embs=query_embs,
        passage_embs=passage_embs,
        teacher=teacher,
        expected_kept=expected_kept,
        expected_stage1=expected_stage1,
        expected_stage2=expected_stage2,
    )


def main(argv: list[str] | None = None) -> None:
    import argparse

    parser = argparse.ArgumentParser(description="materialize the bundled synthetic task")
    parser.add_argument("outdir", help="directory for the generated files")
    parser.add_argument("--seed", type=int, default=None)
    args = parser.parse_args(argv)
    params = TaskParams() if args.seed is None else TaskParams(seed=args.seed)
    paths = write_task(build_synthetic_task(params), args.outdir)
    for name, path in sorted(paths.items()):
        print(f"{name}: {path}")


if __name__ == "__main__":
    main()
