"""Pipeline stages: each reads declared inputs, writes declared outputs plus a
manifest, and is byte-deterministic, so running stages one at a time is
indistinguishable from the chained `pipeline` command.
"""

from __future__ import annotations

import csv
import json
import logging
from pathlib import Path

import numpy as np

from .config import PipelineConfig, require_paths
from .corpus import dedup_corpus, load_corpus, write_corpus, write_removals
from .embeddings import load_embeddings, write_embeddings_binary
from .errors import DataError
from .evaluation import (
    load_qrels,
    load_run,
    map_metric,
    metrics_to_json,
    ndcg_at_k,
    recall_at_k,
    rerank_run,
    retrieve_run,
    write_run,
)
from .manifest import write_manifest
from .negatives import (
    SweepBundle,
    load_groups,
    mine_all,
    threshold_sweep,
    write_groups,
    write_rejections,
    write_sweep_csv,
)
from .querygen import (
    filter_queries,
    load_filter_report,
    load_queries,
    validate_query,
    write_filter_report,
    write_queries,
)
from .teacher import (
    load_normalized_scores,
    load_raw_scores,
    normalize_scores,
    write_normalized_scores,
)
from .trainer import AdapterModel, apply_adapter, train, write_train_report

logger = logging.getLogger(__name__)

# Output filenames, shared by the CLI and the stage-equivalence checks.
F_DEDUP_CORPUS = "corpus.dedup.jsonl"
F_REMOVALS = "removals.jsonl"
F_NORM_ALL = "scores.normalized.all.jsonl"
F_NORM_KEPT = "scores.normalized.jsonl"
F_FILTER_REPORT = "filter_report.json"
F_KEPT_QUERIES = "queries.kept.jsonl"
F_GROUPS = "groups.jsonl"
F_REJECTIONS = "mining_rejections.jsonl"
F_CHECKPOINT = "adapter.ckpt"
F_TRAIN_REPORT = "train_report.json"
F_LOSS_CURVE = "loss_curve.png"
F_LOSS_TERMS = "loss_terms.csv"
F_ADAPTED_PASSAGES = "passages.adapted.embf"
F_ADAPTED_EVAL_QUERIES = "queries.eval.adapted.embf"
F_RUN_BASELINE = "run.baseline.trec"
F_RUN_ADAPTED = "run.adapted.trec"
F_METRICS = "metrics.json"
F_PER_QUERY = "per_query.csv"
F_METRICS_FIG = "metrics.png"
F_RUN_RERANKED = "run.reranked.trec"
F_RERANK_METRICS = "rerank_metrics.json"
F_SWEEP_CSV = "sweep.csv"
F_SWEEP_FIG = "sweep.png"


def _out(cfg: PipelineConfig, name: str) -> Path:
    return cfg.output_dir / name


def _need(path: Path, producer: str) -> Path:
    if not path.exists():
        raise DataError(f"missing {path.name}; run the '{producer}' stage first ({path})")
    return path


def _deduped_passage_store(cfg: PipelineConfig):
    """Passage embeddings restricted to the dedup survivors."""
    corpus = load_corpus(_need(_out(cfg, F_DEDUP_CORPUS), "dedup"))
    store = load_embeddings(cfg.paths["passage_embeddings"])
    return corpus, store.subset(corpus.ids())


def stage_dedup(cfg: PipelineConfig) -> dict[str, Path]:
    require_paths(cfg, "corpus")
    corpus = load_corpus(cfg.paths["corpus"])
    deduped, removals = dedup_corpus(corpus)
    outputs = {"corpus": _out(cfg, F_DEDUP_CORPUS), "removals": _out(cfg, F_REMOVALS)}
    write_corpus(deduped, outputs["corpus"])
    write_removals(removals, outputs["removals"])
    write_manifest("dedup", cfg.output_dir, {"corpus": cfg.paths["corpus"]}, outputs, cfg.raw, cfg.seed)
    return outputs


def stage_normalize_scores(cfg: PipelineConfig, restrict_to_kept: bool = False) -> dict[str, Path]:
    require_paths(cfg, "teacher_scores")
    raw = load_raw_scores(cfg.paths["teacher_scores"])
    inputs: dict[str, Path] = {"teacher_scores": cfg.paths["teacher_scores"]}
    if restrict_to_kept:
        report_path = _need(_out(cfg, F_FILTER_REPORT), "filter-queries")
        raw = raw.restrict(load_filter_report(report_path).kept)
        inputs["filter_report"] = report_path
        out_key, out_name, stage = "normalized_scores", F_NORM_KEPT, "normalize-scores"
    else:
        out_key, out_name, stage = "normalized_scores_all", F_NORM_ALL, "normalize-scores-all"
    table = normalize_scores(raw)
    outputs = {out_key: _out(cfg, out_name)}
    write_normalized_scores(table, outputs[out_key])
    write_manifest(stage, cfg.output_dir, inputs, outputs, cfg.raw, cfg.seed)
    return outputs


def stage_filter_queries(cfg: PipelineConfig) -> dict[str, Path]:
    require_paths(cfg, "queries", "query_embeddings", "passage_embeddings")
    corpus, passage_store = _deduped_passage_store(cfg)
    queries = load_queries(cfg.paths["queries"], passage_ids=corpus.ids())
    for q in queries:
        for warning in validate_query(q):
            logger.warning("%s", warning)
    query_store = load_embeddings(cfg.paths["query_embeddings"])
    table = load_normalized_scores(_need(_out(cfg, F_NORM_ALL), "normalize-scores"))
    report = filter_queries(
        queries, query_store, passage_store, table, depth=cfg.retrieval.filter_depth
    )
    kept = set(report.kept)
    outputs = {
        "filter_report": _out(cfg, F_FILTER_REPORT),
        "kept_queries": _out(cfg, F_KEPT_QUERIES),
    }
    write_filter_report(report, outputs["filter_report"])
    write_queries([q for q in queries if q.query_id in kept], outputs["kept_queries"])
    write_manifest(
        "filter-queries",
        cfg.output_dir,
        {
            "queries": cfg.paths["queries"],
            "query_embeddings": cfg.paths["query_embeddings"],
            "passage_embeddings": cfg.paths["passage_embeddings"],
            "corpus": _out(cfg, F_DEDUP_CORPUS),
            "normalized_scores": _out(cfg, F_NORM_ALL),
        },
        outputs,
        cfg.raw,
        cfg.seed,
    )
    return outputs


def stage_mine(cfg: PipelineConfig) -> dict[str, Path]:
    require_paths(cfg, "query_embeddings", "passage_embeddings")
    _, passage_store = _deduped_passage_store(cfg)
    kept_queries = load_queries(_need(_out(cfg, F_KEPT_QUERIES), "filter-queries"))
    query_store = load_embeddings(cfg.paths["query_embeddings"])
    table = load_normalized_scores(_need(_out(cfg, F_NORM_KEPT), "normalize-scores"))
    pairs = [(q.query_id, q.source_passage_id) for q in kept_queries]
    groups, rejections = mine_all(pairs, passage_store, query_store, table, cfg.mining)
    outputs = {"groups": _out(cfg, F_GROUPS), "rejections": _out(cfg, F_REJECTIONS)}
    write_groups(groups, outputs["groups"])
    write_rejections(rejections, outputs["rejections"])
    write_manifest(
        "mine",
        cfg.output_dir,
        {
            "kept_queries": _out(cfg, F_KEPT_QUERIES),
            "normalized_scores": _out(cfg, F_NORM_KEPT),
            "query_embeddings": cfg.paths["query_embeddings"],
            "passage_embeddings": cfg.paths["passage_embeddings"],
        },
        outputs,
        cfg.raw,
        cfg.seed,
    )
    return outputs


def stage_train(cfg: PipelineConfig, dump_loss_terms: bool = False) -> dict[str, Path]:
    from .plots import plot_loss_curves

    require_paths(cfg, "query_embeddings", "passage_embeddings")
    _, passage_store = _deduped_passage_store(cfg)
    groups = load_groups(_need(_out(cfg, F_GROUPS), "mine"))
    if not groups:
        raise DataError("no training groups; mining produced an empty file")
    query_store = load_embeddings(cfg.paths["query_embeddings"])
    model, report = train(groups, query_store, passage_store, cfg.train)
    outputs = {
        "checkpoint": _out(cfg, F_CHECKPOINT),
        "train_report": _out(cfg, F_TRAIN_REPORT),
        "loss_curve": _out(cfg, F_LOSS_CURVE),
    }
    model.save(outputs["checkpoint"], seed=cfg.train.seed, config=_train_config_json(cfg))
    report.final_model_path = outputs["checkpoint"].name
    write_train_report(report, outputs["train_report"])
    plot_loss_curves(report, outputs["loss_curve"])
    if dump_loss_terms:
        outputs["loss_terms"] = _out(cfg, F_LOSS_TERMS)
        _dump_loss_terms(model, groups, query_store, passage_store, cfg, outputs["loss_terms"])
    write_manifest(
        "train",
        cfg.output_dir,
        {
            "groups": _out(cfg, F_GROUPS),
            "query_embeddings": cfg.paths["query_embeddings"],
            "passage_embeddings": cfg.paths["passage_embeddings"],
        },
        outputs,
        cfg.raw,
        cfg.seed,
    )
    return outputs


def _train_config_json(cfg: PipelineConfig) -> dict:
    t = cfg.train
    return {
        "learning_rate": t.learning_rate,
        "queries_per_batch": t.queries_per_batch,
        "max_epochs": t.max_epochs,
        "patience": t.patience,
        "dev_fraction": t.dev_fraction,
        "chunk_size": t.chunk_size,
        "loss_mode": t.loss_mode,
        "tau_student": t.loss.tau_student,
        "tau_teacher": t.loss.tau_teacher,
        "tau_contrastive": t.loss.tau_contrastive,
        "contrastive_weight": t.loss.contrastive_weight,
    }


def _dump_loss_terms(model, groups, query_store, passage_store, cfg, path: Path) -> None:
    from .loss import per_query_loss_terms
    from .trainer import _GroupArrays, _batch_loss

    arrays = _GroupArrays(groups, query_store, passage_store)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["query_id", "listwise", "infonce", "combined"])
        for start in range(0, len(arrays), cfg.train.queries_per_batch):
            idx = np.arange(start, min(start + cfg.train.queries_per_batch, len(arrays)))
            chunk = arrays.take(idx)
            _, batch, _, _ = _batch_loss(model, chunk, cfg.train)
            terms = per_query_loss_terms(batch, cfg.train.loss)
            for row, gi in enumerate(idx):
                writer.writerow(
                    [
                        groups[int(gi)].query_id,
                        repr(float(terms["listwise"][row])),
                        repr(float(terms["infonce"][row])),
                        repr(float(terms["combined"][row])),
                    ]
                )


def stage_apply(cfg: PipelineConfig) -> dict[str, Path]:
    require_paths(cfg, "passage_embeddings", "eval_query_embeddings")
    _, passage_store = _deduped_passage_store(cfg)
    eval_queries = load_embeddings(cfg.paths["eval_query_embeddings"])
    model = AdapterModel.load(_need(_out(cfg, F_CHECKPOINT), "train"))
    outputs = {
        "adapted_passages": _out(cfg, F_ADAPTED_PASSAGES),
        "adapted_eval_queries": _out(cfg, F_ADAPTED_EVAL_QUERIES),
    }
    write_embeddings_binary(apply_adapter(model, passage_store), outputs["adapted_passages"])
    write_embeddings_binary(apply_adapter(model, eval_queries), outputs["adapted_eval_queries"])
    write_manifest(
        "apply",
        cfg.output_dir,
        {
            "checkpoint": _out(cfg, F_CHECKPOINT),
            "passage_embeddings": cfg.paths["passage_embeddings"],
            "eval_query_embeddings": cfg.paths["eval_query_embeddings"],
        },
        outputs,
        cfg.raw,
        cfg.seed,
    )
    return outputs


def stage_retrieve(cfg: PipelineConfig) -> dict[str, Path]:
    require_paths(cfg, "passage_embeddings", "eval_query_embeddings")
    _, passage_store = _deduped_passage_store(cfg)
    eval_queries = load_embeddings(cfg.paths["eval_query_embeddings"])
    k, tag = cfg.retrieval.eval_k, cfg.retrieval.run_tag
    baseline = retrieve_run(eval_queries, passage_store, k=k, tag=f"{tag}-baseline")
    adapted_q = load_embeddings(_need(_out(cfg, F_ADAPTED_EVAL_QUERIES), "apply"))
    adapted_p = load_embeddings(_need(_out(cfg, F_ADAPTED_PASSAGES), "apply"))
    adapted = retrieve_run(adapted_q, adapted_p, k=k, tag=f"{tag}-adapted")
    outputs = {"baseline": _out(cfg, F_RUN_BASELINE), "adapted": _out(cfg, F_RUN_ADAPTED)}
    write_run(baseline, outputs["baseline"])
    write_run(adapted, outputs["adapted"])
    write_manifest(
        "retrieve",
        cfg.output_dir,
        {
            "eval_query_embeddings": cfg.paths["eval_query_embeddings"],
            "passage_embeddings": cfg.paths["passage_embeddings"],
            "adapted_passages": _out(cfg, F_ADAPTED_PASSAGES),
            "adapted_eval_queries": _out(cfg, F_ADAPTED_EVAL_QUERIES),
        },
        outputs,
        cfg.raw,
        cfg.seed,
    )
    return outputs


def _run_metrics(run, qrels) -> dict:
    return {
        "ndcg10": ndcg_at_k(run, qrels, k=10),
        "recall100": recall_at_k(run, qrels, k=100),
        "map": map_metric(run, qrels),
    }


def stage_evaluate(cfg: PipelineConfig) -> dict[str, Path]:
    from .plots import plot_metric_histogram

    require_paths(cfg, "qrels")
    qrels = load_qrels(cfg.paths["qrels"])
    baseline = load_run(_need(_out(cfg, F_RUN_BASELINE), "retrieve"))
    adapted = load_run(_need(_out(cfg, F_RUN_ADAPTED), "retrieve"))
    base_metrics = _run_metrics(baseline, qrels)
    adapted_metrics = _run_metrics(adapted, qrels)
    payload = {
        "baseline": metrics_to_json(base_metrics),
        "adapted": metrics_to_json(adapted_metrics),
        "delta": {
            name: adapted_metrics[name].mean - base_metrics[name].mean for name in base_metrics
        },
    }
    outputs = {
        "metrics": _out(cfg, F_METRICS),
        "per_query": _out(cfg, F_PER_QUERY),
        "figure": _out(cfg, F_METRICS_FIG),
    }
    with open(outputs["metrics"], "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(outputs["per_query"], "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["run", "query_id", "ndcg10", "recall100", "ap"])
        for run_name, metrics in (("baseline", base_metrics), ("adapted", adapted_metrics)):
            for qid in sorted(metrics["ndcg10"].per_query):
                writer.writerow(
                    [
                        run_name,
                        qid,
                        repr(metrics["ndcg10"].per_query[qid]),
                        repr(metrics["recall100"].per_query[qid]),
                        repr(metrics["map"].per_query[qid]),
                    ]
                )
    plot_metric_histogram(
        {"baseline": base_metrics["ndcg10"], "adapted": adapted_metrics["ndcg10"]},
        outputs["figure"],
    )
    write_manifest(
        "evaluate",
        cfg.output_dir,
        {
            "qrels": cfg.paths["qrels"],
            "run_baseline": _out(cfg, F_RUN_BASELINE),
            "run_adapted": _out(cfg, F_RUN_ADAPTED),
        },
        outputs,
        cfg.raw,
        cfg.seed,
    )
    logger.info(
        "evaluate: baseline ndcg10 %.4f -> adapted %.4f",
        base_metrics["ndcg10"].mean,
        adapted_metrics["ndcg10"].mean,
    )
    return outputs


def stage_rerank_eval(
    cfg: PipelineConfig,
    run_path: Path | None = None,
    scores_path: Path | None = None,
    depth: int = 100,
) -> dict[str, Path]:
    require_paths(cfg, "qrels")
    qrels = load_qrels(cfg.paths["qrels"])
    run_path = run_path or _need(_out(cfg, F_RUN_BASELINE), "retrieve")
    scores_path = scores_path or cfg.paths.get("teacher_scores")
    if scores_path is None:
        raise DataError("rerank-eval needs teacher scores (paths.teacher_scores or --scores)")
    run = load_run(run_path)
    scores = load_raw_scores(scores_path)
    reranked = rerank_run(run, scores.entries, depth=depth)
    before = _run_metrics(run, qrels)
    after = _run_metrics(reranked, qrels)
    payload = {
        "input_run": Path(run_path).name,
        "depth": depth,
        "before": metrics_to_json(before),
        "after": metrics_to_json(after),
        "delta": {name: after[name].mean - before[name].mean for name in before},
    }
    outputs = {
        "reranked_run": _out(cfg, F_RUN_RERANKED),
        "metrics": _out(cfg, F_RERANK_METRICS),
    }
    write_run(reranked, outputs["reranked_run"])
    with open(outputs["metrics"], "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    write_manifest(
        "rerank-eval",
        cfg.output_dir,
        {"qrels": cfg.paths["qrels"], "run": run_path, "scores": scores_path},
        outputs,
        cfg.raw,
        cfg.seed,
    )
    return outputs


def stage_sweep(cfg: PipelineConfig, thresholds: list[float]) -> dict[str, Path]:
    from .plots import plot_threshold_sweep

    require_paths(cfg, "query_embeddings", "passage_embeddings", "eval_query_embeddings", "qrels")
    _, passage_store = _deduped_passage_store(cfg)
    kept_queries = load_queries(_need(_out(cfg, F_KEPT_QUERIES), "filter-queries"))
    table = load_normalized_scores(_need(_out(cfg, F_NORM_KEPT), "normalize-scores"))
    bundle = SweepBundle(
        pairs=[(q.query_id, q.source_passage_id) for q in kept_queries],
        query_embs=load_embeddings(cfg.paths["query_embeddings"]),
        passage_embs=passage_store,
        teacher=table,
        mining=cfg.mining,
        train_cfg=cfg.train,
        eval_query_embs=load_embeddings(cfg.paths["eval_query_embeddings"]),
        qrels=load_qrels(cfg.paths["qrels"]),
        eval_depth=cfg.retrieval.eval_k,
    )
    rows = threshold_sweep(bundle, thresholds)
    outputs = {"sweep": _out(cfg, F_SWEEP_CSV), "figure": _out(cfg, F_SWEEP_FIG)}
    write_sweep_csv(rows, outputs["sweep"])
    plot_threshold_sweep(rows, outputs["figure"])
    write_manifest(
        "sweep-threshold",
        cfg.output_dir,
        {
            "kept_queries": _out(cfg, F_KEPT_QUERIES),
            "normalized_scores": _out(cfg, F_NORM_KEPT),
            "qrels": cfg.paths["qrels"],
        },
        outputs,
        cfg.raw,
        cfg.seed,
    )
    return outputs


PIPELINE_ORDER = (
    "dedup",
    "normalize-scores-all",
    "filter-queries",
    "normalize-scores",
    "mine",
    "train",
    "apply",
    "retrieve",
    "evaluate",
)


def run_pipeline(cfg: PipelineConfig) -> dict[str, Path]:
    """dedup -> normalize -> filter -> re-normalize over kept -> mine ->
    train -> apply -> retrieve -> evaluate, all into one output directory."""
    outputs: dict[str, Path] = {}
    outputs.update(stage_dedup(cfg))
    outputs.update(stage_normalize_scores(cfg, restrict_to_kept=False))
    outputs.update(stage_filter_queries(cfg))
    outputs.update(stage_normalize_scores(cfg, restrict_to_kept=True))
    outputs.update(stage_mine(cfg))
    outputs.update(stage_train(cfg))
    outputs.update(stage_apply(cfg))
    outputs.update(stage_retrieve(cfg))
    outputs.update(stage_evaluate(cfg))
    return outputs
