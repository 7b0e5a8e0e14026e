"""Subcommand driver for the specialization pipeline.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numeric
failure. Heavy modules are imported inside commands so that --threads and
--deterministic can cap the BLAS thread pools before numpy first loads.
"""

from __future__ import annotations

import logging
import os
import sys
from pathlib import Path

import click

_THREAD_ENV_VARS = (
    "OMP_NUM_THREADS",
    "OPENBLAS_NUM_THREADS",
    "MKL_NUM_THREADS",
    "NUMEXPR_NUM_THREADS",
)


def _cap_threads(n: int) -> None:
    for var in _THREAD_ENV_VARS:
        os.environ[var] = str(n)


def _setup_logging(level: str) -> None:
    numeric = getattr(logging, level.upper(), None)
    if numeric is None:
        from .errors import ConfigError

        raise ConfigError(f"unknown log level: {level!r}")
    logging.basicConfig(
        level=numeric, format="%(asctime)s %(levelname)s %(name)s: %(message)s"
    )


@click.group()
@click.option("--config", "config_path", type=click.Path(), default=None, help="pipeline config JSON")
@click.option("--seed", type=int, default=None, help="override the config seed")
@click.option("--threads", type=int, default=None, help="cap numeric thread pools")
@click.option("--deterministic", is_flag=True, default=False, help="single-threaded, fixed reductions")
@click.option("--log-level", default=None, help="debug | info | warning | error")
@click.pass_context
def cli(ctx, config_path, seed, threads, deterministic, log_level):
    """Dense-retriever specialization: dedup, filter, mine, distill, evaluate."""
    if deterministic and threads is None:
        threads = 1
    if threads is not None:
        if threads < 1:
            raise click.UsageError("--threads must be >= 1")
        _cap_threads(threads)
    ctx.ensure_object(dict)
    ctx.obj.update(
        config_path=config_path,
        seed=seed,
        deterministic=deterministic,
        log_level=log_level,
    )


def _load_cfg(ctx):
    from .config import load_config
    from .errors import ConfigError

    opts = ctx.obj
    if not opts["config_path"]:
        raise ConfigError("this command needs --config PATH")
    cfg = load_config(
        opts["config_path"],
        seed_override=opts["seed"],
        deterministic_override=opts["deterministic"] or None,
        log_level_override=opts["log_level"],
    )
    _setup_logging(cfg.log_level)
    return cfg


def _echo_outputs(outputs) -> None:
    for name, path in outputs.items():
        click.echo(f"{name}: {path}")


@cli.command()
@click.pass_context
def dedup(ctx):
    """De-duplicate the corpus by normalized-substring containment."""
    from . import stages

    _echo_outputs(stages.stage_dedup(_load_cfg(ctx)))


@cli.command("normalize-scores")
@click.option(
    "--restrict-to-kept",
    is_flag=True,
    default=False,
    help="normalize over pairs of queries kept by filter-queries",
)
@click.pass_context
def normalize_scores_cmd(ctx, restrict_to_kept):
    """Percentile-clipped min-max normalization of raw teacher scores."""
    from . import stages

    _echo_outputs(stages.stage_normalize_scores(_load_cfg(ctx), restrict_to_kept=restrict_to_kept))


@cli.command("filter-queries")
@click.pass_context
def filter_queries_cmd(ctx):
    """Two-stage generated-query filter (top-20 gate, teacher rank-1 gate)."""
    from . import stages

    _echo_outputs(stages.stage_filter_queries(_load_cfg(ctx)))


@cli.command()
@click.pass_context
def mine(ctx):
    """Mine K de-noised hard negatives per kept query."""
    from . import stages

    _echo_outputs(stages.stage_mine(_load_cfg(ctx)))


@cli.command()
@click.option("--dump-loss-terms", is_flag=True, default=False, help="write per-query loss CSV")
@click.pass_context
def train(ctx, dump_loss_terms):
    """Train the adapter with the combined loss and dev-loss early stopping."""
    from . import stages

    _echo_outputs(stages.stage_train(_load_cfg(ctx), dump_loss_terms=dump_loss_terms))


@cli.command("apply")
@click.pass_context
def apply_cmd(ctx):
    """Apply the trained adapter to passage and eval-query embeddings."""
    from . import stages

    _echo_outputs(stages.stage_apply(_load_cfg(ctx)))


@cli.command()
@click.pass_context
def retrieve(ctx):
    """Write baseline and adapted TREC runs for the eval queries."""
    from . import stages

    _echo_outputs(stages.stage_retrieve(_load_cfg(ctx)))


@cli.command()
@click.pass_context
def evaluate(ctx):
    """NDCG@10 / Recall@100 / MAP for the baseline and adapted runs."""
    from . import stages

    _echo_outputs(stages.stage_evaluate(_load_cfg(ctx)))


@cli.command("rerank-eval")
@click.option("--run", "run_path", type=click.Path(), default=None, help="run file to rerank")
@click.option("--scores", "scores_path", type=click.Path(), default=None, help="raw score file")
@click.option("--depth", type=int, default=100, show_default=True)
@click.pass_context
def rerank_eval(ctx, run_path, scores_path, depth):
    """Rerank a run's top-depth by teacher score and compare metrics."""
    from . import stages

    _echo_outputs(
        stages.stage_rerank_eval(
            _load_cfg(ctx),
            run_path=Path(run_path) if run_path else None,
            scores_path=Path(scores_path) if scores_path else None,
            depth=depth,
        )
    )


@cli.command("sweep-threshold")
@click.option(
    "--thresholds",
    default="0.3,0.6,0.95",
    show_default=True,
    help="comma-separated de-noising thresholds",
)
@click.pass_context
def sweep_threshold(ctx, thresholds):
    """Re-mine, re-train, and re-evaluate across de-noising thresholds."""
    from . import stages

    try:
        values = [float(t) for t in thresholds.split(",") if t.strip()]
    except ValueError:
        raise click.UsageError(f"cannot parse --thresholds {thresholds!r}")
    _echo_outputs(stages.stage_sweep(_load_cfg(ctx), values))


@cli.command()
@click.pass_context
def pipeline(ctx):
    """Run every stage in order into the configured output directory."""
    from . import stages

    _echo_outputs(stages.run_pipeline(_load_cfg(ctx)))


def main(argv: list[str] | None = None) -> int:
    from .errors import RetfitError

    try:
        cli.main(args=argv, standalone_mode=False)
        return 0
    except click.exceptions.Exit as exc:
        return exc.exit_code
    except click.ClickException as exc:
        exc.show()
        return 1
    except click.exceptions.Abort:
        return 1
    except RetfitError as exc:
        click.echo(f"error: {exc}", err=True)
        return exc.exit_code
    except FileNotFoundError as exc:
        click.echo(f"error: missing file: {exc}", err=True)
        return 2


if __name__ == "__main__":
    sys.exit(main())
