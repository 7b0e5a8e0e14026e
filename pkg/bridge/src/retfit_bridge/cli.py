"""Bridge CLI: export-embeddings | export-scores | generate-queries."""

from __future__ import annotations

import logging
import sys

import click

from . import BridgeError
from .jobs import ExportJob, export_embeddings, export_teacher_scores, generate_queries


@click.group()
@click.option("--log-level", default="info")
def cli(log_level):
    """Connect real models to the pipeline's file formats."""
    logging.basicConfig(level=getattr(logging, log_level.upper(), logging.INFO))


def _job(model, input_path, output_path, batch_size, device, fmt, expect_dim, deterministic):
    return ExportJob(
        model=model,
        input_path=input_path,
        output_path=output_path,
        batch_size=batch_size,
        device=device,
        output_format=fmt,
        expect_dim=expect_dim,
        deterministic=deterministic,
    )


@cli.command("export-embeddings")
@click.option("--model", required=True, help="hash:<dim> or st:<name-or-path>")
@click.option("--input", "input_path", required=True, type=click.Path(exists=True))
@click.option("--output", "output_path", required=True, type=click.Path())
@click.option("--batch-size", default=32, show_default=True)
@click.option("--device", default="cpu", show_default=True)
@click.option("--format", "fmt", default="binary", type=click.Choice(["binary", "jsonl"]), show_default=True)
@click.option("--dim", "expect_dim", type=int, default=None, help="declared dimension to enforce")
@click.option("--deterministic/--no-deterministic", default=True, show_default=True)
def export_embeddings_cmd(model, input_path, output_path, batch_size, device, fmt, expect_dim, deterministic):
    """Unit-norm embeddings for a corpus or query file."""
    out = export_embeddings(
        _job(model, input_path, output_path, batch_size, device, fmt, expect_dim, deterministic)
    )
    click.echo(str(out))


@cli.command("export-scores")
@click.option("--model", default="overlap", show_default=True, help="overlap or ce:<name-or-path>")
@click.option("--corpus", "corpus_path", required=True, type=click.Path(exists=True))
@click.option("--queries", "queries_path", required=True, type=click.Path(exists=True))
@click.option("--pairs", "pairs_path", required=True, type=click.Path(exists=True))
@click.option("--output", "output_path", required=True, type=click.Path())
@click.option("--batch-size", default=32, show_default=True)
@click.option("--device", default="cpu", show_default=True)
def export_scores_cmd(model, corpus_path, queries_path, pairs_path, output_path, batch_size, device):
    """Raw teacher scores for (query, passage) pairs."""
    job = _job(model, corpus_path, output_path, batch_size, device, "jsonl", None, True)
    out = export_teacher_scores(job, pairs_path, queries_path)
    click.echo(str(out))


@cli.command("generate-queries")
@click.option("--qtype", required=True, help="question | claim | title | keywords | user_search | user_search_fewshot")
@click.option("--input", "input_path", required=True, type=click.Path(exists=True))
@click.option("--output", "output_path", required=True, type=click.Path())
@click.option("--examples", "examples_path", type=click.Path(exists=True), default=None, help="up to 3 passage-query pairs")
@click.option("--deterministic/--no-deterministic", default=True, show_default=True)
def generate_queries_cmd(qtype, input_path, output_path, examples_path, deterministic):
    """Generate one query per passage via the configured LLM endpoint."""
    job = _job("llm", input_path, output_path, 1, "cpu", "jsonl", None, deterministic)
    out, skipped = generate_queries(job, qtype, examples_path)
    click.echo(str(out))
    if skipped:
        click.echo(f"skipped {len(skipped)} passages", err=True)


def main(argv: list[str] | None = None) -> int:
    try:
        cli.main(args=argv, standalone_mode=False)
        return 0
    except click.exceptions.Exit as exc:
        return exc.exit_code
    except click.ClickException as exc:
        exc.show()
        return 1
    except BridgeError as exc:
        click.echo(f"error: {exc}", err=True)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
