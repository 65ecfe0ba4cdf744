import logging
import sys
from pathlib import Path

import click
from rich.console import Console
from rich.logging import RichHandler
from rich.progress import BarColumn, MofNCompleteColumn, Progress, TextColumn, TimeElapsedColumn
from typer import Argument, Exit, Option, Typer

from client import (
    complete_sample,
    evaluate_checkpoint,
    ingest_images,
    make_synthetic_dataset,
    summarize_loss_log,
    train_model,
    write_report_table,
)
from src.config import Baseline, RemicError, RunConfig, SynthConfig, load_config
from src.trainer import LOSS_LOG_NAME

console = Console(soft_wrap=True)

app = Typer(
    no_args_is_help=True,
    pretty_exceptions_enable=False,
    help="Multi-domain image completion and segmentation toolkit",
)


def fail(action: str, e: Exception) -> None:
    console.print(f"Error {action}: {e}", markup=False, highlight=False)
    raise Exit(1)


@app.callback()
def setup(verbose: bool = Option(False, "--verbose", "-v", help="Log debug messages")):
    """
    Complete missing image domains from the visible ones.
    Run a command with --help to see its options.
    """
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(message)s",
        handlers=[RichHandler(console=console, show_path=False)],
        force=True,
    )


@app.command(no_args_is_help=True)
def make_synth(
    out_dir: Path = Argument(..., help="Directory to write the dataset into"),
    domains: int = Option(3, help="Number of image domains"),
    size: int = Option(32, help="Image height and width in pixels"),
    train: int = Option(64, help="Number of training samples"),
    test: int = Option(16, help="Number of test samples"),
    classes: int = Option(2, help="Segmentation classes including background (2-4)"),
    seed: int = Option(0, help="Generator seed"),
):
    """Generate a synthetic multi-domain dataset with segmentation masks."""
    try:
        config = SynthConfig(num_domains=domains, image_size=size, num_train=train, num_test=test,
                             num_classes=classes, seed=seed)
        path = make_synthetic_dataset(out_dir, config)
        console.print(f"Successfully generated {train} train / {test} test samples in: {path}")
    except Exception as e:
        fail("generating dataset", e)


@app.command(no_args_is_help=True)
def ingest(
    src: Path = Argument(..., help="Directory of <split>/<sample>/domain_<i>.png images"),
    out_dir: Path = Argument(..., help="Directory to write the dataset into"),
    classes: int = Option(2, help="Segmentation classes including background"),
):
    """Convert 8-bit grayscale image folders into a dataset."""
    try:
        path = ingest_images(src, out_dir, classes)
        console.print(f"Successfully ingested images. Dataset saved to: {path}")
    except Exception as e:
        fail("ingesting images", e)


@app.command(no_args_is_help=True)
def train(
    dataset: Path = Argument(..., help="Dataset directory"),
    out_dir: Path = Argument(..., help="Directory for checkpoints and the loss log"),
    config: Path | None = Option(None, "--config", "-c", help="KEY=VALUE config file (see docs/config.md)"),
    resume: Path | None = Option(None, "--resume", help="Checkpoint to continue from"),
    iterations: int | None = Option(None, help="Override the configured number of iterations"),
):
    """Train a completion model on the dataset's train split."""
    try:
        run_config = load_config(config) if config else RunConfig()
        total = iterations if iterations is not None else run_config.train.iterations
        progress = Progress(
            TextColumn("[progress.description]{task.description}"),
            BarColumn(),
            MofNCompleteColumn(),
            TimeElapsedColumn(),
            console=console,
        )
        with progress:
            task = progress.add_task("Training", total=total)
            checkpoint = train_model(
                dataset, out_dir, config, resume, iterations,
                on_step=lambda record: progress.update(task, completed=record.iteration),
            )
        summary = summarize_loss_log(out_dir / LOSS_LOG_NAME)
        console.print(f"Reconstruction loss {summary['rec_first']:.4f} -> {summary['rec_last']:.4f}")
        console.print(f"Successfully trained model. Checkpoint saved to: {checkpoint}")
    except Exception as e:
        fail("training model", e)


@app.command(no_args_is_help=True)
def complete(
    checkpoint: Path = Argument(..., help="Model checkpoint (.rmck)"),
    dataset: Path = Argument(..., help="Dataset directory"),
    sample: str = Argument(..., help="Sample id, e.g. test_00064"),
    visible: str = Option(..., help="Comma-separated visible domain indices, e.g. 0,2"),
    out_dir: Path = Option(Path("completed"), "--out", help="Directory for the generated images"),
    style: str = Option("fixed", help="Style policy: fixed[:value], sample[:seed] or encoded"),
    split: str = Option("test", help="Split holding the sample"),
):
    """Generate every domain of one sample from its visible domains."""
    try:
        indices = [int(part) for part in visible.split(",") if part.strip()]
        written = complete_sample(checkpoint, dataset, sample, indices, out_dir, style, split)
        console.print(f"Successfully completed {sample}. {len(written)} images saved to: {out_dir}")
    except Exception as e:
        fail("completing sample", e)


@app.command(no_args_is_help=True)
def evaluate(
    dataset: Path = Argument(..., help="Dataset directory"),
    protocol: str = Option("single-missing:0", help="single-missing:<domain> or random-k:<k>"),
    checkpoint: Path | None = Option(None, help="Model checkpoint (.rmck)"),
    baseline: Baseline | None = Option(None, help="Score an imputation baseline instead of the model"),
    segment: bool = Option(False, "--segment", help="Also score the checkpoint's segmentor (Dice)"),
    seg_checkpoint: Path | None = Option(
        None, help="Score Dice with this checkpoint's segmentor instead (implies --segment)"
    ),
    seed: int = Option(0, help="Seed for random-k subsets"),
    scope: str = Option(
        "all",
        help="random-k scoring scope: 'all' scores every generated domain; 'missing' scores only the "
             "masked domains (random-k:<N-1> with --exhaustive then gives each domain's single-missing score)",
    ),
    exhaustive: bool = Option(False, "--exhaustive", help="random-k: visit every k-subset"),
    style: str = Option("fixed", help="Style policy for the model"),
    out_dir: Path = Option(Path("report"), "--out", help="Directory for report.txt and report.kv"),
):
    """Score a model or baseline on the test split under one protocol."""
    try:
        report = evaluate_checkpoint(dataset, out_dir, protocol, checkpoint, baseline, segment,
                                     seed, scope, exhaustive, style, seg_checkpoint)
        console.print((out_dir / "report.txt").read_text(), markup=False, highlight=False, end="")
        console.print(f"Successfully evaluated {report.sample_count} samples. Report saved to: {out_dir}")
    except Exception as e:
        fail("evaluating", e)


@app.command(no_args_is_help=True)
def report(
    reports: list[Path] = Argument(..., help="report.kv files or directories holding one"),
    out: Path | None = Option(None, "--out", help="Also write the table to this file"),
):
    """Print metrics reports side by side as an aligned table."""
    try:
        table = write_report_table(reports, out)
        console.print(table, markup=False, highlight=False, end="")
    except Exception as e:
        fail("formatting report", e)


def main(argv: list[str] | None = None) -> int:
    """Run the CLI and return its exit code instead of exiting."""
    try:
        result = app(args=argv, standalone_mode=False)
    except click.exceptions.Exit as e:
        return e.exit_code
    except click.ClickException as e:
        e.show()
        return 2
    except click.exceptions.Abort:
        return 1
    except RemicError as e:
        console.print(f"Error: {e}", markup=False, highlight=False)
        return 1
    return result if isinstance(result, int) else 0


if __name__ == "__main__":
    sys.exit(main())
