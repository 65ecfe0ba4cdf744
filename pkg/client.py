import logging
from collections.abc import Callable
from pathlib import Path

import numpy as np
import pandas as pd
from pydantic import ValidationError

from src.checkpoint import load_model, read_checkpoint
from src.config import (
    Baseline,
    ConfigError,
    ModelConfig,
    ProtocolError,
    RunConfig,
    SynthConfig,
    dump_config,
    load_config,
)
from src.data import generate_synthetic_dataset, load_dataset, save_dataset
from src.evaluation import (
    MetricsReport,
    ModelCompleter,
    ProtocolSpec,
    Segmenter,
    make_completer,
    run_protocol,
)
from src.image_io import ingest_image_directory, tile_grid, write_grayscale
from src.remic_model import ReMIC, StylePolicy
from src.tensor_io import save_tensor
from src.trainer import LossRecord, Trainer
from src.utils import configure_determinism, format_report_table

logger = logging.getLogger(__name__)


def make_synthetic_dataset(out_dir: str | Path, config: SynthConfig) -> Path:
    return save_dataset(out_dir, generate_synthetic_dataset(config))


def ingest_images(src: str | Path, out_dir: str | Path, num_classes: int) -> Path:
    return save_dataset(out_dir, ingest_image_directory(src, num_classes))


def train_model(
    dataset_dir: str | Path,
    out_dir: str | Path,
    config_path: str | Path | None = None,
    resume: str | Path | None = None,
    iterations: int | None = None,
    on_step: Callable[[LossRecord], None] | None = None,
) -> Path:
    """Train on the dataset's train split; returns the final checkpoint path."""
    config = load_config(config_path) if config_path else RunConfig()
    dataset = load_dataset(dataset_dir)
    manifest = dataset.manifest
    if manifest.height != manifest.width:
        raise ProtocolError(f"Training needs square images, got {manifest.height}x{manifest.width}.")
    # Domain count, image size and classes always come from the dataset.
    try:
        model_config = ModelConfig(**{
            **config.model.model_dump(),
            "num_domains": manifest.num_domains,
            "image_size": manifest.height,
            "num_classes": manifest.num_classes,
        })
    except ValidationError as e:
        raise ConfigError(f"The model config does not fit this dataset: {e.errors()[0]['msg']}") from e
    run = RunConfig(model=model_config, train=config.train)

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.env").write_text(dump_config(run))

    if run.train.deterministic:
        configure_determinism()
    trainer = Trainer(ReMIC(run.model), run.train, dataset.train)
    if resume:
        start = trainer.resume(resume)
        logger.info("Resuming from iteration %d", start)
    logger.info("Training %d parameters for %d iterations", trainer.model.num_parameters(),
                iterations if iterations is not None else run.train.iterations)
    trainer.fit(iterations, out_dir, on_step)
    return out_dir / "final.rmck"


def summarize_loss_log(log_path: str | Path, fraction: float = 0.1) -> dict[str, float]:
    """Mean reconstruction loss over the first and last `fraction` of logged iterations."""
    frame = pd.read_csv(log_path, sep="\t")
    if frame.empty:
        raise ValueError(f"Loss log {log_path} has no records.")
    rec = frame.filter(regex=r"^rec\.").mean(axis=1)
    window = max(1, int(len(frame) * fraction))
    return {
        "iterations": int(frame["iteration"].iloc[-1]),
        "rec_first": float(rec.iloc[:window].mean()),
        "rec_last": float(rec.iloc[-window:].mean()),
        "g_total_last": float(frame["g_total"].iloc[-window:].mean()),
    }


def complete_sample(
    checkpoint: str | Path,
    dataset_dir: str | Path,
    sample_id: str,
    visible: list[int],
    out_dir: str | Path,
    style: str = "fixed",
    split: str = "test",
) -> list[Path]:
    """Complete one sample from its visible domains and write every generated domain plus a grid."""
    model = load_model(checkpoint)
    sample = load_dataset(dataset_dir).find(sample_id, split)
    flags = np.zeros(sample.num_domains, dtype=bool)
    for i in visible:
        if not 0 <= i < sample.num_domains:
            raise ProtocolError(f"Visible domain {i} is out of range for {sample.num_domains} domains.")
        flags[i] = True
    masked = sample.with_visibility(flags)
    generated = model.complete_missing(masked, StylePolicy.parse(style))

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for i, image in enumerate(generated):
        save_tensor(out_dir / f"domain_{i}.rmt", image.astype(np.float32))
        written.append(write_grayscale(out_dir / f"domain_{i}.png", image))
    grid = tile_grid([list(masked.zero_filled()), list(generated)])
    written.append(write_grayscale(out_dir / "grid.png", grid))
    logger.info("Completed %s from domains %s into %s", sample_id, visible, out_dir)
    return written


def evaluate_checkpoint(
    dataset_dir: str | Path,
    out_dir: str | Path,
    protocol: str,
    checkpoint: str | Path | None = None,
    baseline: Baseline | None = None,
    segment: bool = False,
    seed: int = 0,
    scope: str = "all",
    exhaustive: bool = False,
    style: str = "fixed",
    seg_checkpoint: str | Path | None = None,
) -> MetricsReport:
    """Run one protocol on the test split with a model or a baseline; writes report.kv and report.txt.

    `scope` only affects random-k: "all" scores every generated domain, "missing"
    scores the masked domains alone (exhaustive random-k:<N-1> then reproduces each
    domain's single-missing score). Segmentation is scored by the segmentor of
    `seg_checkpoint` when given, otherwise by the evaluated checkpoint's own;
    `seg_checkpoint` implies `segment`.
    """
    if checkpoint is None and baseline is None:
        raise ProtocolError("Give a checkpoint, a baseline, or both (a baseline with --segment scores "
                            "the checkpoint's segmentor on its completions).")
    spec = ProtocolSpec.parse(protocol)
    dataset = load_dataset(dataset_dir)
    model = load_model(checkpoint) if checkpoint is not None else None
    if baseline is not None:
        completer = make_completer(baseline, dataset.train)
    else:
        completer = ModelCompleter(model, StylePolicy.parse(style), name=Path(checkpoint).stem)
    segmenter = None
    if seg_checkpoint is not None:
        seg_model = load_model(seg_checkpoint)
        manifest = dataset.manifest
        if (seg_model.num_domains, seg_model.config.image_size) != (manifest.num_domains, manifest.height):
            raise ProtocolError(
                f"{seg_checkpoint} segments {seg_model.num_domains} domains of {seg_model.config.image_size} px, "
                f"the dataset has {manifest.num_domains} of {manifest.height} px."
            )
        segmenter = Segmenter(seg_model)
    elif segment:
        if model is None:
            raise ProtocolError("Segmentation scoring needs --checkpoint or --seg-checkpoint with a trained segmentor.")
        segmenter = Segmenter(model)

    config = {"seed": str(seed), "scope": scope, "exhaustive": str(exhaustive).lower(), "style": style}
    if seg_checkpoint is not None:
        config["seg_checkpoint"] = Path(seg_checkpoint).name
    if checkpoint is not None:
        data = read_checkpoint(checkpoint)
        config["checkpoint"] = Path(checkpoint).name
        config["iteration"] = str(data.iteration)
        config.update({k: str(v) for k, v in data.header["model_config"].items()})
    report = run_protocol(completer, dataset.test, spec, seed, scope, exhaustive, segmenter, config)

    out_dir = Path(out_dir)
    report.save(out_dir)
    (out_dir / "report.txt").write_text(format_report_table([report]))
    return report


def write_report_table(report_paths: list[str | Path], out: str | Path | None = None) -> str:
    table = format_report_table([MetricsReport.load(p) for p in report_paths])
    if out is not None:
        Path(out).write_text(table)
    return table

