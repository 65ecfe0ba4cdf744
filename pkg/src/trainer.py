"""
Training loop: one discriminator step then one generator step per iteration,
each sub-network with its own Adam state.
"""
import logging
import time
from collections.abc import Callable
from pathlib import Path

import numpy as np
import torch
from pydantic import BaseModel

from .checkpoint import load_checkpoint, save_checkpoint
from .config import ADAM_EPS, Baseline, DatasetError, NonFiniteError, SegInput, SegMode, TrainConfig
from .data import Sample, sample_visibility
from .imputation import NearestNeighborIndex, impute_average, impute_zero
from .losses import (
    LossTerms,
    adversarial_loss_d,
    adversarial_loss_g,
    content_consistency_loss,
    dice_loss,
    image_consistency_loss,
    one_hot_masks,
    reconstruction_loss,
    style_consistency_loss,
    total_loss,
)
from .remic_model import ReMIC, to_network

logger = logging.getLogger(__name__)

LOSS_LOG_NAME = "loss_log.tsv"


def build_optimizers(model: ReMIC, config: TrainConfig) -> dict[str, torch.optim.Adam]:
    return {
        name: torch.optim.Adam(module.parameters(), lr=config.lr, betas=(config.beta1, config.beta2), eps=ADAM_EPS)
        for name, module in model.parameter_groups().items()
    }


def adam_step(name: str, optimizer: torch.optim.Optimizer) -> None:
    """Apply one Adam update, refusing to touch parameters when any gradient is non-finite."""
    for group in optimizer.param_groups:
        for p in group["params"]:
            if p.grad is not None and not torch.isfinite(p.grad).all():
                raise NonFiniteError(f"Non-finite gradient in parameter group '{name}' (shape {tuple(p.shape)}).")
    optimizer.step()


class LossRecord(BaseModel):
    """Loss values of one iteration. Per-domain lists are indexed by domain;
    `x_cyc` is 0.0 for domains that were masked."""

    iteration: int
    adv: list[float]
    x_cyc: list[float]
    s_cyc: list[float]
    rec: list[float]
    c_cyc: float
    seg: float | None = None
    d_adv: list[float]
    d_total: float
    g_total: float
    cross_rec_a: list[float] | None = None
    cross_rec_b: list[float] | None = None

    def as_row(self) -> dict[str, float]:
        row: dict[str, float] = {"iteration": self.iteration}
        for name in ("adv", "x_cyc", "s_cyc", "rec"):
            row.update({f"{name}.{i}": v for i, v in enumerate(getattr(self, name))})
        row["c_cyc"] = self.c_cyc
        if self.seg is not None:
            row["seg"] = self.seg
        for name in ("cross_rec_a", "cross_rec_b"):
            values = getattr(self, name)
            if values is not None:
                row.update({f"{name}.{i}": v for i, v in enumerate(values)})
        row.update({f"d_adv.{i}": v for i, v in enumerate(self.d_adv)})
        row["d_total"] = self.d_total
        row["g_total"] = self.g_total
        return row


def truncate_loss_log(path: Path, iteration: int) -> None:
    """Drop logged rows past `iteration`, so a resumed run does not repeat iterations."""
    lines = path.read_text().splitlines(keepends=True)
    kept = lines[:1] + [line for line in lines[1:] if int(line.split("\t", 1)[0]) <= iteration]
    if len(kept) < len(lines):
        logger.info("Dropping %d logged iterations after %d from %s", len(lines) - len(kept), iteration, path)
        path.write_text("".join(kept))


def _value(x: torch.Tensor | float | None) -> float:
    return 0.0 if x is None else float(x)


def swap_reconstructions(
    model: ReMIC, x_a: torch.Tensor, x_b: torch.Tensor, visibility: torch.Tensor
) -> tuple[list[torch.Tensor], list[torch.Tensor]]:
    """Exchange style codes between two samples in every visible domain.

    Each sample's image is regenerated from its own content code and the style
    code the other sample's generated image re-encodes to, and scored against
    the original.
    """
    content_a = model.encode_content(x_a, visibility)
    content_b = model.encode_content(x_b, visibility)
    rec_a, rec_b = [], []
    for i in range(model.num_domains):
        if not bool(visibility[i]):
            rec_a.append(torch.zeros(()))
            rec_b.append(torch.zeros(()))
            continue
        style_a = model.encode_style(x_a[:, i: i + 1], i)
        style_b = model.encode_style(x_b[:, i: i + 1], i)
        a_in_b = model.generate(content_a, style_b, i)
        b_in_a = model.generate(content_b, style_a, i)
        rec_a.append(image_consistency_loss(model.generate(content_a, model.encode_style(b_in_a, i), i), x_a[:, i: i + 1]))
        rec_b.append(image_consistency_loss(model.generate(content_b, model.encode_style(a_in_b, i), i), x_b[:, i: i + 1]))
    return rec_a, rec_b


class Trainer:
    def __init__(self, model: ReMIC, config: TrainConfig, train_set: list[Sample]):
        if not train_set:
            raise DatasetError("Cannot train on an empty training set.")
        first = train_set[0]
        size = model.config.image_size
        if first.num_domains != model.num_domains or first.images.shape[1:] != (size, size):
            raise DatasetError(
                f"Training samples are {first.num_domains}x{first.images.shape[1]}x{first.images.shape[2]}, "
                f"the model expects {model.num_domains}x{size}x{size}."
            )
        self.use_seg = model.config.seg_mode is not SegMode.OFF
        if self.use_seg and any(s.seg_mask is None for s in train_set):
            raise DatasetError("Segmentation training needs a mask for every training sample.")
        self.model = model
        self.config = config
        self.samples = train_set
        self.optimizers = build_optimizers(model, config)
        self.rng = np.random.default_rng(config.seed)
        self.style_rng = torch.Generator().manual_seed(config.seed)
        self.nn_index = NearestNeighborIndex(train_set) if config.impute is Baseline.NN else None
        self.iteration = 0
        self.model.train()

    # --- Data ---
    def next_batch(self, visibility: torch.Tensor | None = None) -> tuple[torch.Tensor, torch.Tensor | None]:
        """Draw a batch. With `impute` set, the domains hidden by `visibility` are
        replaced by the imputation baseline's guess before the model sees them."""
        indices = [int(i) for i in self.rng.integers(0, len(self.samples), size=self.config.batch_size)]
        picked = [self.samples[i] for i in indices]
        if self.config.impute is not None and visibility is not None:
            flags = visibility.numpy()
            images = np.stack([self.impute(s.with_visibility(flags), i) for i, s in zip(indices, picked)])
        else:
            images = np.stack([s.images for s in picked])
        x = to_network(torch.from_numpy(images))
        masks = torch.from_numpy(np.stack([s.seg_mask for s in picked])) if self.use_seg else None
        return x, masks

    def impute(self, sample: Sample, index: int) -> np.ndarray:
        match self.config.impute:
            case Baseline.ZERO:
                return impute_zero(sample)
            case Baseline.AVERAGE:
                return impute_average(sample)
            case Baseline.NN:
                return self.nn_index.impute(sample, exclude=index)
            case _:
                raise ValueError(f"Cannot impute training data with {self.config.impute}.")

    def next_visibility(self) -> torch.Tensor:
        flags = sample_visibility(
            self.model.num_domains,
            self.config.mask_mode,
            self.rng,
            k=self.config.mask_k,
            missing=self.config.mask_domain,
        )
        return torch.from_numpy(flags)

    # --- Optimizer groups ---
    def _discriminator_groups(self) -> list[str]:
        return [f"discriminator_{i}" for i in range(self.model.num_domains)]

    def _generator_groups(self) -> list[str]:
        return [name for name in self.optimizers if not name.startswith("discriminator_")]

    # --- Steps ---
    def discriminator_step(self, x: torch.Tensor, visibility: torch.Tensor, styles: torch.Tensor) -> list[torch.Tensor]:
        model = self.model
        with torch.no_grad():
            content = model.encode_content(x, visibility)
            fakes = [model.generate(content, styles[:, i], i) for i in range(model.num_domains)]
        losses = [
            adversarial_loss_d(model.discriminate(x[:, i: i + 1], i), model.discriminate(fakes[i], i))
            for i in range(model.num_domains)
        ]
        if self.config.update_discriminators:
            model.zero_grad(set_to_none=True)
            torch.stack(losses).sum().backward()
            for name in self._discriminator_groups():
                adam_step(name, self.optimizers[name])
        return [loss.detach() for loss in losses]

    def generator_terms(
        self, x: torch.Tensor, visibility: torch.Tensor, styles: torch.Tensor, masks: torch.Tensor | None
    ) -> LossTerms:
        model = self.model
        n = model.num_domains
        content = model.encode_content(x, visibility)
        adv, x_cyc, s_cyc, rec, fakes = [], [], [], [], []
        for i in range(n):
            real = x[:, i: i + 1]
            if bool(visibility[i]):
                own = model.encode_style(real, i)
                x_cyc.append(image_consistency_loss(model.generate(content, own, i), real))
            else:
                x_cyc.append(None)
            fake = model.generate(content, styles[:, i], i)
            fakes.append(fake)
            rec.append(reconstruction_loss(fake, real))
            adv.append(adversarial_loss_g(model.discriminate(fake, i)))
            s_cyc.append(style_consistency_loss(model.encode_style(fake, i), styles[:, i]))
        all_visible = torch.ones(n, dtype=torch.bool)
        re_encoded = model.encode_content(torch.cat(fakes, dim=1), all_visible)
        c_cyc = content_consistency_loss(re_encoded.features, content.features)

        seg = None
        if self.use_seg:
            if model.config.seg_input is SegInput.COMPLETED:
                vis = visibility.view(1, -1, 1, 1)
                seg_x = torch.where(vis, x, torch.cat(fakes, dim=1).detach())
                seg_content = model.segmentation_content(seg_x, all_visible)
            else:
                seg_content = model.segmentation_content(x, visibility)
            probs = model.segment(seg_content)
            seg = dice_loss(probs, one_hot_masks(masks, model.config.num_classes), model.config.num_classes)
        return LossTerms(adv=adv, x_cyc=x_cyc, s_cyc=s_cyc, rec=rec, c_cyc=c_cyc, seg=seg)

    def _apply_generator_step(self, total: torch.Tensor, terms: LossTerms) -> None:
        if not torch.isfinite(total):
            breakdown = ", ".join(
                f"{name}={[round(_value(v), 6) for v in getattr(terms, name)]}" for name in ("adv", "x_cyc", "s_cyc", "rec")
            )
            raise NonFiniteError(
                f"Non-finite generator loss at iteration {self.iteration}: c_cyc={_value(terms.c_cyc):.6g}, "
                f"seg={_value(terms.seg):.6g}, {breakdown}"
            )
        self.model.zero_grad(set_to_none=True)
        total.backward()
        for name in self._generator_groups():
            adam_step(name, self.optimizers[name])

    def _record(self, terms: LossTerms, d_losses: list[torch.Tensor], total: torch.Tensor,
                cross: tuple[list, list] | None = None) -> LossRecord:
        return LossRecord(
            iteration=self.iteration,
            adv=[_value(v) for v in terms.adv],
            x_cyc=[_value(v) for v in terms.x_cyc],
            s_cyc=[_value(v) for v in terms.s_cyc],
            rec=[_value(v) for v in terms.rec],
            c_cyc=_value(terms.c_cyc),
            seg=None if terms.seg is None else _value(terms.seg),
            d_adv=[_value(v) for v in d_losses],
            d_total=float(sum(_value(v) for v in d_losses)),
            g_total=_value(total),
            cross_rec_a=None if cross is None else [_value(v) for v in cross[0]],
            cross_rec_b=None if cross is None else [_value(v) for v in cross[1]],
        )

    def train_iteration(self, x: torch.Tensor, visibility: torch.Tensor, masks: torch.Tensor | None = None) -> LossRecord:
        styles = self.model.prior_styles(x.shape[0], self.style_rng)
        d_losses = self.discriminator_step(x, visibility, styles)
        terms = self.generator_terms(x, visibility, styles, masks)
        total = total_loss(terms, self.config.weights, include_seg=self.use_seg)
        self._apply_generator_step(total, terms)
        self.iteration += 1
        return self._record(terms, d_losses, total)

    def multi_sample_iteration(
        self, x_a: torch.Tensor, x_b: torch.Tensor, visibility: torch.Tensor, masks: torch.Tensor | None = None
    ) -> LossRecord:
        """Standard losses on `x_a` plus the style-swap reconstructions of both samples."""
        styles = self.model.prior_styles(x_a.shape[0], self.style_rng)
        d_losses = self.discriminator_step(x_a, visibility, styles)
        terms = self.generator_terms(x_a, visibility, styles, masks)
        rec_a, rec_b = swap_reconstructions(self.model, x_a, x_b, visibility)
        weight = self.config.weights.lambda_x_cyc
        terms.extra = {f"cross_rec_a.{i}": weight * v for i, v in enumerate(rec_a)}
        terms.extra.update({f"cross_rec_b.{i}": weight * v for i, v in enumerate(rec_b)})
        total = total_loss(terms, self.config.weights, include_seg=self.use_seg)
        self._apply_generator_step(total, terms)
        self.iteration += 1
        return self._record(terms, d_losses, total, (rec_a, rec_b))

    def step(self) -> LossRecord:
        visibility = self.next_visibility()
        x, masks = self.next_batch(visibility)
        x_b = self.next_batch(visibility)[0] if self.config.multi_sample else None
        if self.config.impute is not None:
            # Imputed batches are complete images as far as the model is concerned.
            visibility = torch.ones_like(visibility)
        if x_b is not None:
            return self.multi_sample_iteration(x, x_b, visibility, masks)
        return self.train_iteration(x, visibility, masks)

    # --- Persistence ---
    def save(self, path: str | Path) -> Path:
        return save_checkpoint(
            path, self.model, self.iteration, self.optimizers, self.rng, self.style_rng, self.config
        )

    def resume(self, path: str | Path) -> int:
        data = load_checkpoint(path, self.model, self.optimizers, self.rng, self.style_rng)
        self.iteration = data.iteration
        return self.iteration

    def fit(
        self,
        iterations: int | None = None,
        out_dir: str | Path | None = None,
        on_step: Callable[[LossRecord], None] | None = None,
    ) -> list[LossRecord]:
        """Run until `iterations` total iterations, logging and checkpointing into `out_dir`."""
        target = self.config.iterations if iterations is None else iterations
        out_dir = Path(out_dir) if out_dir is not None else None
        log = None
        if out_dir is not None:
            out_dir.mkdir(parents=True, exist_ok=True)
            log_path = out_dir / LOSS_LOG_NAME
            resuming = self.iteration > 0 and log_path.exists()
            if resuming:
                truncate_loss_log(log_path, self.iteration)
            log = open(log_path, "a" if resuming else "w")
        records = []
        start = time.perf_counter()
        header_written = log is not None and log.tell() > 0
        try:
            while self.iteration < target:
                record = self.step()
                records.append(record)
                if log is not None:
                    row = record.as_row()
                    if not header_written:
                        log.write("\t".join(list(row) + ["wall_clock"]) + "\n")
                        header_written = True
                    values = [str(record.iteration)] + [f"{v:.6g}" for k, v in row.items() if k != "iteration"]
                    log.write("\t".join(values + [f"{time.perf_counter() - start:.3f}"]) + "\n")
                if self.iteration % self.config.log_every == 0:
                    logger.info(
                        "iter %d  g_total %.4f  d_total %.4f  rec %.4f",
                        self.iteration, record.g_total, record.d_total, float(np.mean(record.rec)),
                    )
                if out_dir is not None and self.config.checkpoint_every and self.iteration % self.config.checkpoint_every == 0:
                    self.save(out_dir / f"iter_{self.iteration:06d}.rmck")
                if on_step is not None:
                    on_step(record)
        finally:
            if log is not None:
                log.close()
        if out_dir is not None:
            self.save(out_dir / "final.rmck")
        return records
