"""
Training objectives. Every L1 term uses mean reduction so the loss weights do
not depend on image resolution. The adversarial terms are least-squares (LSGAN)
and take the list of score maps a multi-scale discriminator returns.
"""
from collections.abc import Sequence
from dataclasses import dataclass, field

import torch

from .config import DICE_EPS, LossWeights, ShapeError

Scalar = torch.Tensor | float


def _check_same_shape(a: torch.Tensor, b: torch.Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{what}: shapes {tuple(a.shape)} and {tuple(b.shape)} differ.")


def l1_mean(a: torch.Tensor, b: torch.Tensor, what: str = "L1 loss") -> torch.Tensor:
    _check_same_shape(a, b, what)
    return (a - b).abs().mean()


def image_consistency_loss(reconstructed: torch.Tensor, real: torch.Tensor) -> torch.Tensor:
    """Reconstruction from the domain's own encoded style against the real image."""
    return l1_mean(reconstructed, real, "image consistency loss")


def content_consistency_loss(re_encoded: torch.Tensor, content: torch.Tensor) -> torch.Tensor:
    return l1_mean(re_encoded, content, "content consistency loss")


def style_consistency_loss(re_encoded: torch.Tensor, style: torch.Tensor) -> torch.Tensor:
    if re_encoded.shape[-1] != style.shape[-1]:
        raise ShapeError(f"style consistency loss: lengths {re_encoded.shape[-1]} and {style.shape[-1]} differ.")
    return l1_mean(re_encoded, style, "style consistency loss")


def reconstruction_loss(generated: torch.Tensor, real: torch.Tensor) -> torch.Tensor:
    """Prior-style generation against ground truth."""
    return l1_mean(generated, real, "reconstruction loss")


def adversarial_loss_d(real_scores: Sequence[torch.Tensor], fake_scores: Sequence[torch.Tensor]) -> torch.Tensor:
    """Mean over scales of mean (D(x) - 1)^2 + mean D(fake)^2."""
    if not real_scores or len(real_scores) != len(fake_scores):
        raise ShapeError(
            f"Discriminator loss needs matching non-empty scale lists, got {len(real_scores)} and {len(fake_scores)}."
        )
    per_scale = [((r - 1.0) ** 2).mean() + (f**2).mean() for r, f in zip(real_scores, fake_scores)]
    return torch.stack(per_scale).mean()


def adversarial_loss_g(fake_scores: Sequence[torch.Tensor]) -> torch.Tensor:
    """Mean over scales of mean (D(fake) - 1)^2."""
    if not fake_scores:
        raise ShapeError("Generator adversarial loss needs at least one scale.")
    return torch.stack([((f - 1.0) ** 2).mean() for f in fake_scores]).mean()


def dice_loss(pred: torch.Tensor, target: torch.Tensor, num_classes: int, eps: float = DICE_EPS) -> torch.Tensor:
    """1 - mean over classes of 2 sum(p*y) / (sum p^2 + sum y^2 + eps).

    `pred` and `target` are (B, L, H, W); sums run over batch and pixels.
    """
    if num_classes < 1:
        raise ShapeError(f"dice_loss needs at least one class, got {num_classes}.")
    _check_same_shape(pred, target, "dice loss")
    if pred.shape[1] != num_classes:
        raise ShapeError(f"dice loss: prediction has {pred.shape[1]} channels for {num_classes} classes.")
    dims = (0, 2, 3)
    overlap = 2.0 * (pred * target).sum(dim=dims)
    denom = (pred**2).sum(dim=dims) + (target**2).sum(dim=dims) + eps
    return 1.0 - (overlap / denom).mean()


def one_hot_masks(mask: torch.Tensor, num_classes: int) -> torch.Tensor:
    """(B, H, W) integer labels -> (B, L, H, W) float targets; L=1 means foreground vs background."""
    if num_classes == 1:
        return (mask > 0).to(torch.float32).unsqueeze(1)
    return torch.nn.functional.one_hot(mask.long(), num_classes).permute(0, 3, 1, 2).to(torch.float32)


@dataclass
class LossTerms:
    """Per-domain components of the total objective. `x_cyc[i]` is None for a missing domain."""

    adv: list[Scalar]
    x_cyc: list[Scalar | None]
    s_cyc: list[Scalar]
    rec: list[Scalar]
    c_cyc: Scalar
    seg: Scalar | None = None
    extra: dict[str, Scalar] = field(default_factory=dict)


def total_loss(terms: LossTerms, weights: LossWeights, include_seg: bool = False) -> Scalar:
    """Weighted generator-side objective.

    sum_i (adv_i*l_adv + x_cyc_i*l_x + s_cyc_i*l_s + rec_i*l_rec) + c_cyc*l_c (+ seg*l_seg).
    Terms in `extra` are weighted by the caller and added as-is.
    """
    values = weights.model_dump()
    negative = sorted(k for k, v in values.items() if v < 0)
    if negative:
        raise ValueError(f"Loss weights must be non-negative: {', '.join(negative)}.")
    n = len(terms.adv)
    if not (len(terms.x_cyc) == len(terms.s_cyc) == len(terms.rec) == n):
        raise ShapeError("Per-domain loss lists must all have one entry per domain.")

    total: Scalar = weights.lambda_c_cyc * terms.c_cyc
    for i in range(n):
        total = total + weights.lambda_adv * terms.adv[i]
        if terms.x_cyc[i] is not None:
            total = total + weights.lambda_x_cyc * terms.x_cyc[i]
        total = total + weights.lambda_s_cyc * terms.s_cyc[i]
        total = total + weights.lambda_rec * terms.rec[i]
    if include_seg:
        if terms.seg is None:
            raise ValueError("include_seg is set but no segmentation loss was computed.")
        total = total + weights.lambda_seg * terms.seg
    for value in terms.extra.values():
        total = total + value
    return total
