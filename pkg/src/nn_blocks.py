"""
Differentiable building blocks for the completion networks.

Every operation is a pure function of its inputs and explicit parameters; the
module classes below only own parameters and call into the functions. Reverse
mode gradients come from torch autograd, exposed through `backward`.
"""
from collections.abc import Sequence
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .config import ENCODER_ACTIVATION, LEAKY_SLOPE, NORM_EPS, GraphError, NormMode, ShapeError


@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel_size: int
    stride: int = 1
    padding: int = 0
    has_bias: bool = True

    def __post_init__(self):
        if min(self.in_channels, self.out_channels, self.kernel_size, self.stride) < 1:
            raise ShapeError(f"Invalid conv spec {self}: channels, kernel and stride must be positive.")
        if self.padding < 0:
            raise ShapeError(f"Invalid conv spec {self}: padding must be non-negative.")

    def output_size(self, size: int) -> int:
        out = (size + 2 * self.padding - self.kernel_size) // self.stride + 1
        if out < 1:
            raise ShapeError(
                f"Input size {size} is too small for kernel {self.kernel_size}, "
                f"stride {self.stride}, padding {self.padding}."
            )
        return out


@dataclass(frozen=True)
class AffineStats:
    """Per-channel AdaIN scale and shift, shaped (C,) or (B, C)."""

    gamma: torch.Tensor
    beta: torch.Tensor


def check_tensor4(x: torch.Tensor, name: str = "x") -> None:
    if x.dim() != 4:
        raise ShapeError(f"{name} must be (batch, channel, height, width), got shape {tuple(x.shape)}.")


def conv2d(
    x: torch.Tensor, spec: ConvSpec, weight: torch.Tensor, bias: torch.Tensor | None = None
) -> torch.Tensor:
    """Cross-correlation with zero padding."""
    check_tensor4(x)
    if x.shape[1] != spec.in_channels:
        raise ShapeError(f"conv2d expects {spec.in_channels} input channels, got {x.shape[1]}.")
    expected = (spec.out_channels, spec.in_channels, spec.kernel_size, spec.kernel_size)
    if tuple(weight.shape) != expected:
        raise ShapeError(f"conv2d weight must be {expected}, got {tuple(weight.shape)}.")
    if spec.has_bias:
        if bias is None or tuple(bias.shape) != (spec.out_channels,):
            raise ShapeError(f"conv2d bias must be ({spec.out_channels},).")
    elif bias is not None:
        raise ShapeError("conv2d got a bias for a spec without one.")
    spec.output_size(x.shape[2])
    spec.output_size(x.shape[3])
    return F.conv2d(x, weight, bias, stride=spec.stride, padding=spec.padding)


def _channel_stats(x: torch.Tensor, eps: float) -> tuple[torch.Tensor, torch.Tensor]:
    mean = x.mean(dim=(2, 3), keepdim=True)
    var = x.var(dim=(2, 3), keepdim=True, correction=0)
    return mean, torch.sqrt(var + eps)


def instance_norm(x: torch.Tensor, eps: float = NORM_EPS) -> torch.Tensor:
    """(z - mean) / sqrt(population variance + eps), per (batch, channel)."""
    check_tensor4(x)
    mean, std = _channel_stats(x, eps)
    return (x - mean) / std


def _as_channel_param(value: torch.Tensor, x: torch.Tensor, name: str) -> torch.Tensor:
    batch, channels = x.shape[:2]
    if value.dim() == 1 and value.shape[0] == channels:
        return value.view(1, channels, 1, 1)
    if value.dim() == 2 and value.shape[1] == channels and value.shape[0] in (1, batch):
        return value.view(value.shape[0], channels, 1, 1)
    raise ShapeError(f"AdaIN {name} of shape {tuple(value.shape)} does not match {channels} channels.")


def adain(x: torch.Tensor, stats: AffineStats, eps: float = NORM_EPS) -> torch.Tensor:
    """gamma * instance_norm(x) + beta."""
    gamma = _as_channel_param(stats.gamma, x, "gamma")
    beta = _as_channel_param(stats.beta, x, "beta")
    return gamma * instance_norm(x, eps) + beta


def leaky_relu(x: torch.Tensor, slope: float = LEAKY_SLOPE) -> torch.Tensor:
    return F.leaky_relu(x, negative_slope=slope)


def nearest_upsample2x(x: torch.Tensor) -> torch.Tensor:
    check_tensor4(x)
    return F.interpolate(x, scale_factor=2, mode="nearest")


def downsample_avg2x(x: torch.Tensor) -> torch.Tensor:
    check_tensor4(x)
    if x.shape[2] % 2 or x.shape[3] % 2:
        raise ShapeError(f"downsample_avg2x needs even height and width, got {tuple(x.shape[2:])}.")
    return F.avg_pool2d(x, kernel_size=2)


def global_avg_pool(x: torch.Tensor) -> torch.Tensor:
    check_tensor4(x)
    return x.mean(dim=(2, 3))


def fully_connected(v: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor | None = None) -> torch.Tensor:
    if weight.dim() != 2 or v.shape[-1] != weight.shape[1]:
        raise ShapeError(
            f"fully_connected: input width {v.shape[-1]} does not match weight {tuple(weight.shape)}."
        )
    if bias is not None and tuple(bias.shape) != (weight.shape[0],):
        raise ShapeError(f"fully_connected bias must be ({weight.shape[0]},), got {tuple(bias.shape)}.")
    return F.linear(v, weight, bias)


def activation(x: torch.Tensor, name: str) -> torch.Tensor:
    match name:
        case "relu":
            return F.relu(x)
        case "lrelu":
            return leaky_relu(x)
        case "tanh":
            return torch.tanh(x)
        case "none":
            return x
        case _:
            raise ValueError(f"Unknown activation: {name}.")


@dataclass(frozen=True)
class ResidualParams:
    """Weights of the two 3x3 convolutions in a residual block."""

    weight1: torch.Tensor
    bias1: torch.Tensor
    weight2: torch.Tensor
    bias2: torch.Tensor


def residual_block(
    x: torch.Tensor,
    params: ResidualParams,
    norm_mode: NormMode = NormMode.IN,
    stats: Sequence[AffineStats] | None = None,
    act: str = ENCODER_ACTIVATION,
) -> torch.Tensor:
    """x + conv -> norm -> act -> conv -> norm. AdaIN mode takes one AffineStats per norm."""
    channels = x.shape[1]
    spec = ConvSpec(channels, channels, 3, 1, 1)
    if norm_mode is NormMode.ADAIN and (stats is None or len(stats) != 2):
        raise ShapeError("AdaIN residual block needs exactly two AffineStats.")

    def norm(h: torch.Tensor, index: int) -> torch.Tensor:
        if norm_mode is NormMode.ADAIN:
            return adain(h, stats[index])
        return instance_norm(h)

    h = conv2d(x, spec, params.weight1, params.bias1)
    h = activation(norm(h, 0), act)
    h = conv2d(h, spec, params.weight2, params.bias2)
    return x + norm(h, 1)


def backward(
    outputs: torch.Tensor | Sequence[torch.Tensor],
    inputs: Sequence[torch.Tensor],
    seed_gradients: torch.Tensor | Sequence[torch.Tensor] | None = None,
) -> tuple[torch.Tensor, ...]:
    """Reverse-mode gradients of `outputs` with respect to `inputs`."""
    inputs = list(inputs)
    detached = [i for i, t in enumerate(inputs) if not t.requires_grad]
    if detached:
        raise GraphError(f"Inputs {detached} do not require gradients and are not part of the graph.")
    grads = torch.autograd.grad(outputs, inputs, grad_outputs=seed_gradients, allow_unused=True)
    missing = [i for i, g in enumerate(grads) if g is None]
    if missing:
        raise GraphError(f"Inputs {missing} are not part of the recorded graph.")
    return tuple(grads)


# --- Parameter-owning layers ---
def init_conv(conv: nn.Conv2d | nn.Linear) -> None:
    nn.init.kaiming_normal_(conv.weight, mode="fan_in", nonlinearity="relu")
    if conv.bias is not None:
        nn.init.zeros_(conv.bias)


class ConvBlock(nn.Module):
    """Convolution followed by an optional normalization and an activation."""

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        kernel_size: int,
        stride: int = 1,
        padding: int = 0,
        norm: str = "in",
        act: str = ENCODER_ACTIVATION,
    ):
        super().__init__()
        self.spec = ConvSpec(in_channels, out_channels, kernel_size, stride, padding)
        self.conv = nn.Conv2d(in_channels, out_channels, kernel_size, stride, padding)
        init_conv(self.conv)
        if norm == "ln":
            # Layer norm over (C, H, W) with per-channel affine.
            self.layer_norm = nn.GroupNorm(1, out_channels, eps=NORM_EPS)
        elif norm not in ("in", "none"):
            raise ValueError(f"Unknown norm: {norm}.")
        self.norm = norm
        self.act = act

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = conv2d(x, self.spec, self.conv.weight, self.conv.bias)
        if self.norm == "in":
            x = instance_norm(x)
        elif self.norm == "ln":
            x = self.layer_norm(x)
        return activation(x, self.act)


class ResidualBlock(nn.Module):
    def __init__(self, channels: int, norm_mode: NormMode = NormMode.IN):
        super().__init__()
        self.norm_mode = norm_mode
        self.conv1 = nn.Conv2d(channels, channels, 3, 1, 1)
        self.conv2 = nn.Conv2d(channels, channels, 3, 1, 1)
        init_conv(self.conv1)
        init_conv(self.conv2)

    def params(self) -> ResidualParams:
        return ResidualParams(self.conv1.weight, self.conv1.bias, self.conv2.weight, self.conv2.bias)

    def forward(self, x: torch.Tensor, stats: Sequence[AffineStats] | None = None) -> torch.Tensor:
        return residual_block(x, self.params(), self.norm_mode, stats)
