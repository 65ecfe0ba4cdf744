"""
Multi-domain image completion networks.

A unified content encoder reads all N domains at once (missing ones zero
filled), per-domain style encoders summarize appearance into a small vector,
and per-domain AdaIN generators recombine the shared content code with a style
code. Multi-scale LSGAN discriminators and an optional U-shaped segmentor sit
on top. Tensors inside the networks live in [-1, 1]; samples are stored in
[0, 1] and converted with `to_network` / `to_unit`.
"""
import logging
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from pydantic import BaseModel, ConfigDict
from torch import nn

from .config import (
    FIXED_STYLE_VALUE,
    MISSING_FILL,
    ModelConfig,
    NormMode,
    ProtocolError,
    SegMode,
    ShapeError,
    StyleKind,
)
from .data import Sample
from .nn_blocks import (
    AffineStats,
    ConvBlock,
    ResidualBlock,
    check_tensor4,
    downsample_avg2x,
    global_avg_pool,
    init_conv,
    nearest_upsample2x,
)

logger = logging.getLogger(__name__)

StyleCode = torch.Tensor


@dataclass(frozen=True)
class ContentCode:
    """Domain-shared feature map at 1/4 resolution plus the encoder's skip activations."""

    features: torch.Tensor
    skips: tuple[torch.Tensor, ...] = ()


class StylePolicy(BaseModel):
    """How complete_missing picks each domain's style code."""

    model_config = ConfigDict(frozen=True)

    kind: StyleKind = StyleKind.FIXED
    value: float = FIXED_STYLE_VALUE
    seed: int = 0

    @classmethod
    def parse(cls, text: str) -> "StylePolicy":
        """Parse 'fixed', 'fixed:0.5', 'sample:7' or 'encoded'."""
        name, _, arg = text.partition(":")
        try:
            kind = StyleKind(name)
        except ValueError:
            raise ValueError(f"Unknown style policy '{text}'. Use fixed[:value], sample[:seed] or encoded.")
        if kind is StyleKind.FIXED:
            return cls(kind=kind, value=float(arg) if arg else FIXED_STYLE_VALUE)
        if kind is StyleKind.SAMPLE:
            return cls(kind=kind, seed=int(arg) if arg else 0)
        return cls(kind=kind)


def to_network(x: torch.Tensor) -> torch.Tensor:
    return x * 2.0 - 1.0


def to_unit(x: torch.Tensor) -> torch.Tensor:
    return (x + 1.0) / 2.0


class ContentEncoder(nn.Module):
    """7x7 s1 -> 4x4 s2 -> 4x4 s2 down-sampling, then IN residual blocks."""

    def __init__(self, in_channels: int, base_channels: int, num_res_blocks: int):
        super().__init__()
        b = base_channels
        self.down = nn.ModuleList([
            ConvBlock(in_channels, b, 7, 1, 3),
            ConvBlock(b, 2 * b, 4, 2, 1),
            ConvBlock(2 * b, 4 * b, 4, 2, 1),
        ])
        self.res = nn.ModuleList([ResidualBlock(4 * b, NormMode.IN) for _ in range(num_res_blocks)])
        self.out_channels = 4 * b

    def forward(self, x: torch.Tensor) -> ContentCode:
        check_tensor4(x)
        if x.shape[2] % 4 or x.shape[3] % 4:
            raise ShapeError(f"Image size {tuple(x.shape[2:])} must be divisible by 4.")
        skips = []
        for i, block in enumerate(self.down):
            x = block(x)
            if i < len(self.down) - 1:
                skips.append(x)
        for block in self.res:
            x = block(x)
        return ContentCode(x, tuple(skips))


class StyleEncoder(nn.Module):
    """Down-sampling trunk without normalization, global pooling, linear head."""

    def __init__(self, base_channels: int, style_dim: int):
        super().__init__()
        b = base_channels
        self.trunk = nn.ModuleList([
            ConvBlock(1, b, 7, 1, 3, norm="none"),
            ConvBlock(b, 2 * b, 4, 2, 1, norm="none"),
            ConvBlock(2 * b, 4 * b, 4, 2, 1, norm="none"),
            ConvBlock(4 * b, 4 * b, 4, 2, 1, norm="none"),
            ConvBlock(4 * b, 4 * b, 4, 2, 1, norm="none"),
        ])
        self.fc = nn.Linear(4 * b, style_dim)
        init_conv(self.fc)

    def forward(self, x: torch.Tensor) -> StyleCode:
        for block in self.trunk:
            x = block(x)
        return self.fc(global_avg_pool(x))


class StyleMLP(nn.Module):
    """Maps a style code to (gamma, beta) for every AdaIN layer; gamma = 1 + output."""

    def __init__(self, style_dim: int, hidden: int, channels: int, num_layers: int):
        super().__init__()
        self.channels = channels
        self.num_layers = num_layers
        self.net = nn.Sequential(
            nn.Linear(style_dim, hidden),
            nn.ReLU(),
            nn.Linear(hidden, hidden),
            nn.ReLU(),
            nn.Linear(hidden, 2 * channels * num_layers),
        )
        for layer in self.net:
            if isinstance(layer, nn.Linear):
                init_conv(layer)

    def forward(self, style: StyleCode) -> list[AffineStats]:
        out = self.net(style)
        stats = []
        for chunk in out.split(2 * self.channels, dim=1):
            gamma, beta = chunk.split(self.channels, dim=1)
            stats.append(AffineStats(1.0 + gamma, beta))
        return stats


class Generator(nn.Module):
    """AdaIN residual blocks, two nearest upsampling stages, 7x7 output conv with tanh."""

    def __init__(self, content_channels: int, num_res_blocks: int, style_dim: int, mlp_dim: int):
        super().__init__()
        c = content_channels
        self.mlp = StyleMLP(style_dim, mlp_dim, c, 2 * num_res_blocks)
        self.res = nn.ModuleList([ResidualBlock(c, NormMode.ADAIN) for _ in range(num_res_blocks)])
        self.up = nn.ModuleList([
            ConvBlock(c, c // 2, 5, 1, 2, norm="ln"),
            ConvBlock(c // 2, c // 4, 5, 1, 2, norm="ln"),
        ])
        self.out = ConvBlock(c // 4, 1, 7, 1, 3, norm="none", act="tanh")

    def forward(self, content: torch.Tensor, style: StyleCode) -> torch.Tensor:
        stats = self.mlp(style)
        x = content
        for i, block in enumerate(self.res):
            x = block(x, stats[2 * i: 2 * i + 2])
        for block in self.up:
            x = block(nearest_upsample2x(x))
        return self.out(x)


class PatchDiscriminator(nn.Module):
    """Stride-2 4x4 convs with LeakyReLU, then a 1x1 conv to a score map."""

    def __init__(self, base_channels: int, num_layers: int):
        super().__init__()
        layers = []
        in_ch, out_ch = 1, base_channels
        for _ in range(num_layers):
            layers.append(ConvBlock(in_ch, out_ch, 4, 2, 1, norm="none", act="lrelu"))
            in_ch, out_ch = out_ch, out_ch * 2
        self.layers = nn.ModuleList(layers)
        self.score = nn.Conv2d(in_ch, 1, 1)
        init_conv(self.score)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        for layer in self.layers:
            x = layer(x)
        return self.score(x)


class MultiScaleDiscriminator(nn.Module):
    """One patch classifier applied to the image and its 2x average-pooled pyramid."""

    def __init__(self, base_channels: int, num_layers: int, num_scales: int):
        super().__init__()
        self.num_layers = num_layers
        self.num_scales = num_scales
        self.patch = PatchDiscriminator(base_channels, num_layers)

    def min_input_size(self) -> int:
        return 2 ** (self.num_layers + self.num_scales - 1)

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        check_tensor4(x)
        smallest = min(x.shape[2], x.shape[3])
        if smallest < self.min_input_size():
            raise ShapeError(
                f"Image of size {tuple(x.shape[2:])} is too small for {self.num_layers} stride-2 convs "
                f"at {self.num_scales} scales; minimum is {self.min_input_size()}."
            )
        scores = []
        for scale in range(self.num_scales):
            if scale:
                x = downsample_avg2x(x)
            scores.append(self.patch(x))
        return scores


class Segmentor(nn.Module):
    """U-shaped decoder over the content code with skips from the encoder's down path.

    With `encoder` set the segmentor owns its own content encoder (separate mode);
    otherwise it reads the completion model's shared encoder (joint mode).
    """

    def __init__(self, config: ModelConfig, encoder: ContentEncoder | None = None):
        super().__init__()
        b = config.base_channels
        self.encoder = encoder
        self.num_classes = config.num_classes
        self.res = nn.ModuleList([ResidualBlock(4 * b, NormMode.IN) for _ in range(config.num_res_blocks)])
        self.up = nn.ModuleList([
            ConvBlock(4 * b + 2 * b, 2 * b, 5, 1, 2),
            ConvBlock(2 * b + b, b, 5, 1, 2),
        ])
        self.out = ConvBlock(b, config.num_classes, 7, 1, 3, norm="none", act="none")

    def forward(self, content: ContentCode) -> torch.Tensor:
        if len(content.skips) != len(self.up):
            raise ShapeError(
                f"Segmentor needs {len(self.up)} skip feature maps from the content encoder, "
                f"got {len(content.skips)}."
            )
        x = content.features
        for block in self.res:
            x = block(x)
        for block, skip in zip(self.up, reversed(content.skips)):
            x = block(torch.cat([nearest_upsample2x(x), skip], dim=1))
        logits = self.out(x)
        if self.num_classes == 1:
            return torch.sigmoid(logits)
        return F.softmax(logits, dim=1)


class ReMIC(nn.Module):
    """Unified content encoder, N style encoders, generators and discriminators, optional segmentor."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        n, b = config.num_domains, config.base_channels
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(config.init_seed)
            self.content_encoder = ContentEncoder(n, b, config.num_res_blocks)
            self.style_encoders = nn.ModuleList([StyleEncoder(b, config.style_dim) for _ in range(n)])
            self.generators = nn.ModuleList([
                Generator(config.content_channels, config.num_res_blocks, config.style_dim, config.mlp_dim)
                for _ in range(n)
            ])
            self.discriminators = nn.ModuleList([
                MultiScaleDiscriminator(config.disc_channels, config.disc_layers, config.disc_scales)
                for _ in range(n)
            ])
            self.segmentor = None
            if config.seg_mode is SegMode.SEPARATE:
                self.segmentor = Segmentor(config, ContentEncoder(n, b, config.num_res_blocks))
            elif config.seg_mode is SegMode.JOINT:
                self.segmentor = Segmentor(config)
        logger.debug("Built ReMIC with %d parameters", self.num_parameters())

    @property
    def num_domains(self) -> int:
        return self.config.num_domains

    def num_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def parameter_groups(self) -> dict[str, nn.Module]:
        """Sub-networks that each get their own optimizer."""
        groups: dict[str, nn.Module] = {"content_encoder": self.content_encoder}
        for i in range(self.num_domains):
            groups[f"style_encoder_{i}"] = self.style_encoders[i]
            groups[f"generator_{i}"] = self.generators[i]
        for i in range(self.num_domains):
            groups[f"discriminator_{i}"] = self.discriminators[i]
        if self.segmentor is not None:
            groups["segmentor"] = self.segmentor
        return groups

    def _check_domain(self, index: int) -> None:
        if not 0 <= index < self.num_domains:
            raise ValueError(f"Domain index {index} is out of range for {self.num_domains} domains.")

    def zero_fill(self, x: torch.Tensor, visibility: torch.Tensor) -> torch.Tensor:
        """Replace missing domain channels of (B, N, H, W) with the zero-image fill value."""
        check_tensor4(x, "images")
        if x.shape[1] != self.num_domains:
            raise ShapeError(f"Expected {self.num_domains} domain channels, got {x.shape[1]}.")
        vis = visibility.to(torch.bool)
        vis = vis.view(1, -1, 1, 1) if vis.dim() == 1 else vis.view(vis.shape[0], -1, 1, 1)
        return torch.where(vis, x, torch.full_like(x, MISSING_FILL))

    def encode_content(self, x: torch.Tensor, visibility: torch.Tensor) -> ContentCode:
        return self.content_encoder(self.zero_fill(x, visibility))

    def encode_style(self, image: torch.Tensor, index: int) -> StyleCode:
        self._check_domain(index)
        check_tensor4(image, "image")
        return self.style_encoders[index](image)

    def generate(self, content: ContentCode | torch.Tensor, style: StyleCode, index: int) -> torch.Tensor:
        self._check_domain(index)
        features = content.features if isinstance(content, ContentCode) else content
        expected = self.config.image_size // 4
        if tuple(features.shape[2:]) != (expected, expected):
            raise ShapeError(
                f"Content code of spatial size {tuple(features.shape[2:])} does not match "
                f"the configured {expected}x{expected}."
            )
        if style.dim() != 2 or style.shape[1] != self.config.style_dim:
            raise ShapeError(f"Style code must be (batch, {self.config.style_dim}), got {tuple(style.shape)}.")
        return self.generators[index](features, style)

    def discriminate(self, image: torch.Tensor, index: int) -> list[torch.Tensor]:
        self._check_domain(index)
        return self.discriminators[index](image)

    def segmentation_content(self, x: torch.Tensor, visibility: torch.Tensor) -> ContentCode:
        if self.segmentor is None:
            raise ProtocolError("This model was built without a segmentor (seg_mode=off).")
        encoder = self.segmentor.encoder or self.content_encoder
        return encoder(self.zero_fill(x, visibility))

    def segment(self, content: ContentCode) -> torch.Tensor:
        if self.segmentor is None:
            raise ProtocolError("This model was built without a segmentor (seg_mode=off).")
        return self.segmentor(content)

    def segment_images(self, x: torch.Tensor, visibility: torch.Tensor) -> torch.Tensor:
        return self.segment(self.segmentation_content(x, visibility))

    def prior_styles(self, batch: int, generator: torch.Generator | None = None) -> torch.Tensor:
        """Style codes drawn from N(0, I), shaped (batch, N, style_dim)."""
        return torch.randn(batch, self.num_domains, self.config.style_dim, generator=generator)

    def style_for_policy(self, policy: StylePolicy, x: torch.Tensor, visibility: torch.Tensor) -> torch.Tensor:
        batch, dim = x.shape[0], self.config.style_dim
        if policy.kind is StyleKind.FIXED:
            return torch.full((batch, self.num_domains, dim), policy.value, dtype=x.dtype)
        if policy.kind is StyleKind.SAMPLE:
            return self.prior_styles(batch, torch.Generator().manual_seed(policy.seed)).to(x.dtype)
        missing = [i for i in range(self.num_domains) if not bool(visibility[i])]
        if missing:
            raise ProtocolError(f"Encoded style requested for missing domains {missing}.")
        return torch.stack([self.encode_style(x[:, i: i + 1], i) for i in range(self.num_domains)], dim=1)

    @torch.no_grad()
    def complete_tensor(self, x: torch.Tensor, visibility: torch.Tensor, policy: StylePolicy) -> torch.Tensor:
        """Generate all N domains (network space) from one content encoding of the visible ones."""
        content = self.encode_content(x, visibility)
        styles = self.style_for_policy(policy, x, visibility)
        return torch.cat([self.generate(content, styles[:, i], i) for i in range(self.num_domains)], dim=1)

    def complete_missing(self, sample: Sample, policy: StylePolicy | None = None) -> np.ndarray:
        """All N generated images of a sample in [0, 1], shaped (N, H, W)."""
        policy = policy or StylePolicy()
        x = to_network(torch.from_numpy(sample.images).float().unsqueeze(0))
        visibility = torch.from_numpy(sample.visibility)
        was_training = self.training
        self.eval()
        try:
            out = self.complete_tensor(x, visibility, policy)
        finally:
            self.train(was_training)
        return to_unit(out)[0].clamp(0.0, 1.0).numpy()

    @torch.no_grad()
    def segment_sample(self, images: np.ndarray, visibility: np.ndarray) -> np.ndarray:
        """Hard label map (H, W) for N unit-space images."""
        x = to_network(torch.from_numpy(np.ascontiguousarray(images)).float().unsqueeze(0))
        probs = self.segment_images(x, torch.from_numpy(np.asarray(visibility, dtype=bool)))[0]
        if probs.shape[0] == 1:
            return (probs[0] > 0.5).long().numpy()
        return probs.argmax(dim=0).numpy()
