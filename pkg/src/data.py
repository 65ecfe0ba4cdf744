"""
Samples, the synthetic multi-domain dataset, visibility masks, and the
on-disk dataset layout:

    <root>/manifest.env
    <root>/{train,test}/<sample_id>/domain_<i>.rmt
    <root>/{train,test}/<sample_id>/mask.rmt      (optional)
"""
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from dotenv import dotenv_values
from pydantic import BaseModel, ConfigDict, Field, ValidationError
from scipy import ndimage

from .config import DatasetError, DomainStyle, MaskMode, SynthConfig
from .tensor_io import load_tensor, save_tensor

logger = logging.getLogger(__name__)

SPLITS = ("train", "test")
MANIFEST_NAME = "manifest.env"
# Intensities of the nested lesion classes in the shared anatomy map.
LESION_LEVELS = (0.78, 0.92, 1.0)
BACKGROUND_LEVEL = 0.06
ORGAN_LEVEL = 0.42


@dataclass(frozen=True)
class Sample:
    """One subject: N co-registered single-channel images in [0, 1]."""

    images: np.ndarray
    visibility: np.ndarray = field(default=None)
    seg_mask: np.ndarray | None = None
    id: str = ""

    def __post_init__(self):
        images = np.asarray(self.images, dtype=np.float32)
        if images.ndim != 3:
            raise ValueError(f"Sample images must be (N, H, W), got shape {images.shape}.")
        visibility = (
            np.ones(images.shape[0], dtype=bool)
            if self.visibility is None
            else np.asarray(self.visibility, dtype=bool)
        )
        if visibility.shape != (images.shape[0],):
            raise ValueError(f"Visibility has {visibility.shape} flags for {images.shape[0]} domains.")
        if not visibility.any():
            raise ValueError(f"Sample '{self.id}' has no visible domain.")
        if self.seg_mask is not None and np.shape(self.seg_mask) != images.shape[1:]:
            raise ValueError(f"Mask shape {np.shape(self.seg_mask)} does not match images {images.shape[1:]}.")
        object.__setattr__(self, "images", images)
        object.__setattr__(self, "visibility", visibility)
        if self.seg_mask is not None:
            object.__setattr__(self, "seg_mask", np.asarray(self.seg_mask, dtype=np.int64))

    @property
    def num_domains(self) -> int:
        return self.images.shape[0]

    def with_visibility(self, visibility: np.ndarray) -> "Sample":
        return replace(self, visibility=np.asarray(visibility, dtype=bool))

    def zero_filled(self) -> np.ndarray:
        return np.where(self.visibility[:, None, None], self.images, 0.0).astype(np.float32)


class DatasetManifest(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    num_domains: int = Field(ge=1)
    height: int = Field(ge=1)
    width: int = Field(ge=1)
    num_classes: int = Field(ge=1)
    seed: int | None = None
    num_train: int = Field(0, ge=0)
    num_test: int = Field(0, ge=0)


@dataclass
class Dataset:
    manifest: DatasetManifest
    train: list[Sample]
    test: list[Sample]

    def split(self, name: str) -> list[Sample]:
        if name not in SPLITS:
            raise DatasetError(f"Unknown split '{name}'. Use one of: {', '.join(SPLITS)}.")
        return self.train if name == "train" else self.test

    def find(self, sample_id: str, split: str = "test") -> Sample:
        for sample in self.split(split):
            if sample.id == sample_id:
                return sample
        raise DatasetError(f"No sample '{sample_id}' in split '{split}'.")


# --- Synthetic scenes ---
def _blob(yy: np.ndarray, xx: np.ndarray, cy: float, cx: float, ry: float, rx: float,
          angle: float, wobble: float, phase: float) -> np.ndarray:
    dy, dx = yy - cy, xx - cx
    cos, sin = np.cos(angle), np.sin(angle)
    u = (dx * cos + dy * sin) / rx
    v = (-dx * sin + dy * cos) / ry
    theta = np.arctan2(v, u)
    radius = 1.0 + wobble * np.sin(3.0 * theta + phase)
    return u**2 + v**2 <= radius**2


def render_domain(anatomy: np.ndarray, style: DomainStyle, domain: int) -> np.ndarray:
    """Render the shared anatomy map through one domain's intensity transform."""
    size = anatomy.shape[0]
    image = 1.0 - anatomy if style.invert else anatomy.copy()
    image = np.clip(image, 0.0, 1.0) ** style.gamma
    if style.texture_amp:
        rows = np.arange(size, dtype=np.float64)[:, None] / size
        bands = np.sin(2.0 * np.pi * style.texture_freq * rows + domain)
        image = image + style.texture_amp * bands * (anatomy > BACKGROUND_LEVEL + 0.05)
    if style.edge_weight:
        edges = np.hypot(ndimage.sobel(anatomy, axis=0), ndimage.sobel(anatomy, axis=1))
        image = image + style.edge_weight * edges / max(edges.max(), 1e-12)
    return np.clip(image, 0.0, 1.0).astype(np.float32)


def generate_synthetic_sample(config: SynthConfig, index: int) -> Sample:
    """Deterministic scene: an organ ellipse with nested lesion blobs, rendered in every domain."""
    total = config.num_train + config.num_test
    if not 0 <= index < total:
        raise DatasetError(f"Sample index {index} is out of range for {total} samples.")
    rng = np.random.default_rng([config.seed, index])
    size = config.image_size
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    yy, xx = yy / (size - 1) * 2.0 - 1.0, xx / (size - 1) * 2.0 - 1.0

    cy, cx = rng.uniform(-0.12, 0.12, size=2)
    ry, rx = rng.uniform(0.55, 0.8, size=2)
    organ = _blob(yy, xx, cy, cx, ry, rx, rng.uniform(0, np.pi), 0.05, rng.uniform(0, 2 * np.pi))
    shading = 0.12 * (1.0 - np.clip(((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2, 0.0, 1.0))
    anatomy = np.where(organ, ORGAN_LEVEL + shading, BACKGROUND_LEVEL)

    mask = np.zeros((size, size), dtype=np.int64)
    region = organ
    ly, lx = cy + rng.uniform(-0.3, 0.3) * ry, cx + rng.uniform(-0.3, 0.3) * rx
    radius = rng.uniform(0.3, 0.45) * min(ry, rx)
    for label in range(1, config.num_classes):
        aspect = rng.uniform(0.75, 1.25)
        lesion = region & _blob(yy, xx, ly, lx, radius * aspect, radius / aspect,
                                rng.uniform(0, np.pi), 0.15, rng.uniform(0, 2 * np.pi))
        mask[lesion] = label
        anatomy = np.where(lesion, LESION_LEVELS[label - 1], anatomy)
        region = lesion
        ly += rng.uniform(-0.25, 0.25) * radius
        lx += rng.uniform(-0.25, 0.25) * radius
        radius *= rng.uniform(0.5, 0.65)

    anatomy = ndimage.gaussian_filter(anatomy, sigma=0.7)
    anatomy = anatomy + 0.025 * ndimage.gaussian_filter(rng.normal(size=(size, size)), sigma=1.5)
    anatomy = np.clip(anatomy, 0.0, 1.0)

    styles = config.domain_styles()
    images = np.stack([render_domain(anatomy, styles[i], i) for i in range(config.num_domains)])
    split = "train" if index < config.num_train else "test"
    return Sample(images=images, seg_mask=mask, id=f"{split}_{index:05d}")


def generate_synthetic_dataset(config: SynthConfig) -> Dataset:
    samples = [generate_synthetic_sample(config, i) for i in range(config.num_train + config.num_test)]
    manifest = DatasetManifest(
        num_domains=config.num_domains,
        height=config.image_size,
        width=config.image_size,
        num_classes=config.num_classes,
        seed=config.seed,
        num_train=config.num_train,
        num_test=config.num_test,
    )
    logger.info("Generated %d synthetic samples (seed %d)", len(samples), config.seed)
    return Dataset(manifest, samples[: config.num_train], samples[config.num_train:])


# --- Visibility ---
def sample_visibility(
    num_domains: int,
    mode: MaskMode,
    rng: np.random.Generator,
    k: int | None = None,
    missing: int | None = None,
    ordered: bool = False,
) -> np.ndarray:
    """Draw a visibility mask with at least one visible domain.

    uniform_k: k ~ U{1..N}, then a uniform k-subset.
    fixed_k:   a uniform k-subset (or domains 0..k-1 when `ordered`).
    single_missing: every domain except `missing`.
    """
    flags = np.zeros(num_domains, dtype=bool)
    match mode:
        case MaskMode.UNIFORM_K:
            k = int(rng.integers(1, num_domains + 1))
            flags[rng.choice(num_domains, size=k, replace=False)] = True
        case MaskMode.FIXED_K:
            if k is None or not 1 <= k <= num_domains:
                raise ValueError(f"k must be between 1 and {num_domains}, got {k}.")
            if ordered:
                flags[:k] = True
            else:
                flags[rng.choice(num_domains, size=k, replace=False)] = True
        case MaskMode.SINGLE_MISSING:
            if missing is None or not 0 <= missing < num_domains:
                raise ValueError(f"Missing domain must be between 0 and {num_domains - 1}, got {missing}.")
            flags[:] = True
            flags[missing] = False
            if num_domains == 1:
                raise ValueError("Cannot mask the only domain.")
        case _:
            raise ValueError(f"Unknown mask mode: {mode}.")
    return flags


# --- Disk layout ---
def write_manifest(root: Path, manifest: DatasetManifest) -> None:
    lines = [f"{key}={'' if value is None else value}" for key, value in manifest.model_dump().items()]
    (root / MANIFEST_NAME).write_text("\n".join(lines) + "\n")


def read_manifest(root: Path) -> DatasetManifest:
    path = root / MANIFEST_NAME
    if not path.exists():
        raise DatasetError(f"Dataset manifest not found: {path}")
    values = {k: v for k, v in dotenv_values(path, interpolate=False).items() if v not in (None, "")}
    try:
        return DatasetManifest(**values)
    except ValidationError as e:
        raise DatasetError(f"Malformed manifest {path}: {e.errors()[0]['msg']}") from e


def save_dataset(root: str | Path, dataset: Dataset) -> Path:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    manifest = dataset.manifest.model_copy(update={"num_train": len(dataset.train), "num_test": len(dataset.test)})
    write_manifest(root, manifest)
    for split in SPLITS:
        for sample in dataset.split(split):
            sample_dir = root / split / sample.id
            sample_dir.mkdir(parents=True, exist_ok=True)
            for i, image in enumerate(sample.images):
                save_tensor(sample_dir / f"domain_{i}.rmt", image.astype(np.float32))
            if sample.seg_mask is not None:
                save_tensor(sample_dir / "mask.rmt", sample.seg_mask.astype(np.int32))
    logger.info("Saved %d train / %d test samples to %s", len(dataset.train), len(dataset.test), root)
    return root


def load_sample(sample_dir: Path, manifest: DatasetManifest) -> Sample:
    images = []
    for i in range(manifest.num_domains):
        path = sample_dir / f"domain_{i}.rmt"
        if not path.exists():
            raise DatasetError(f"Missing domain file: {path}")
        image = load_tensor(path)
        if image.shape != (manifest.height, manifest.width):
            raise DatasetError(f"{path}: shape {image.shape} does not match manifest "
                               f"({manifest.height}, {manifest.width}).")
        images.append(image.astype(np.float32))
    mask = None
    mask_path = sample_dir / "mask.rmt"
    if mask_path.exists():
        mask = load_tensor(mask_path)
        if mask.shape != (manifest.height, manifest.width):
            raise DatasetError(f"{mask_path}: shape {mask.shape} does not match the images.")
    return Sample(images=np.stack(images), seg_mask=mask, id=sample_dir.name)


def load_dataset(root: str | Path) -> Dataset:
    root = Path(root)
    manifest = read_manifest(root)
    splits = {}
    for split in SPLITS:
        split_dir = root / split
        sample_dirs = sorted(p for p in split_dir.iterdir() if p.is_dir()) if split_dir.exists() else []
        splits[split] = [load_sample(d, manifest) for d in sample_dirs]
    return Dataset(manifest, splits["train"], splits["test"])
