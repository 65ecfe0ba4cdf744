import logging
from pathlib import Path

import numpy as np
from PIL import Image

from .config import DatasetError
from .data import Dataset, DatasetManifest, Sample, SPLITS

logger = logging.getLogger(__name__)

SUPPORTED_FORMATS = {"png", "bmp", "tif", "tiff", "pgm"}


def validate_image_filepath(filepath: str | Path) -> str:
    """
    Validate that a filepath has a supported grayscale image extension.

    Returns:
        str: The detected image format

    Raises:
        ValueError: If the extension is missing or not a recognized image format
    """
    suffix = Path(filepath).suffix
    if not suffix:
        raise ValueError(f"Invalid filepath: {filepath}. No file extension found.")
    file_format = suffix.lstrip(".").lower()
    if file_format not in SUPPORTED_FORMATS:
        raise ValueError(f"File '{filepath}' has unsupported format '.{file_format}'. "
                         f"Supported formats are: {', '.join(sorted(SUPPORTED_FORMATS))}")
    return file_format


def read_grayscale(path: str | Path) -> np.ndarray:
    """8-bit grayscale image as float32 in [0, 1]."""
    validate_image_filepath(path)
    with Image.open(path) as img:
        if img.mode not in ("L", "P", "1"):
            raise ValueError(f"'{path}' is a {img.mode} image; only 8-bit grayscale is supported.")
        return np.asarray(img.convert("L"), dtype=np.float32) / 255.0


def read_label_map(path: str | Path) -> np.ndarray:
    validate_image_filepath(path)
    with Image.open(path) as img:
        return np.asarray(img.convert("L"), dtype=np.int64)


def write_grayscale(path: str | Path, image: np.ndarray) -> Path:
    path = Path(path)
    validate_image_filepath(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    pixels = np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(pixels, mode="L").save(path)
    return path


def tile_grid(rows: list[list[np.ndarray]], gap: int = 2) -> np.ndarray:
    """Tile equally sized images into one canvas, rows top to bottom, separated by `gap` white pixels."""
    if not rows or not rows[0]:
        raise ValueError("tile_grid needs at least one image.")
    h, w = rows[0][0].shape
    cols = max(len(row) for row in rows)
    canvas = np.ones((len(rows) * (h + gap) - gap, cols * (w + gap) - gap), dtype=np.float32)
    for r, row in enumerate(rows):
        for c, image in enumerate(row):
            canvas[r * (h + gap): r * (h + gap) + h, c * (w + gap): c * (w + gap) + w] = image
    return canvas


def ingest_image_directory(src: str | Path, num_classes: int) -> Dataset:
    """Read `<src>/<split>/<sample>/domain_<i>.<ext>` (+ optional `mask.<ext>`) into a Dataset."""
    src = Path(src)
    splits: dict[str, list[Sample]] = {}
    num_domains = None
    shape = None
    for split in SPLITS:
        samples = []
        split_dir = src / split
        sample_dirs = sorted(p for p in split_dir.iterdir() if p.is_dir()) if split_dir.exists() else []
        for sample_dir in sample_dirs:
            domain_files = sorted(sample_dir.glob("domain_*.*"), key=lambda p: int(p.stem.split("_")[1]))
            if not domain_files:
                raise DatasetError(f"No domain images in {sample_dir}")
            if num_domains is None:
                num_domains = len(domain_files)
            elif len(domain_files) != num_domains:
                raise DatasetError(f"{sample_dir} has {len(domain_files)} domains, expected {num_domains}.")
            planes = [read_grayscale(p) for p in domain_files]
            shape = shape or planes[0].shape
            if any(plane.shape != shape for plane in planes):
                raise DatasetError(f"{sample_dir}: images must all be {shape[0]}x{shape[1]}.")
            images = np.stack(planes)
            mask_files = sorted(sample_dir.glob("mask.*"))
            mask = read_label_map(mask_files[0]) if mask_files else None
            if mask is not None and mask.max() >= num_classes:
                raise DatasetError(f"{mask_files[0]} has label {mask.max()} for {num_classes} classes.")
            samples.append(Sample(images=images, seg_mask=mask, id=sample_dir.name))
        splits[split] = samples
        logger.info("Ingested %d %s samples from %s", len(samples), split, split_dir)
    if num_domains is None:
        raise DatasetError(f"No samples found under {src}")
    manifest = DatasetManifest(num_domains=num_domains, height=shape[0], width=shape[1], num_classes=num_classes)
    return Dataset(manifest, splits["train"], splits["test"])
