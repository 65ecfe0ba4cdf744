"""Non-learned completion baselines. Every function returns all N domains, shaped (N, H, W), in [0, 1]."""
import logging

import numpy as np

from .config import DatasetError, ShapeError
from .data import Sample

logger = logging.getLogger(__name__)


def impute_zero(sample: Sample) -> np.ndarray:
    return sample.zero_filled()


def impute_average(sample: Sample) -> np.ndarray:
    """Missing domains become the pixelwise mean of the sample's visible domains."""
    mean = sample.images[sample.visibility].mean(axis=0)
    return np.where(sample.visibility[:, None, None], sample.images, mean[None]).astype(np.float32)


class NearestNeighborIndex:
    """Training images stacked once for repeated nearest-neighbor lookups."""

    def __init__(self, train_set: list[Sample]):
        if not train_set:
            raise DatasetError("Nearest-neighbor imputation needs a non-empty training set.")
        self.images = np.stack([s.images for s in train_set]).astype(np.float64)
        self.ids = [s.id for s in train_set]

    def query(self, sample: Sample, exclude: int | None = None) -> tuple[int, float]:
        """Index of the training sample with the smallest summed per-domain Euclidean
        distance over the visible domains, and that distance. Ties go to the lower index.

        `exclude` skips one training index, so a training sample never retrieves itself.
        """
        if self.images.shape[1:] != sample.images.shape:
            raise ShapeError(f"Sample shape {sample.images.shape} does not match training images {self.images.shape[1:]}.")
        visible = np.flatnonzero(sample.visibility)
        diff = self.images[:, visible] - sample.images[visible].astype(np.float64)[None]
        distances = np.sqrt((diff**2).sum(axis=(2, 3))).sum(axis=1)
        if exclude is not None:
            if len(distances) < 2:
                raise DatasetError("Leave-one-out nearest neighbor needs at least two training samples.")
            distances[exclude] = np.inf
        index = int(np.argmin(distances))
        return index, float(distances[index])

    def impute(self, sample: Sample, exclude: int | None = None) -> np.ndarray:
        index, distance = self.query(sample, exclude)
        logger.debug("Nearest neighbor of %s is %s (distance %.4f)", sample.id, self.ids[index], distance)
        neighbor = self.images[index].astype(np.float32)
        return np.where(sample.visibility[:, None, None], sample.images, neighbor).astype(np.float32)


def nearest_neighbor(sample: Sample, train_set: list[Sample]) -> tuple[int, float]:
    return NearestNeighborIndex(train_set).query(sample)


def impute_nn(sample: Sample, train_set: list[Sample]) -> np.ndarray:
    return NearestNeighborIndex(train_set).impute(sample)
