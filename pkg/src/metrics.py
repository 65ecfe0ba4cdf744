"""
Image fidelity and overlap metrics. Inputs are arrays in [0, 1]; `b` (or
`target`) is always the ground truth.
"""
import numpy as np
from skimage.metrics import mean_squared_error, normalized_root_mse, structural_similarity

from .config import DATA_RANGE, PSNR_CAP_DB, ShapeError, UndefinedMetricError

SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def _pair(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"Metric inputs differ in shape: {a.shape} vs {b.shape}.")
    return a, b


def mae(a: np.ndarray, b: np.ndarray) -> float:
    a, b = _pair(a, b)
    return float(np.mean(np.abs(a - b)))


def nrmse(a: np.ndarray, b: np.ndarray) -> float:
    """||a - b||_2 / ||b||_2. Not symmetric: only the ground truth normalizes."""
    a, b = _pair(a, b)
    if not np.any(b):
        raise UndefinedMetricError("NRMSE is undefined for an all-zero ground truth image.")
    return float(normalized_root_mse(b, a, normalization="euclidean"))


def psnr(a: np.ndarray, b: np.ndarray, data_range: float = DATA_RANGE) -> float:
    """10 log10(range^2 / MSE), capped at PSNR_CAP_DB for (near) identical images."""
    a, b = _pair(a, b)
    mse = mean_squared_error(b, a)
    if mse < data_range**2 * 1e-10:
        return PSNR_CAP_DB
    return float(min(10.0 * np.log10(data_range**2 / mse), PSNR_CAP_DB))


def ssim(a: np.ndarray, b: np.ndarray, data_range: float = DATA_RANGE) -> float:
    """Mean local SSIM over an 11x11 Gaussian window (sigma 1.5), K1=0.01, K2=0.03."""
    a, b = _pair(a, b)
    if a.ndim != 2:
        raise ShapeError(f"SSIM expects 2-D images, got shape {a.shape}.")
    if min(a.shape) < 11:
        raise ShapeError(f"SSIM needs images of at least 11x11 pixels, got {a.shape}.")
    return float(
        structural_similarity(
            b,
            a,
            data_range=data_range,
            gaussian_weights=True,
            sigma=SSIM_SIGMA,
            use_sample_covariance=False,
            K1=SSIM_K1,
            K2=SSIM_K2,
        )
    )


def dice_score(pred: np.ndarray, target: np.ndarray, num_classes: int) -> tuple[np.ndarray, float]:
    """Per-class Dice 2|P & T| / (|P| + |T|) and its mean over foreground classes.

    A class absent from both maps scores 1. With num_classes=1 the maps are
    binary foreground/background.
    """
    pred = np.asarray(pred)
    target = np.asarray(target)
    if pred.shape != target.shape:
        raise ShapeError(f"Label maps differ in shape: {pred.shape} vs {target.shape}.")
    labels = max(num_classes, 2)
    for name, m in (("prediction", pred), ("target", target)):
        if m.size and (m.min() < 0 or m.max() >= labels):
            raise ValueError(f"{name} holds labels outside 0..{labels - 1}.")
    scores = np.empty(labels, dtype=np.float64)
    for label in range(labels):
        p, t = pred == label, target == label
        total = int(p.sum()) + int(t.sum())
        scores[label] = 1.0 if total == 0 else 2.0 * int((p & t).sum()) / total
    return scores, float(scores[1:].mean())
