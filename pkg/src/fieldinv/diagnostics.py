"""Alpha-map measurements: mass, centroid and connected components."""

from __future__ import annotations

import numpy as np
from scipy import ndimage


def alpha_mass(alpha: np.ndarray) -> float:
    return float(np.sum(alpha))


def alpha_centroid(alpha: np.ndarray) -> tuple[float, float]:
    """(x, y) in pixel units, pixel centres at +0.5; alpha weighted."""
    alpha = np.asarray(alpha, dtype=np.float64)
    total = alpha.sum()
    if total <= 0:
        raise ValueError("empty alpha map has no centroid")
    rows, cols = np.indices(alpha.shape) + 0.5
    return float((alpha * cols).sum() / total), float((alpha * rows).sum() / total)


def count_components(alpha: np.ndarray, threshold: float = 0.5) -> int:
    """4-connected components of ``alpha > threshold * max(alpha)``."""
    alpha = np.asarray(alpha, dtype=np.float64)
    if alpha.max() <= 0:
        return 0
    _, n = ndimage.label(alpha > threshold * alpha.max())
    return int(n)


def upsample_alpha(alpha: np.ndarray, factor: int) -> np.ndarray:
    """Nearest-neighbour upsampling of a volume-resolution map to image pixels."""
    return np.repeat(np.repeat(alpha, factor, axis=-2), factor, axis=-1)
