"""Image metrics: SSIM, a perceptual distance and a Fréchet distance.

The perceptual distance and the Fréchet embedding use a fixed, randomly
initialised conv net instead of pretrained VGG/Inception weights, so their
absolute values are only meaningful relative to each other.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .tensor import ShapeError, Tensor, no_grad, ops

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
DATA_RANGE = 2.0  # images live in [-1, 1]
C1 = (0.01 * DATA_RANGE) ** 2
C2 = (0.03 * DATA_RANGE) ** 2
EMBED_DIM = 64


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _as_nchw(x: Tensor, op: str) -> Tensor:
    if x.ndim == 3:
        return ops.reshape(x, (1,) + x.shape)
    if x.ndim != 4:
        raise ShapeError(op, x.shape)
    return x


@lru_cache(maxsize=None)
def _window_matrix(n: int) -> np.ndarray:
    """(n - k + 1, n) band matrix applying a 1-D Gaussian window, 'valid' mode."""
    k = min(SSIM_WINDOW, n if n % 2 else n - 1)
    r = np.arange(k) - k // 2
    g = np.exp(-(r**2) / (2 * SSIM_SIGMA**2))
    g /= g.sum()
    out = np.zeros((n - k + 1, n))
    for i in range(n - k + 1):
        out[i, i:i + k] = g
    return out


def _blur(x: Tensor) -> Tensor:
    gh = _window_matrix(x.shape[-2])
    gw = _window_matrix(x.shape[-1])
    return ops.matmul(ops.matmul(Tensor(gh), x), Tensor(gw.T))


def ssim_map(a, b) -> Tensor:
    a, b = _as_nchw(_as_tensor(a), "ssim"), _as_nchw(_as_tensor(b), "ssim")
    if a.shape != b.shape:
        raise ShapeError("ssim", a.shape, b.shape)
    mu_a, mu_b = _blur(a), _blur(b)
    mu_aa, mu_bb, mu_ab = ops.mul(mu_a, mu_a), ops.mul(mu_b, mu_b), ops.mul(mu_a, mu_b)
    var_a = ops.sub(_blur(ops.mul(a, a)), mu_aa)
    var_b = ops.sub(_blur(ops.mul(b, b)), mu_bb)
    cov = ops.sub(_blur(ops.mul(a, b)), mu_ab)
    num = ops.mul(ops.add(ops.mul(mu_ab, 2.0), C1), ops.add(ops.mul(cov, 2.0), C2))
    den = ops.mul(ops.add(ops.add(mu_aa, mu_bb), C1), ops.add(ops.add(var_a, var_b), C2))
    return ops.div(num, den)


def ssim(a, b) -> Tensor:
    """Mean SSIM over windows, channels and batch (scalar tensor)."""
    return ops.mean(ssim_map(a, b))


def ssim_per_image(a, b) -> np.ndarray:
    with no_grad():
        return ssim_map(a, b).data.mean(axis=(1, 2, 3))


def psnr(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    mse = np.mean((a - b) ** 2)
    return float("inf") if mse == 0 else float(10 * np.log10(DATA_RANGE**2 / mse))


class FeatureEmbedder:
    """Fixed random conv stack; never trained.

    Each stage is a 3x3 conv, leaky ReLU and 2x average pool.  The
    per-stage feature maps feed the perceptual distance; the global mean of
    the last stage (``EMBED_DIM`` channels) is the Fréchet embedding.
    """

    def __init__(self, seed: int = 0, widths=(16, 32, EMBED_DIM)):
        self.seed = seed
        rng = np.random.default_rng(seed)
        self.weights, self.biases = [], []
        c = 3
        for w in widths:
            k = rng.standard_normal((w, c, 3, 3)) * np.sqrt(2.0 / (9 * c))
            b = rng.standard_normal(w) * 0.1
            k.setflags(write=False)
            b.setflags(write=False)
            self.weights.append(k)
            self.biases.append(b)
            c = w
        self.dim = widths[-1]

    def features(self, images) -> list[Tensor]:
        x = _as_nchw(_as_tensor(images), "embed")
        out = []
        for k, b in zip(self.weights, self.biases):
            x = ops.leaky_relu(ops.conv2d(x, Tensor(k), Tensor(b)))
            out.append(x)
            if min(x.shape[-2:]) >= 2:
                x = ops.avg_pool(x)
        return out

    def embed(self, images, batch: int = 64) -> np.ndarray:
        images = np.asarray(images.data if isinstance(images, Tensor) else images, dtype=np.float64)
        chunks = []
        with no_grad():
            for i in range(0, len(images), batch):
                last = self.features(images[i:i + batch])[-1]
                chunks.append(last.data.mean(axis=(2, 3)))
        return np.concatenate(chunks).astype(np.float64)


_DEFAULT_EMBEDDERS: dict[int, FeatureEmbedder] = {}


def default_embedder(seed: int = 0) -> FeatureEmbedder:
    if seed not in _DEFAULT_EMBEDDERS:
        _DEFAULT_EMBEDDERS[seed] = FeatureEmbedder(seed)
    return _DEFAULT_EMBEDDERS[seed]


def _unit_channels(x: Tensor, eps: float = 1e-10) -> Tensor:
    norm = ops.sqrt(ops.add(ops.sum(ops.mul(x, x), axis=1, keepdims=True), eps))
    return ops.div(x, norm)


def perceptual_distance(a, b, embedder: FeatureEmbedder | None = None) -> Tensor:
    """Sum over stages of the mean squared difference of channel-normalised features."""
    a, b = _as_nchw(_as_tensor(a), "perceptual_distance"), _as_nchw(_as_tensor(b), "perceptual_distance")
    if a.shape != b.shape:
        raise ShapeError("perceptual_distance", a.shape, b.shape)
    embedder = embedder or default_embedder()
    total = None
    for fa, fb in zip(embedder.features(a), embedder.features(b)):
        diff = ops.sub(_unit_channels(fa), _unit_channels(fb))
        term = ops.mean(ops.sum(ops.mul(diff, diff), axis=1))
        total = term if total is None else ops.add(total, term)
    return total


@dataclass
class GaussianStats:
    mean: np.ndarray
    cov: np.ndarray
    count: int

    def validate(self, tol: float = 1e-8) -> None:
        if not np.allclose(self.cov, self.cov.T, atol=tol):
            raise ValueError("covariance is not symmetric")


def collect_stats(embedder: FeatureEmbedder, images) -> GaussianStats:
    images = np.asarray(images)
    if len(images) < 2:
        raise ValueError("need at least two images for covariance statistics")
    feats = embedder.embed(images)
    mean = feats.mean(axis=0)
    centred = feats - mean
    cov = centred.T @ centred / (len(feats) - 1)
    cov = 0.5 * (cov + cov.T)
    if len(feats) < feats.shape[1] + 1:
        warnings.warn(f"{len(feats)} samples for a {feats.shape[1]}-dim embedding; covariance is singular",
                      RuntimeWarning, stacklevel=2)
    return GaussianStats(mean, cov, len(feats))


def _psd_sqrt(m: np.ndarray, tol: float = 1e-6) -> np.ndarray:
    vals, vecs = np.linalg.eigh(0.5 * (m + m.T))
    if vals.min() < -tol * max(1.0, abs(vals).max()):
        raise ValueError(f"matrix is not positive semidefinite (min eigenvalue {vals.min():.3g})")
    return (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T


def frechet_distance(p: GaussianStats, q: GaussianStats) -> float:
    """|mu_p - mu_q|^2 + tr(S_p + S_q - 2 (S_p S_q)^(1/2))."""
    if p.mean.shape != q.mean.shape:
        raise ShapeError("frechet_distance", p.mean.shape, q.mean.shape)
    root_p = _psd_sqrt(p.cov)
    inner = root_p @ q.cov @ root_p
    vals = np.linalg.eigvalsh(0.5 * (inner + inner.T))
    if vals.min() < -1e-6 * max(1.0, abs(vals).max()):
        raise ValueError("covariance product is not positive semidefinite")
    _psd_sqrt(q.cov)
    tr_cross = np.sum(np.sqrt(np.clip(vals, 0.0, None)))
    diff = p.mean - q.mean
    value = float(diff @ diff + np.trace(p.cov) + np.trace(q.cov) - 2.0 * tr_cross)
    return max(value, 0.0)


def fid_substitute(embedder: FeatureEmbedder, images_a, images_b) -> float:
    return frechet_distance(collect_stats(embedder, images_a), collect_stats(embedder, images_b))
