"""Per-entity feature fields and their composition."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Linear, Module, ShapeError, Tensor, ops

COMPOSE_EPS = 1e-8


def positional_encode(v: np.ndarray, n_freq: int) -> np.ndarray:
    """Sinusoidal encoding of (..., 3) coordinates.

    Per axis the output is ``sin(2^0 pi v), cos(2^0 pi v), ...,
    sin(2^(L-1) pi v), cos(2^(L-1) pi v)``, so the width is ``3 * 2 * L``.
    """
    if n_freq < 1:
        raise ValueError("n_freq must be >= 1")
    v = np.asarray(v, dtype=np.float64)
    freqs = np.pi * 2.0 ** np.arange(n_freq)
    angles = v[..., :, None] * freqs  # (..., 3, L)
    enc = np.stack([np.sin(angles), np.cos(angles)], axis=-1)  # (..., 3, L, 2)
    return enc.reshape(v.shape[:-1] + (v.shape[-1] * 2 * n_freq,))


@dataclass
class FieldSample:
    sigma: Tensor  # (...,) nonnegative density
    feature: Tensor  # (..., M_f)


class FeatureField(Module):
    """MLP mapping (encoded point, encoded direction, z_s, z_a) to (sigma, f).

    The shape code enters with the encoded point; the appearance code and the
    encoded direction enter right before the feature head, so density never
    sees either of them.  Concatenation is implemented as a sum of separate
    linear maps, with the per-scene code terms computed once and repeated.
    """

    def __init__(self, rng: np.random.Generator, latent_dim: int = 64, hidden: int = 64, depth: int = 4,
                 feature_dim: int = 32, n_freq_x: int = 6, n_freq_d: int = 4):
        relu_gain = np.sqrt(2.0)
        self.latent_dim, self.feature_dim = latent_dim, feature_dim
        self.n_freq_x, self.n_freq_d = n_freq_x, n_freq_d
        self.in_x = Linear(6 * n_freq_x, hidden, rng, gain=relu_gain)
        self.in_z = Linear(latent_dim, hidden, rng, bias=False, gain=relu_gain)
        self.hidden = [Linear(hidden, hidden, rng, gain=relu_gain) for _ in range(depth - 1)]
        self.sigma_head = Linear(hidden, 1, rng)
        self.feat_h = Linear(hidden, hidden, rng, gain=relu_gain)
        self.feat_z = Linear(latent_dim, hidden, rng, bias=False, gain=relu_gain)
        self.feat_d = Linear(6 * n_freq_d, hidden, rng, bias=False, gain=relu_gain)
        self.feat_out = Linear(hidden, feature_dim, rng)

    def forward(self, x_enc, d_enc, z_s, z_a, counts=None) -> FieldSample:
        """Evaluate at Q points.

        ``x_enc`` (Q, 6*Lx) and ``d_enc`` (Q, 6*Ld) are arrays; ``z_s`` and
        ``z_a`` are (B, D) tensors with ``counts[b]`` consecutive points per
        scene (B=1 and counts=[Q] when omitted).
        """
        z_s, z_a = _as_batch(z_s), _as_batch(z_a)
        if x_enc.shape[-1] != self.in_x.weight.shape[0]:
            raise ShapeError("eval_field x_enc", x_enc.shape, self.in_x.weight.shape)
        if d_enc.shape[-1] != self.feat_d.weight.shape[0]:
            raise ShapeError("eval_field d_enc", d_enc.shape, self.feat_d.weight.shape)
        if z_s.shape[-1] != self.latent_dim or z_a.shape != z_s.shape:
            raise ShapeError("eval_field codes", z_s.shape, z_a.shape)
        if counts is None:
            counts = np.array([len(x_enc)])
        counts = np.asarray(counts)
        if counts.sum() != len(x_enc) or len(d_enc) != len(x_enc) or len(counts) != z_s.shape[0]:
            raise ShapeError("eval_field points", x_enc.shape, d_enc.shape, counts.shape)

        h = ops.add(self.in_x(Tensor(x_enc)), ops.segment_repeat(self.in_z(z_s), counts))
        h = ops.relu(h)
        for layer in self.hidden:
            h = ops.relu(layer(h))
        sigma = ops.softplus(ops.reshape(self.sigma_head(h), (-1,)))
        g = ops.add(self.feat_h(h), self.feat_d(Tensor(d_enc)))
        g = ops.add(g, ops.segment_repeat(self.feat_z(z_a), counts))
        feature = self.feat_out(ops.relu(g))
        return FieldSample(sigma, feature)


def _as_batch(z):
    z = z if isinstance(z, Tensor) else Tensor(z)
    return ops.reshape(z, (1, -1)) if z.ndim == 1 else z


def eval_field(params: FeatureField, x_enc, d_enc, z_s, z_a, counts=None) -> FieldSample:
    return params(x_enc, d_enc, z_s, z_a, counts)


def compose(samples: list[FieldSample], eps: float = COMPOSE_EPS) -> FieldSample:
    """Sum densities; average features weighted by density."""
    if not samples:
        raise ValueError("compose needs at least one entity")
    ref_s, ref_f = samples[0].sigma.shape, samples[0].feature.shape
    for s in samples[1:]:
        if s.sigma.shape != ref_s or s.feature.shape != ref_f:
            raise ShapeError("compose", ref_s, s.sigma.shape)
    sigma = ops.symmetric_sum([s.sigma for s in samples])
    weighted = ops.symmetric_sum([ops.mul(ops.reshape(s.sigma, ref_s + (1,)), s.feature) for s in samples])
    denom = ops.reshape(ops.clamp_min(sigma, eps), ref_s + (1,))
    return FieldSample(sigma, ops.div(weighted, denom))
