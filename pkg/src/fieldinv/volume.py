"""Pinhole rays and volume-rendering quadrature for composed feature fields."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .field import COMPOSE_EPS, FeatureField, FieldSample, compose, positional_encode
from .scene import CameraPose
from .tensor import Tensor, ops


@dataclass
class RayBundle:
    origins: np.ndarray  # (R, 3)
    directions: np.ndarray  # (R, 3), unit length
    near: float
    far: float

    def __post_init__(self):
        if not 0 < self.near < self.far:
            raise ValueError(f"need 0 < near < far, got near={self.near}, far={self.far}")


def generate_rays(pose: CameraPose, resolution: int, half_extent: float = 1.5) -> RayBundle:
    """One ray per pixel centre, row-major; near/far bracket the scene."""
    right, up, forward = pose.basis()
    f, cx, cy = pose.intrinsics(resolution)
    j, i = np.meshgrid(np.arange(resolution) + 0.5, np.arange(resolution) + 0.5)
    x = (j - cx) / f
    y = -(i - cy) / f
    dirs = forward + x[..., None] * right + y[..., None] * up
    dirs = dirs.reshape(-1, 3)
    dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
    origins = np.broadcast_to(pose.position, dirs.shape).copy()
    return RayBundle(origins, dirs, pose.radius - half_extent, pose.radius + half_extent)


def sample_depths(near: float, far: float, n_samples: int, shape: tuple, rng: np.random.Generator | None = None):
    """Stratified depths in ``n_samples`` equal bins; bin midpoints without ``rng``.

    Returns (depths of shape ``shape + (n_samples,)``, bin width).
    """
    if n_samples < 2:
        raise ValueError("n_samples must be >= 2")
    if not near < far:
        raise ValueError(f"need near < far, got {near}, {far}")
    width = (far - near) / n_samples
    offsets = np.full(shape + (n_samples,), 0.5) if rng is None else rng.random(shape + (n_samples,))
    return near + (np.arange(n_samples) + offsets) * width, width


def composite(sigma: Tensor, feature: Tensor, delta: float):
    """Alpha compositing along the last sample axis.

    ``sigma`` is (..., S) and ``feature`` (..., S, M).  Returns the rendered
    feature (..., M), accumulated alpha (...) and per-sample weights (..., S).
    """
    tau = ops.mul(sigma, delta)
    alpha = ops.sub(1.0, ops.exp(ops.neg(tau)))
    before = ops.sub(ops.cumsum(tau, axis=-1), tau)
    weights = ops.mul(ops.exp(ops.neg(before)), alpha)
    w = ops.reshape(weights, weights.shape + (1,))
    rendered = ops.sum(ops.mul(w, feature), axis=-2)
    return rendered, ops.sum(weights, axis=-1), weights


@dataclass
class EntityBatch:
    """One scene entity across a batch: a field, its codes and its poses."""

    field: FeatureField
    z_shape: Tensor  # (B, D)
    z_app: Tensor  # (B, D)
    scale: np.ndarray  # (B, 3)
    translation: np.ndarray  # (B, 3)
    rotation: np.ndarray  # (B, 3, 3)
    bounded: bool = True  # density is zero outside the unit box in local coordinates
    enabled: bool = True


@dataclass
class RenderOutput:
    features: Tensor  # (B, M_f, H, W)
    alpha: Tensor  # (B, H, W), opacity of everything incl. background
    object_alpha: Tensor  # (B, H, W), opacity attributable to objects


def _eval_entity(ent: EntityBatch, points: np.ndarray, dirs: np.ndarray) -> tuple[Tensor, Tensor]:
    b, r, s, _ = points.shape
    m = ent.field.feature_dim
    if not ent.enabled:
        zeros = Tensor(np.zeros((b, r, s)))
        return zeros, Tensor(np.zeros((b, r, s, m)))
    if np.any(ent.scale <= 0):
        raise ValueError("entity scale must be positive")
    local = np.einsum("brsk,bkj->brsj", points - ent.translation[:, None, None, :], ent.rotation)
    local /= ent.scale[:, None, None, :]
    ldirs = np.einsum("brk,bkj->brj", dirs, ent.rotation)
    ldirs /= np.linalg.norm(ldirs, axis=-1, keepdims=True)
    if ent.bounded:
        mask = np.all(np.abs(local) <= 1.0, axis=-1)
        index = np.nonzero(mask)
        counts = mask.reshape(b, -1).sum(axis=1)
        x_enc = positional_encode(local[index], ent.field.n_freq_x)
        d_enc = positional_encode(ldirs[index[0], index[1]], ent.field.n_freq_d)
        out = ent.field(x_enc, d_enc, ent.z_shape, ent.z_app, counts)
        sigma = ops.scatter_rows(out.sigma, (b, r, s), index)
        feature = ops.scatter_rows(out.feature, (b, r, s, m), index)
        return sigma, feature
    x_enc = positional_encode(local.reshape(-1, 3), ent.field.n_freq_x)
    d_enc = positional_encode(np.repeat(ldirs.reshape(-1, 3), s, axis=0), ent.field.n_freq_d)
    out = ent.field(x_enc, d_enc, ent.z_shape, ent.z_app, np.full(b, r * s))
    return ops.reshape(out.sigma, (b, r, s)), ops.reshape(out.feature, (b, r, s, m))


def render_feature_map(entities: Sequence[EntityBatch], poses: Sequence[CameraPose], resolution: int,
                       n_samples: int, half_extent: float = 1.5,
                       rng: np.random.Generator | None = None) -> RenderOutput:
    """Render the composed field of all entities into a feature map.

    Entities are evaluated in their local frames, composed per sample and
    alpha-composited along each camera ray.  Depths are stratified with
    ``rng`` and fixed bin midpoints otherwise.
    """
    bundles = [generate_rays(p, resolution, half_extent) for p in poses]
    near, far = bundles[0].near, bundles[0].far
    if any(bd.near != near or bd.far != far for bd in bundles):
        raise ValueError("all poses in a batch must share near/far bounds")
    origins = np.stack([bd.origins for bd in bundles])
    dirs = np.stack([bd.directions for bd in bundles])
    b, r = dirs.shape[:2]
    depths, delta = sample_depths(near, far, n_samples, (b, r), rng)
    points = origins[:, :, None, :] + depths[..., None] * dirs[:, :, None, :]

    samples = [FieldSample(*_eval_entity(e, points, dirs)) for e in entities]
    scene = compose(samples)
    rendered, alpha, weights = composite(scene.sigma, scene.feature, delta)

    objects = [s.sigma for s, e in zip(samples, entities) if e.bounded]
    if objects:
        share = ops.div(ops.symmetric_sum(objects), ops.clamp_min(scene.sigma, COMPOSE_EPS))
        object_alpha = ops.sum(ops.mul(weights, share), axis=-1)
    else:
        object_alpha = Tensor(np.zeros((b, r)))

    m = rendered.shape[-1]
    feats = ops.transpose(ops.reshape(rendered, (b, resolution, resolution, m)), (0, 3, 1, 2))
    return RenderOutput(
        feats,
        ops.reshape(alpha, (b, resolution, resolution)),
        ops.reshape(object_alpha, (b, resolution, resolution)),
    )
