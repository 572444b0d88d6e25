"""Full generator: object and background fields, volume rendering, 2D renderer."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .field import FeatureField
from .renderer import NeuralRenderer
from .scene import AffineTransform, CameraPose, LatentCode, SceneSampling, SceneSpec, sample_scene_spec
from .tensor import Module, ShapeError, Tensor
from .volume import EntityBatch, render_feature_map


@dataclass
class GeneratorConfig:
    latent_dim: int = 64
    feature_dim: int = 32
    hidden: int = 64
    depth: int = 4
    n_freq_x: int = 6
    n_freq_d: int = 4
    volume_resolution: int = 16
    n_blocks: int = 1
    n_samples: int = 32
    half_extent: float = 1.5
    max_objects: int = 4

    @property
    def image_resolution(self) -> int:
        return self.volume_resolution * 2 ** self.n_blocks


@dataclass
class SceneBatch:
    """Batched generator input: codes as tensors, transforms and poses as arrays.

    Object slots are lists (one entry per object), each entry batched over B.
    """

    obj_shape: list
    obj_app: list
    bg_shape: Tensor
    bg_app: Tensor
    obj_scale: list
    obj_translation: list
    obj_rotation: list
    bg_scale: np.ndarray
    poses: list
    obj_enabled: list = field(default_factory=list)

    def __post_init__(self):
        if not self.obj_enabled:
            self.obj_enabled = [True] * len(self.obj_shape)
        n = len(self.obj_shape)
        if not (len(self.obj_app) == len(self.obj_scale) == len(self.obj_translation) == len(self.obj_rotation) == n):
            raise ValueError("object slots are misaligned")
        if n < 1:
            raise ValueError("a scene needs at least one object")
        b = len(self.poses)
        for t in list(self.obj_shape) + list(self.obj_app) + [self.bg_shape, self.bg_app]:
            if t.shape[0] != b:
                raise ShapeError("SceneBatch", t.shape, (b,))

    @property
    def batch_size(self) -> int:
        return len(self.poses)

    @property
    def n_objects(self) -> int:
        return len(self.obj_shape)

    @classmethod
    def from_specs(cls, specs: Sequence[SceneSpec]) -> "SceneBatch":
        n_obj = specs[0].n_objects
        if any(s.n_objects != n_obj for s in specs):
            raise ValueError("all scenes in a batch need the same object count")

        def codes(attr, i):
            return Tensor(np.stack([getattr(s.latent, attr)[i] for s in specs]))

        def tf(attr, i):
            return np.stack([getattr(s.transforms[i], attr) for s in specs])

        return cls(
            obj_shape=[codes("shape", i) for i in range(n_obj)],
            obj_app=[codes("appearance", i) for i in range(n_obj)],
            bg_shape=codes("shape", n_obj),
            bg_app=codes("appearance", n_obj),
            obj_scale=[tf("scale", i) for i in range(n_obj)],
            obj_translation=[tf("translation", i) for i in range(n_obj)],
            obj_rotation=[tf("rotation", i) for i in range(n_obj)],
            bg_scale=tf("scale", n_obj),
            poses=[s.pose for s in specs],
        )

    def to_specs(self) -> list[SceneSpec]:
        out = []
        for b in range(self.batch_size):
            shape = np.stack([t.data[b] for t in self.obj_shape] + [self.bg_shape.data[b]])
            app = np.stack([t.data[b] for t in self.obj_app] + [self.bg_app.data[b]])
            tfs = [AffineTransform(s[b], t[b], r[b])
                   for s, t, r in zip(self.obj_scale, self.obj_translation, self.obj_rotation)]
            tfs.append(AffineTransform(self.bg_scale[b], np.zeros(3)))
            out.append(SceneSpec(LatentCode(shape, app), tfs, self.poses[b]))
        return out

    def with_codes(self, obj_shape=None, obj_app=None, bg_shape=None, bg_app=None) -> "SceneBatch":
        """Same transforms and poses, new codes (lists for the object slots)."""
        return replace(
            self,
            obj_shape=list(obj_shape) if obj_shape is not None else self.obj_shape,
            obj_app=list(obj_app) if obj_app is not None else self.obj_app,
            bg_shape=bg_shape if bg_shape is not None else self.bg_shape,
            bg_app=bg_app if bg_app is not None else self.bg_app,
        )

    def slice(self, sl: slice) -> "SceneBatch":
        """Scenes ``sl`` of the batch (codes are cut without gradient tracking)."""

        def cut(t: Tensor) -> Tensor:
            return Tensor(t.data[sl])

        return SceneBatch(
            obj_shape=[cut(t) for t in self.obj_shape],
            obj_app=[cut(t) for t in self.obj_app],
            bg_shape=cut(self.bg_shape),
            bg_app=cut(self.bg_app),
            obj_scale=[a[sl] for a in self.obj_scale],
            obj_translation=[a[sl] for a in self.obj_translation],
            obj_rotation=[a[sl] for a in self.obj_rotation],
            bg_scale=self.bg_scale[sl],
            poses=self.poses[sl],
            obj_enabled=list(self.obj_enabled),
        )

    def with_poses(self, poses: Sequence[CameraPose]) -> "SceneBatch":
        return replace(self, poses=list(poses))

    def detached(self) -> "SceneBatch":
        return self.with_codes(
            [t.detach() for t in self.obj_shape], [t.detach() for t in self.obj_app],
            self.bg_shape.detach(), self.bg_app.detach(),
        )


@dataclass
class GeneratorOutput:
    image: Tensor  # (B, 3, H, W) in [-1, 1]
    features: Tensor
    alpha: Tensor
    object_alpha: Tensor


class Generator(Module):
    """Scene codes, transforms and camera pose to an RGB image.

    One field is shared by all object slots; the background has its own.
    """

    def __init__(self, cfg: GeneratorConfig, rng: np.random.Generator):
        self.cfg = cfg
        kw = dict(latent_dim=cfg.latent_dim, hidden=cfg.hidden, depth=cfg.depth, feature_dim=cfg.feature_dim,
                  n_freq_x=cfg.n_freq_x, n_freq_d=cfg.n_freq_d)
        self.object_field = FeatureField(rng, **kw)
        self.background_field = FeatureField(rng, **kw)
        self.renderer = NeuralRenderer(rng, cfg.feature_dim, cfg.n_blocks, cfg.volume_resolution)
        self.last_poses: list = []

    def entities(self, batch: SceneBatch) -> list[EntityBatch]:
        if batch.n_objects > self.cfg.max_objects:
            raise ValueError(f"at most {self.cfg.max_objects} objects per scene")
        b = batch.batch_size
        ents = [
            EntityBatch(self.object_field, zs, za, s, t, r, bounded=True, enabled=on)
            for zs, za, s, t, r, on in zip(batch.obj_shape, batch.obj_app, batch.obj_scale, batch.obj_translation,
                                          batch.obj_rotation, batch.obj_enabled)
        ]
        ents.append(EntityBatch(self.background_field, batch.bg_shape, batch.bg_app, batch.bg_scale,
                                np.zeros((b, 3)), np.broadcast_to(np.eye(3), (b, 3, 3)).copy(), bounded=False))
        return ents

    def render(self, batch: SceneBatch, rng: np.random.Generator | None = None) -> GeneratorOutput:
        """Render a batch; ``rng`` jitters ray samples (midpoints when omitted)."""
        self.last_poses = list(batch.poses)
        out = render_feature_map(self.entities(batch), batch.poses, self.cfg.volume_resolution,
                                 self.cfg.n_samples, self.cfg.half_extent, rng)
        image = self.renderer(out.features)
        return GeneratorOutput(image, out.features, out.alpha, out.object_alpha)

    def forward(self, batch: SceneBatch, rng: np.random.Generator | None = None) -> Tensor:
        return self.render(batch, rng).image


def sample_batch(rng: np.random.Generator, n: int, sampling: SceneSampling) -> SceneBatch:
    return SceneBatch.from_specs([sample_scene_spec(rng, sampling) for _ in range(n)])


def sampling_for(cfg: GeneratorConfig, **overrides) -> SceneSampling:
    """Scene prior matching the generator's code size and camera bounds."""
    return SceneSampling(latent_dim=cfg.latent_dim, **overrides)
