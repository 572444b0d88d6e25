"""Scene description: latent codes, per-object transforms, camera pose.

A :class:`SceneSpec` is everything the generator consumes besides its
weights, and it is stored as a text record next to every synthesized image.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


def rotation_y(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


@dataclass
class AffineTransform:
    """Object pose: x_world = R (s * x_local) + t."""

    scale: np.ndarray
    translation: np.ndarray
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))

    def __post_init__(self):
        self.scale = np.asarray(self.scale, dtype=np.float64).reshape(3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)

    @classmethod
    def identity(cls) -> "AffineTransform":
        return cls(np.ones(3), np.zeros(3), np.eye(3))

    def validate(self, tol: float = 1e-6) -> None:
        if np.any(self.scale <= 0):
            raise ValueError(f"scale must be positive, got {self.scale}")
        r = self.rotation
        if not np.allclose(r.T @ r, np.eye(3), atol=tol) or abs(np.linalg.det(r) - 1) > tol:
            raise ValueError("rotation must be a proper orthonormal matrix")

    def apply(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x) * self.scale) @ self.rotation.T + self.translation

    def inverse(self, x: np.ndarray) -> np.ndarray:
        if np.any(self.scale <= 0):
            raise ValueError(f"scale must be positive, got {self.scale}")
        return ((np.asarray(x) - self.translation) @ self.rotation) / self.scale

    def inverse_directions(self, d: np.ndarray) -> np.ndarray:
        local = np.asarray(d) @ self.rotation
        return local / np.linalg.norm(local, axis=-1, keepdims=True)

    def translated(self, delta) -> "AffineTransform":
        return AffineTransform(self.scale, self.translation + np.asarray(delta, dtype=np.float64), self.rotation)

    def rotated_y(self, angle: float) -> "AffineTransform":
        return AffineTransform(self.scale, self.translation, rotation_y(angle) @ self.rotation)


def apply_inverse_transform(transform: AffineTransform, x: np.ndarray) -> np.ndarray:
    return transform.inverse(x)


@dataclass
class CameraPose:
    """Camera on a sphere around the origin, looking at the origin.

    Intrinsics are resolution independent: ``fov`` is the full vertical
    field of view; pixel focal length and principal point follow from the
    resolution (see :meth:`intrinsics`).
    """

    azimuth: float
    elevation: float = 0.0
    radius: float = 4.0
    fov: float = 2 * np.arctan(1.5 / 4.0)

    def __post_init__(self):
        if self.radius <= 0:
            raise ValueError("radius must be positive")

    def intrinsics(self, resolution: int) -> tuple[float, float, float]:
        focal = 0.5 * resolution / np.tan(0.5 * self.fov)
        return focal, resolution / 2.0, resolution / 2.0

    @property
    def position(self) -> np.ndarray:
        ce = np.cos(self.elevation)
        return self.radius * np.array([ce * np.sin(self.azimuth), np.sin(self.elevation), ce * np.cos(self.azimuth)])

    def basis(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(right, up, forward) unit vectors of the look-at frame."""
        forward = -self.position / self.radius
        right = np.cross(forward, [0.0, 1.0, 0.0])
        right /= np.linalg.norm(right)
        up = np.cross(right, forward)
        return right, up, forward

    def project(self, points: np.ndarray, resolution: int) -> np.ndarray:
        """Pixel coordinates (col, row) of world points under the pinhole model."""
        right, up, forward = self.basis()
        rel = np.atleast_2d(points) - self.position
        z = rel @ forward
        f, cx, cy = self.intrinsics(resolution)
        col = cx + f * (rel @ right) / z
        row = cy - f * (rel @ up) / z
        return np.stack([col, row], axis=-1)


@dataclass
class LatentCode:
    """Shape and appearance codes; objects first, background last."""

    shape: np.ndarray  # (entities, dim)
    appearance: np.ndarray

    def __post_init__(self):
        self.shape = np.atleast_2d(np.asarray(self.shape, dtype=np.float64))
        self.appearance = np.atleast_2d(np.asarray(self.appearance, dtype=np.float64))
        if self.shape.shape != self.appearance.shape:
            raise ValueError("shape and appearance codes must have equal dimensions")
        if self.shape.shape[0] < 2:
            raise ValueError("a latent code needs at least one object and a background")

    @property
    def n_entities(self) -> int:
        return self.shape.shape[0]

    @property
    def dim(self) -> int:
        return self.shape.shape[1]

    def as_vector(self) -> np.ndarray:
        """[z_s^1, z_a^1, ..., z_s^N, z_a^N]."""
        return np.concatenate([np.concatenate([s, a]) for s, a in zip(self.shape, self.appearance)])

    @classmethod
    def from_vector(cls, vec: np.ndarray, dim: int) -> "LatentCode":
        pairs = np.asarray(vec, dtype=np.float64).reshape(-1, 2, dim)
        return cls(pairs[:, 0], pairs[:, 1])


@dataclass
class SceneSpec:
    latent: LatentCode
    transforms: list  # one AffineTransform per entity, background last
    pose: CameraPose

    def __post_init__(self):
        if len(self.transforms) != self.latent.n_entities:
            raise ValueError("need one transform per entity")

    @property
    def n_objects(self) -> int:
        return self.latent.n_entities - 1

    def to_text(self) -> str:
        return scene_to_text(self)

    @classmethod
    def from_text(cls, text: str) -> "SceneSpec":
        return scene_from_text(text)


@dataclass
class SceneSampling:
    """Bounds of the scene prior.  Ranges are (low, high) pairs."""

    n_objects: int = 1
    latent_dim: int = 64
    scale_range: tuple = (0.55, 0.8)
    translation_range: tuple = ((-0.25, 0.25), (-0.15, 0.15), (-0.25, 0.25))
    rotation_range: tuple = (-np.pi / 6, np.pi / 6)
    azimuth_range: tuple = (-np.pi / 4, np.pi / 4)
    elevation: float = 0.0
    radius: float = 4.0
    fov: float = 2 * np.arctan(1.5 / 4.0)
    background_scale: float = 5.5
    max_objects: int = 4


def sample_scene_spec(rng: np.random.Generator, cfg: SceneSampling) -> SceneSpec:
    if not 1 <= cfg.n_objects <= cfg.max_objects:
        raise ValueError(f"object count must be in [1, {cfg.max_objects}]")
    n = cfg.n_objects + 1
    shape = rng.standard_normal((n, cfg.latent_dim))
    appearance = rng.standard_normal((n, cfg.latent_dim))
    transforms = []
    for _ in range(cfg.n_objects):
        s = rng.uniform(cfg.scale_range[0], cfg.scale_range[1], size=3)
        t = np.array([rng.uniform(lo, hi) for lo, hi in cfg.translation_range])
        r = rotation_y(rng.uniform(*cfg.rotation_range))
        transforms.append(AffineTransform(s, t, r))
    transforms.append(background_transform(cfg))
    pose = CameraPose(float(rng.uniform(*cfg.azimuth_range)), cfg.elevation, cfg.radius, cfg.fov)
    return SceneSpec(LatentCode(shape, appearance), transforms, pose)


def background_transform(cfg: SceneSampling) -> AffineTransform:
    return AffineTransform(np.full(3, cfg.background_scale), np.zeros(3), np.eye(3))


# --------------------------------------------------------------------------
# text record


def _fmt(values) -> str:
    return " ".join(repr(float(v)) for v in np.ravel(values))


def scene_to_text(spec: SceneSpec) -> str:
    lines = [f"entities = {spec.latent.n_entities}", f"latent_dim = {spec.latent.dim}"]
    for i in range(spec.latent.n_entities):
        t = spec.transforms[i]
        lines += [
            f"z_shape.{i} = {_fmt(spec.latent.shape[i])}",
            f"z_app.{i} = {_fmt(spec.latent.appearance[i])}",
            f"T.{i}.s = {_fmt(t.scale)}",
            f"T.{i}.t = {_fmt(t.translation)}",
            f"T.{i}.R = {_fmt(t.rotation)}",
        ]
    p = spec.pose
    lines += [
        f"pose.azimuth = {float(p.azimuth)!r}",
        f"pose.elevation = {float(p.elevation)!r}",
        f"pose.radius = {float(p.radius)!r}",
        f"pose.fov = {float(p.fov)!r}",
    ]
    return "\n".join(lines) + "\n"


def parse_key_values(text: str) -> dict[str, str]:
    out = {}
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ValueError(f"malformed line: {line!r}")
        out[key.strip()] = value.strip()
    return out


def scene_from_text(text: str) -> SceneSpec:
    kv = parse_key_values(text)

    def vec(key):
        return np.array([float(v) for v in kv[key].split()])

    n = int(kv["entities"])
    shape = np.stack([vec(f"z_shape.{i}") for i in range(n)])
    app = np.stack([vec(f"z_app.{i}") for i in range(n)])
    transforms = [
        AffineTransform(vec(f"T.{i}.s"), vec(f"T.{i}.t"), vec(f"T.{i}.R").reshape(3, 3)) for i in range(n)
    ]
    pose = CameraPose(
        float(kv["pose.azimuth"]), float(kv["pose.elevation"]), float(kv["pose.radius"]), float(kv["pose.fov"])
    )
    return SceneSpec(LatentCode(shape, app), transforms, pose)


def stack_transforms(transforms: Sequence[AffineTransform]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Batch arrays (B,3), (B,3), (B,3,3) for one entity slot."""
    return (
        np.stack([t.scale for t in transforms]),
        np.stack([t.translation for t in transforms]),
        np.stack([t.rotation for t in transforms]),
    )
