"""Experiment configuration: INI text with fixed sections, validated on load.

Every key has a default, so an empty file is a valid config.  Unknown
sections or keys are errors.  :meth:`ExperimentConfig.to_text` writes the
full resolved config, and :meth:`ExperimentConfig.digest` hashes that text;
the digest is stamped into checkpoints and output manifests.
"""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .adversarial import Discriminator, GanConfig
from .generator import GeneratorConfig, sampling_for
from .inverter import Inverter, InverterConfig, LossFlags, LossWeights
from .scene import SceneSampling
from .synth import PRIORS, DatasetConfig


class ConfigError(ValueError):
    pass


@dataclass
class ModelSection:
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
    disc_channels: int = 16
    disc_max_channels: int = 64
    inv_channels: int = 16
    inv_max_channels: int = 64
    inv_blocks: int = 4

    def validate(self):
        for name in ("latent_dim", "feature_dim", "hidden", "depth", "volume_resolution", "n_blocks",
                     "disc_channels", "disc_max_channels", "inv_channels", "inv_max_channels", "inv_blocks"):
            _positive(self, name)
        if self.n_freq_x < 0 or self.n_freq_d < 0:
            raise ConfigError("model.n_freq_x and model.n_freq_d must be >= 0")
        if self.n_samples < 2:
            raise ConfigError("model.n_samples must be >= 2")
        if self.half_extent <= 0:
            raise ConfigError("model.half_extent must be positive")
        res = self.volume_resolution * 2 ** self.n_blocks
        if res & (res - 1) or res < 8:
            raise ConfigError(f"image resolution {res} must be a power of two >= 8")


@dataclass
class SceneSection:
    n_objects: int = 1
    scale_min: float = 0.55
    scale_max: float = 0.8
    azimuth_min: float = -np.pi / 4
    azimuth_max: float = np.pi / 4
    elevation: float = 0.0
    radius: float = 4.0
    background_scale: float = 5.5
    canonical_scale: float = 1.0  # object scale used when inverting images without provenance

    def validate(self):
        if not 0 < self.scale_min <= self.scale_max:
            raise ConfigError("scene needs 0 < scale_min <= scale_max")
        if self.azimuth_min > self.azimuth_max:
            raise ConfigError("scene needs azimuth_min <= azimuth_max")
        _positive(self, "n_objects")
        _positive(self, "radius")
        _positive(self, "background_scale")
        _positive(self, "canonical_scale")


@dataclass
class GanSection:
    batch_size: int = 16
    iterations: int = 5000
    lr_g: float = 1e-4
    lr_d: float = 7e-5
    r1_gamma: float = 10.0
    r1_method: str = "double_backward"
    saturating: bool = False
    max_consecutive_aborts: int = 5
    checkpoint_every: int = 500

    def validate(self):
        for name in ("batch_size", "lr_g", "lr_d", "max_consecutive_aborts", "checkpoint_every"):
            _positive(self, name)
        if self.iterations < 0 or self.r1_gamma < 0:
            raise ConfigError("gan.iterations and gan.r1_gamma must be >= 0")
        if self.r1_method not in ("double_backward", "finite_difference"):
            raise ConfigError(f"gan.r1_method: unknown method {self.r1_method!r}")


@dataclass
class InverterSection:
    batch_size: int = 16
    iterations: int = 2500
    lr: float = 1e-4
    lambda_latent: float = 10.0
    lambda_reconst: float = 100.0
    lambda_percept: float = 1.0
    lambda_gan: float = 1.0
    use_reconst: bool = True
    use_gan: bool = True
    use_percept: bool = True
    checkpoint_every: int = 500

    def validate(self):
        for name in ("batch_size", "lr", "checkpoint_every"):
            _positive(self, name)
        if self.iterations < 0:
            raise ConfigError("inverter.iterations must be >= 0")
        for name in ("lambda_latent", "lambda_reconst", "lambda_percept", "lambda_gan"):
            if getattr(self, name) < 0:
                raise ConfigError(f"inverter.{name} must be >= 0")


@dataclass
class DataSection:
    root: str = "data"
    train: int = 512
    test: int = 128
    ood: int = 64
    face_weight: float = 1.0
    car_weight: float = 0.0

    def validate(self):
        if min(self.train, self.test, self.ood) < 0:
            raise ConfigError("data split sizes must be >= 0")
        if min(self.face_weight, self.car_weight) < 0 or self.face_weight + self.car_weight <= 0:
            raise ConfigError("data class weights must be >= 0 with a positive sum")


@dataclass
class EvalSection:
    n_images: int = 128
    n_views: int = 8

    def validate(self):
        if self.n_images < 2:
            raise ConfigError("eval.n_images must be >= 2")
        _positive(self, "n_views")


@dataclass
class RunSection:
    seed: int = 0
    dtype: str = "float32"

    def validate(self):
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"run.dtype must be float32 or float64, got {self.dtype!r}")


def _positive(section, name):
    if getattr(section, name) <= 0:
        raise ConfigError(f"{type(section).__name__.replace('Section', '').lower()}.{name} must be positive")


_SECTIONS = {
    "model": ModelSection,
    "scene": SceneSection,
    "gan": GanSection,
    "inverter": InverterSection,
    "data": DataSection,
    "eval": EvalSection,
    "run": RunSection,
}


def _coerce(section: str, key: str, kind: type, raw: str):
    try:
        if kind is bool:
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        return raw.strip()
    except ValueError:
        raise ConfigError(f"{section}.{key}: cannot parse {raw!r} as {kind.__name__}") from None


@dataclass
class ExperimentConfig:
    model: ModelSection = field(default_factory=ModelSection)
    scene: SceneSection = field(default_factory=SceneSection)
    gan: GanSection = field(default_factory=GanSection)
    inverter: InverterSection = field(default_factory=InverterSection)
    data: DataSection = field(default_factory=DataSection)
    eval: EvalSection = field(default_factory=EvalSection)
    run: RunSection = field(default_factory=RunSection)

    def validate(self) -> "ExperimentConfig":
        for name in _SECTIONS:
            getattr(self, name).validate()
        if self.scene.n_objects > self.model.max_objects:
            raise ConfigError("scene.n_objects exceeds model.max_objects")
        return self

    # -- text form
    @classmethod
    def from_text(cls, text: str) -> "ExperimentConfig":
        parser = configparser.ConfigParser(interpolation=None, default_section="__none__")
        parser.optionxform = str
        try:
            parser.read_string(text)
        except configparser.Error as e:
            raise ConfigError(f"malformed config: {e}") from None
        cfg = cls()
        for section in parser.sections():
            if section not in _SECTIONS:
                raise ConfigError(f"unknown section [{section}]")
            target = getattr(cfg, section)
            types = {f.name: f.type for f in fields(target)}
            for key, raw in parser.items(section):
                if key not in types:
                    raise ConfigError(f"unknown key {section}.{key}")
                kind = {"int": int, "float": float, "bool": bool, "str": str}[types[key]]
                setattr(target, key, _coerce(section, key, kind, raw))
        return cfg.validate()

    @classmethod
    def load(cls, path: Path | str | None) -> "ExperimentConfig":
        if path is None:
            return cls().validate()
        try:
            text = Path(path).read_text()
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from None
        return cls.from_text(text)

    def to_text(self) -> str:
        lines = []
        for name in _SECTIONS:
            lines.append(f"[{name}]")
            for f in fields(getattr(self, name)):
                value = getattr(getattr(self, name), f.name)
                lines.append(f"{f.name} = {value!r}" if isinstance(value, float) else f"{f.name} = {value}")
            lines.append("")
        return "\n".join(lines)

    def digest(self) -> str:
        """Hash of everything that shapes a model or its training."""
        return hashlib.sha256(self.to_text().encode()).hexdigest()[:16]

    def model_digest(self) -> str:
        """Hash of the model section only; artifacts with equal model digests are interchangeable."""
        text = "\n".join(f"{f.name}={getattr(self.model, f.name)!r}" for f in fields(self.model))
        return hashlib.sha256(text.encode()).hexdigest()[:16]

    def replace(self, **sections) -> "ExperimentConfig":
        """Copy with some fields overridden, e.g. ``replace(run={"seed": 3})``."""
        new = dataclasses.replace(self, **{k: dataclasses.replace(getattr(self, k)) for k in _SECTIONS})
        for section, values in sections.items():
            if section not in _SECTIONS:
                raise ConfigError(f"unknown section [{section}]")
            for key, value in values.items():
                if not hasattr(getattr(new, section), key):
                    raise ConfigError(f"unknown key {section}.{key}")
                setattr(getattr(new, section), key, value)
        return new.validate()

    # -- builders
    @property
    def dtype(self):
        return np.float32 if self.run.dtype == "float32" else np.float64

    def generator_config(self) -> GeneratorConfig:
        m = self.model
        return GeneratorConfig(latent_dim=m.latent_dim, feature_dim=m.feature_dim, hidden=m.hidden, depth=m.depth,
                               n_freq_x=m.n_freq_x, n_freq_d=m.n_freq_d, volume_resolution=m.volume_resolution,
                               n_blocks=m.n_blocks, n_samples=m.n_samples, half_extent=m.half_extent,
                               max_objects=m.max_objects)

    @property
    def resolution(self) -> int:
        return self.generator_config().image_resolution

    def scene_sampling(self) -> SceneSampling:
        s = self.scene
        return sampling_for(self.generator_config(), n_objects=s.n_objects, scale_range=(s.scale_min, s.scale_max),
                            azimuth_range=(s.azimuth_min, s.azimuth_max), elevation=s.elevation, radius=s.radius,
                            background_scale=s.background_scale, max_objects=self.model.max_objects)

    def discriminator(self, rng: np.random.Generator) -> Discriminator:
        return Discriminator(rng, resolution=self.resolution, base_channels=self.model.disc_channels,
                             max_channels=self.model.disc_max_channels)

    def inverter_model(self, rng: np.random.Generator) -> Inverter:
        m = self.model
        return Inverter(rng, resolution=self.resolution, latent_dim=m.latent_dim, channels=m.inv_channels,
                        max_channels=m.inv_max_channels, n_blocks=m.inv_blocks)

    def gan_config(self) -> GanConfig:
        g = self.gan
        return GanConfig(batch_size=g.batch_size, lr_g=g.lr_g, lr_d=g.lr_d, r1_gamma=g.r1_gamma,
                         r1_method=g.r1_method, saturating=g.saturating,
                         max_consecutive_aborts=g.max_consecutive_aborts)

    def inverter_config(self) -> InverterConfig:
        i = self.inverter
        return InverterConfig(batch_size=i.batch_size, lr=i.lr,
                              weights=LossWeights(i.lambda_latent, i.lambda_reconst, i.lambda_percept, i.lambda_gan),
                              flags=LossFlags(i.use_reconst, i.use_gan, i.use_percept))

    def dataset_config(self) -> DatasetConfig:
        d = self.data
        mix = {k: w for k, w in (("face", d.face_weight), ("car", d.car_weight)) if w > 0}
        assert set(mix) <= set(PRIORS)
        return DatasetConfig(resolution=self.resolution, counts={"train": d.train, "test": d.test, "ood": d.ood},
                             class_mix=mix)
