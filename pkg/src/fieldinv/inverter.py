"""Feed-forward inverter: image to latent codes, trained on generator samples."""

from __future__ import annotations

import csv
import hashlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .adversarial import Discriminator
from .generator import Generator, GeneratorOutput, SceneBatch
from .metrics import perceptual_distance, ssim
from .scene import AffineTransform, CameraPose, rotation_y
from .tensor import Conv2d, Linear, Module, RMSProp, ShapeError, Tensor, grad, no_grad, ops, param_hash

HEADS = ("obj_shape", "obj_app", "bg_shape", "bg_app")


class EncoderBlock(Module):
    """relu(shortcut(x) + conv(relu(conv(x)))), optionally followed by 2x average pooling."""

    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator, down: bool):
        self.conv1 = Conv2d(c_in, c_out, rng, gain=np.sqrt(2.0))
        self.conv2 = Conv2d(c_out, c_out, rng)
        self.shortcut = Conv2d(c_in, c_out, rng, k=1, bias=False) if c_in != c_out else None
        self.down = down

    def forward(self, x: Tensor) -> Tensor:
        h = self.conv2(ops.relu(self.conv1(x)))
        s = x if self.shortcut is None else self.shortcut(x)
        out = ops.relu(ops.add(s, h))
        return ops.avg_pool(out) if self.down else out


@dataclass
class PredictedCodes:
    obj_shape: Tensor  # (B, D)
    obj_app: Tensor
    bg_shape: Tensor
    bg_app: Tensor

    def as_array(self) -> np.ndarray:
        """(B, 4*D) in head order."""
        return np.concatenate([getattr(self, k).data for k in HEADS], axis=1)

    def digest(self) -> str:
        return hashlib.sha256(np.ascontiguousarray(self.as_array(), dtype="<f8").tobytes()).hexdigest()[:16]


def source_codes(batch: SceneBatch) -> PredictedCodes:
    """The single-object scene codes of a generator batch, in head layout."""
    if batch.n_objects != 1:
        raise ValueError("the inverter models one object plus background")
    return PredictedCodes(batch.obj_shape[0], batch.obj_app[0], batch.bg_shape, batch.bg_app)


class Inverter(Module):
    """Residual ReLU encoder with four linear heads, one per code slot.

    Blocks halve the resolution while it is above 4; the final 4x4 map is
    flattened into the heads.  ``forward_calls`` and ``images_encoded`` count
    encoder passes.
    """

    def __init__(self, rng: np.random.Generator, resolution: int = 32, latent_dim: int = 64,
                 channels: int = 32, max_channels: int = 128, n_blocks: int = 4):
        self.resolution, self.latent_dim = resolution, latent_dim
        self.conv_in = Conv2d(3, channels, rng, gain=np.sqrt(2.0))
        self.blocks, c, r = [], channels, resolution
        for _ in range(n_blocks):
            down = r > 4
            nxt = min(2 * c, max_channels) if down else c
            self.blocks.append(EncoderBlock(c, nxt, rng, down))
            c, r = nxt, (r // 2 if down else r)
        self.flat_dim = c * r * r
        self.heads = [Linear(self.flat_dim, latent_dim, rng) for _ in HEADS]
        self.forward_calls = 0
        self.images_encoded = 0

    def forward(self, images) -> PredictedCodes:
        x = images if isinstance(images, Tensor) else Tensor(np.asarray(images))
        if x.ndim != 4 or x.shape[1:] != (3, self.resolution, self.resolution):
            raise ShapeError("invert", x.shape, (None, 3, self.resolution, self.resolution))
        self.forward_calls += 1
        self.images_encoded += x.shape[0]
        h = ops.relu(self.conv_in(x))
        for block in self.blocks:
            h = block(h)
        h = ops.reshape(h, (x.shape[0], -1))
        return PredictedCodes(*(head(h) for head in self.heads))


def invert(inverter: Inverter, images) -> PredictedCodes:
    return inverter(images)


def reconstruct(gen: Generator, codes: PredictedCodes, source: SceneBatch,
                rng: np.random.Generator | None = None) -> GeneratorOutput:
    """Render predicted codes with the SOURCE transforms and camera poses."""
    batch = source.with_codes([codes.obj_shape], [codes.obj_app], codes.bg_shape, codes.bg_app)
    return gen.render(batch, rng)


# --------------------------------------------------------------------------
# loss


@dataclass
class LossWeights:
    latent: float = 10.0
    reconst: float = 100.0
    percept: float = 1.0
    gan: float = 1.0


@dataclass
class LossFlags:
    """Ablation switches; disabled parts are reported as exactly 0."""

    reconst: bool = True
    gan: bool = True
    percept: bool = True

    @classmethod
    def ladder(cls) -> dict[str, "LossFlags"]:
        return {
            "latent_only": cls(False, False, False),
            "reconst": cls(True, False, False),
            "gan": cls(True, True, False),
            "full": cls(True, True, True),
        }

    @property
    def needs_render(self) -> bool:
        return self.reconst or self.gan or self.percept


def latent_l1(z_src: PredictedCodes, z_pred: PredictedCodes) -> Tensor:
    terms = [ops.mean(ops.abs(ops.sub(getattr(z_pred, k), getattr(z_src, k).detach()))) for k in HEADS]
    return ops.div(ops.add(ops.add(terms[0], terms[1]), ops.add(terms[2], terms[3])), 4.0)


def inverter_loss(z_src: PredictedCodes, z_pred: PredictedCodes, img_src, img_rec: Tensor | None,
                  disc: Discriminator | None, weights: LossWeights = LossWeights(),
                  flags: LossFlags = LossFlags()) -> tuple[Tensor, dict]:
    """total = w_gan*L_gan + w_lat*L1(z) + w_rec*L1(img) + w_per*((1 - SSIM) + perceptual).

    Returns the total and the unweighted parts.
    """
    latent = latent_l1(z_src, z_pred)
    total = ops.mul(latent, weights.latent)
    parts = {"latent": float(latent.data), "reconst": 0.0, "gan": 0.0, "percept": 0.0}
    if flags.needs_render:
        if img_rec is None:
            raise ValueError("image-level loss terms need a reconstruction")
        src = img_src if isinstance(img_src, Tensor) else Tensor(np.asarray(img_src))
        if src.shape != img_rec.shape:
            raise ShapeError("inverter_loss", src.shape, img_rec.shape)
        if flags.reconst:
            rec = ops.l1(img_rec, src)
            parts["reconst"] = float(rec.data)
            total = ops.add(total, ops.mul(rec, weights.reconst))
        if flags.gan:
            if disc is None:
                raise ValueError("the adversarial term needs a discriminator")
            gan = ops.mean(ops.softplus(ops.neg(disc(img_rec))))
            parts["gan"] = float(gan.data)
            total = ops.add(total, ops.mul(gan, weights.gan))
        if flags.percept:
            per = ops.add(ops.sub(1.0, ssim(src, img_rec)), perceptual_distance(src, img_rec))
            parts["percept"] = float(per.data)
            total = ops.add(total, ops.mul(per, weights.percept))
    parts["total"] = float(total.data)
    return total, parts


def weighted_total(parts: dict, weights: LossWeights) -> float:
    return (weights.latent * parts["latent"] + weights.reconst * parts["reconst"]
            + weights.gan * parts["gan"] + weights.percept * parts["percept"])


# --------------------------------------------------------------------------
# training


class FreezeViolation(AssertionError):
    pass


@dataclass
class InverterConfig:
    batch_size: int = 16
    lr: float = 1e-4
    weights: LossWeights = field(default_factory=LossWeights)
    flags: LossFlags = field(default_factory=LossFlags)


@dataclass
class InverterReport:
    step: int
    total: float
    latent: float
    reconst: float
    gan: float
    percept: float

    FIELDS = ("step", "total", "latent", "reconst", "gan", "percept")

    def row(self) -> list:
        return [getattr(self, k) for k in self.FIELDS]


@dataclass
class InverterTrainer:
    """Trains the inverter on fresh generator samples; G and D stay frozen.

    The frozen networks are hashed before and after every step and any
    difference raises :class:`FreezeViolation`.
    """

    inverter: Inverter
    gen: Generator
    disc: Discriminator | None
    cfg: InverterConfig
    sample_scenes: Callable[[np.random.Generator, int], SceneBatch]
    rng: np.random.Generator
    step_count: int = 0
    opt: RMSProp = None
    log_path: Path | None = None
    frozen_hashes: tuple = ()

    def __post_init__(self):
        if self.opt is None:
            self.opt = RMSProp(self.inverter.parameters(), lr=self.cfg.lr)
        self.gen.eval()
        if self.disc is not None:
            self.disc.eval()
        self.frozen_hashes = self._hashes()
        if self.log_path is not None:
            self.log_path = Path(self.log_path)
            if not self.log_path.exists():
                self.log_path.parent.mkdir(parents=True, exist_ok=True)
                with open(self.log_path, "w", newline="") as fh:
                    csv.writer(fh).writerow(InverterReport.FIELDS + ("gen_hash", "disc_hash"))

    def _hashes(self) -> tuple:
        return (param_hash(self.gen), param_hash(self.disc) if self.disc is not None else "")

    def step(self) -> InverterReport:
        if self._hashes() != self.frozen_hashes:
            raise FreezeViolation("frozen networks changed outside the inverter trainer")
        self.step_count += 1
        batch = self.sample_scenes(self.rng, self.cfg.batch_size)
        with no_grad():
            img_src = self.gen(batch).data
        z_src = source_codes(batch)
        self.inverter.train()
        z_pred = self.inverter(img_src)
        img_rec = reconstruct(self.gen, z_pred, batch).image if self.cfg.flags.needs_render else None
        total, parts = inverter_loss(z_src, z_pred, img_src, img_rec, self.disc, self.cfg.weights, self.cfg.flags)
        grads = grad(total, self.opt.params)
        self.opt.step([None if g is None else g.data for g in grads])
        if self._hashes() != self.frozen_hashes:
            raise FreezeViolation("an inverter step modified the generator or discriminator")
        report = InverterReport(self.step_count, parts["total"], parts["latent"], parts["reconst"], parts["gan"],
                                parts["percept"])
        if self.log_path is not None:
            with open(self.log_path, "a", newline="") as fh:
                csv.writer(fh).writerow([repr(v) if isinstance(v, float) else v for v in report.row()]
                                        + list(self.frozen_hashes))
        return report


def evaluate_latent_error(inverter: Inverter, gen: Generator, batch: SceneBatch) -> float:
    """Mean L1 between source and predicted codes on a fixed held-out batch."""
    with no_grad():
        img = gen(batch).data
        return float(latent_l1(source_codes(batch), inverter.eval()(img)).data)


# --------------------------------------------------------------------------
# zero-shot use


def canonical_transform(scale=1.0, translation=(0.0, 0.0, 0.0), angle: float = 0.0) -> AffineTransform:
    """Inference-time object pose: identity unless overridden."""
    return AffineTransform(np.full(3, scale) if np.isscalar(scale) else scale, translation, rotation_y(angle))


def _scene(codes: PredictedCodes, index: int, transforms: Sequence[AffineTransform], poses: Sequence[CameraPose],
           bg_scale: float, obj_codes: Sequence[tuple] | None = None) -> SceneBatch:
    """Broadcast one image's codes over ``poses``."""
    n = len(poses)

    def rep(t: Tensor) -> Tensor:
        return Tensor(np.repeat(t.data[index:index + 1], n, axis=0))

    objects = obj_codes or [(rep(codes.obj_shape), rep(codes.obj_app))]
    if len(objects) != len(transforms):
        raise ValueError("need one transform per object")
    return SceneBatch(
        obj_shape=[s for s, _ in objects],
        obj_app=[a for _, a in objects],
        bg_shape=rep(codes.bg_shape),
        bg_app=rep(codes.bg_app),
        obj_scale=[np.repeat(t.scale[None], n, 0) for t in transforms],
        obj_translation=[np.repeat(t.translation[None], n, 0) for t in transforms],
        obj_rotation=[np.repeat(t.rotation[None], n, 0) for t in transforms],
        bg_scale=np.full((n, 3), bg_scale),
        poses=list(poses),
    )


@dataclass
class ViewSet:
    codes: PredictedCodes
    poses: list
    images: np.ndarray  # (V, 3, H, W)
    alpha: np.ndarray  # (V, H, W) object alpha

    def as_dict(self) -> dict:
        return asdict(self)


def zero_shot_invert(inverter: Inverter, gen: Generator, image, poses: Sequence[CameraPose],
                     transform: AffineTransform | None = None, bg_scale: float = 5.5) -> ViewSet:
    """One encoder pass on ``image`` (3, H, W), then a render per pose; no parameter updates."""
    transform = transform or canonical_transform()
    img = np.asarray(image.data if isinstance(image, Tensor) else image)
    if img.ndim == 3:
        img = img[None]
    inverter.eval()
    gen.eval()
    with no_grad():
        codes = inverter(img)
        out = gen.render(_scene(codes, 0, [transform], poses, bg_scale))
    return ViewSet(codes, list(poses), out.image.data, out.object_alpha.data)


def style_mix(inverter: Inverter, gen: Generator, image_a, image_b, pose: CameraPose,
              transform: AffineTransform | None = None, bg_scale: float = 5.5) -> GeneratorOutput:
    """Shape code from ``image_a``, appearance code from ``image_b``; background from ``image_a``."""
    transform = transform or canonical_transform()
    inverter.eval()
    gen.eval()
    with no_grad():
        ca = inverter(np.asarray(image_a)[None])
        cb = inverter(np.asarray(image_b)[None])
        mixed = PredictedCodes(ca.obj_shape, cb.obj_app, ca.bg_shape, ca.bg_app)
        return gen.render(_scene(mixed, 0, [transform], [pose], bg_scale))


def render_codes(gen: Generator, codes: PredictedCodes, pose: CameraPose, transform: AffineTransform | None = None,
                 bg_scale: float = 5.5) -> GeneratorOutput:
    gen.eval()
    with no_grad():
        return gen.render(_scene(codes, 0, [transform or canonical_transform()], [pose], bg_scale))


def compose_two_objects(inverter: Inverter, gen: Generator, image_a, image_b, transform_a: AffineTransform,
                        transform_b: AffineTransform, pose: CameraPose, bg_scale: float = 5.5,
                        enabled: tuple = (True, True)) -> GeneratorOutput:
    """Two inverted objects in one scene; the background comes from ``image_a``."""
    if gen.cfg.max_objects < 2:
        raise ValueError("object cap exceeded")
    inverter.eval()
    gen.eval()
    with no_grad():
        ca = inverter(np.asarray(image_a)[None])
        cb = inverter(np.asarray(image_b)[None])
        objects = [(ca.obj_shape, ca.obj_app), (cb.obj_shape, cb.obj_app)]
        batch = _scene(ca, 0, [transform_a, transform_b], [pose], bg_scale, obj_codes=objects)
        batch.obj_enabled = list(enabled)
        return gen.render(batch)
