"""Experiment orchestration shared by the command line and the acceptance tests.

Random streams are derived from the run seed by name, so adding a stream
never shifts another one.  Checkpoints bundle parameters, spectral-norm
buffers, optimizer accumulators, step counters and the bit-generator state
of every live stream; resuming from one replays the uninterrupted run
exactly (single-threaded).
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import synth
from .adversarial import Discriminator, GanBatchReport, GanTrainer
from .config import ConfigError, ExperimentConfig
from .diagnostics import alpha_centroid
from .generator import Generator, SceneBatch, sample_batch
from .inverter import (
    Inverter,
    InverterReport,
    InverterTrainer,
    PredictedCodes,
    _scene,
    canonical_transform,
    latent_l1,
    source_codes,
)
from .metrics import collect_stats, default_embedder, fid_substitute, frechet_distance, psnr, ssim_per_image
from .scene import CameraPose
from .tensor import RMSProp, Tensor, checkpoint, default_dtype, no_grad, param_hash

STREAMS = ("gen_init", "disc_init", "inv_init", "gan", "data", "inverter", "eval", "samples")
EVAL_KEYS = (
    "config_digest", "seed", "n_images",
    "fid_unconditional", "fid_conditional", "fid_self", "fid_cross_class",
    "recon_ssim_mean", "recon_ssim_std", "recon_psnr_mean", "recon_psnr_std",
    "random_code_ssim_mean", "latent_l1", "mask_alpha_pearson",
)
CHUNK = 16


def stream(seed: int, name: str) -> np.random.Generator:
    """Independent generator for ``name``; stable under adding new names."""
    if name not in STREAMS:
        raise KeyError(name)
    key = int.from_bytes(hashlib.sha256(name.encode()).digest()[:8], "little")
    return np.random.default_rng(np.random.SeedSequence([seed, key]))


def canonical_object(cfg: ExperimentConfig, scale: float | None = None, translation=(0.0, 0.0, 0.0)):
    """Inference-time object transform: unrotated, ``scene.canonical_scale`` unless overridden."""
    return canonical_transform(cfg.scene.canonical_scale if scale is None else scale, translation)


def sweep_poses(cfg: ExperimentConfig, count: int, start: float = 0.0, span: float = 2 * np.pi) -> list[CameraPose]:
    """``count`` azimuths from ``start``; a full turn excludes its end point, a partial span includes it."""
    full = np.isclose(span, 2 * np.pi)
    angles = np.linspace(0.0, span, count, endpoint=not full and count > 1)
    return [CameraPose(start + a, cfg.scene.elevation, cfg.scene.radius) for a in angles]


# --------------------------------------------------------------------------
# checkpoint bundles


@dataclass
class Bundle:
    """Everything needed to rebuild networks and continue training."""

    kind: str  # "gan" or "inverter"
    cfg: ExperimentConfig
    gen: Generator
    disc: Discriminator
    inverter: Inverter | None = None
    step: int = 0
    optim: dict = field(default_factory=dict)  # name -> list of accumulators
    rng_state: dict = field(default_factory=dict)  # stream name -> bit generator state
    extra: dict = field(default_factory=dict)

    def tensors(self) -> dict[str, np.ndarray]:
        out = {}
        for prefix, module in (("gen", self.gen), ("disc", self.disc), ("inv", self.inverter)):
            if module is not None:
                out.update({f"{prefix}.{k}": v for k, v in module.state_dict().items()})
        for name, accs in self.optim.items():
            out.update({f"opt.{name}.{i}": a for i, a in enumerate(accs)})
        return out

    def meta(self) -> dict:
        return {
            "kind": self.kind,
            "config": self.cfg.to_text(),
            "config_digest": self.cfg.digest(),
            "model_digest": self.cfg.model_digest(),
            "step": self.step,
            "rng": self.rng_state,
            "extra": self.extra,
        }

    def save(self, path: Path | str) -> None:
        checkpoint.save(path, self.tensors(), self.meta())

    def to_bytes(self) -> bytes:
        return checkpoint.dumps(self.tensors(), self.meta())


def build_networks(cfg: ExperimentConfig, with_inverter: bool = False):
    """Freshly initialised (gen, disc, inverter) from the config seed; call inside the run dtype."""
    seed = cfg.run.seed
    gen = Generator(cfg.generator_config(), stream(seed, "gen_init"))
    disc = cfg.discriminator(stream(seed, "disc_init"))
    inv = cfg.inverter_model(stream(seed, "inv_init")) if with_inverter else None
    return gen, disc, inv


def _load_module(module, tensors: dict, prefix: str) -> None:
    module.load_state_dict({k[len(prefix) + 1:]: v for k, v in tensors.items() if k.startswith(prefix + ".")})


def load_bundle(path: Path | str, cfg: ExperimentConfig | None = None, kind: str | None = None) -> Bundle:
    """Rebuild a bundle.  With ``cfg`` given, the model dims must match the stored ones."""
    tensors, meta = checkpoint.load(path)
    stored = ExperimentConfig.from_text(meta["config"])
    if cfg is not None and cfg.model_digest() != stored.model_digest():
        raise ConfigError(f"{path}: model section differs from the config (digest {stored.model_digest()} "
                          f"vs {cfg.model_digest()})")
    if kind is not None and meta["kind"] != kind:
        raise ConfigError(f"{path}: expected a {kind} checkpoint, found {meta['kind']}")
    with default_dtype(stored.dtype):
        gen, disc, inv = build_networks(stored, with_inverter=meta["kind"] == "inverter")
        _load_module(gen, tensors, "gen")
        _load_module(disc, tensors, "disc")
        if inv is not None:
            _load_module(inv, tensors, "inv")
    optim: dict[str, list] = {}
    for key in (k for k in tensors if k.startswith("opt.")):
        _, name, idx = key.split(".")
        optim.setdefault(name, {})[int(idx)] = tensors[key]
    optim = {n: [d[i] for i in range(len(d))] for n, d in optim.items()}
    return Bundle(meta["kind"], stored, gen, disc, inv, meta["step"], optim, meta["rng"], meta.get("extra", {}))


def _restore_rng(rng: np.random.Generator, state: dict) -> np.random.Generator:
    rng.bit_generator.state = state
    return rng


def _restore_optimizer(opt: RMSProp, accs: list | None) -> None:
    if accs is None:
        return
    if len(accs) != len(opt.params):
        raise ConfigError("optimizer state does not match the parameter list")
    opt.accumulators = [np.array(a, dtype=p.data.dtype) for a, p in zip(accs, opt.params)]


def _truncate_log(path: Path, rows: int) -> None:
    if not path.exists():
        return
    lines = path.read_bytes().splitlines(keepends=True)
    synth.atomic_write(path, b"".join(lines[:1 + rows]))


# --------------------------------------------------------------------------
# GAN training


@dataclass
class GanRun:
    trainer: GanTrainer
    reports: list[GanBatchReport]
    checkpoint_path: Path
    aborted: bool = False


def sample_grid(gen: Generator, cfg: ExperimentConfig, n: int = 16) -> np.ndarray:
    """Fixed-scene sample grid (uint8, (3, H*rows, W*cols)); does not touch training streams."""
    batch = sample_batch(stream(cfg.run.seed, "samples"), n, cfg.scene_sampling())
    mode = gen.training
    gen.eval()
    with no_grad():
        imgs = synth.from_model_range(gen(batch).data)
    gen.train(mode)
    cols = int(math.ceil(math.sqrt(n)))
    rows = int(math.ceil(n / cols))
    c, h, w = imgs.shape[1:]
    grid = np.zeros((c, rows * h, cols * w), dtype=np.uint8)
    for i, img in enumerate(imgs):
        r, q = divmod(i, cols)
        grid[:, r * h:(r + 1) * h, q * w:(q + 1) * w] = img
    return grid


def train_gan(cfg: ExperimentConfig, out_dir: Path | str, real: np.ndarray, resume: Path | str | None = None,
              stop_after: int | None = None,
              progress: Callable[[GanBatchReport, GanTrainer], None] | None = None) -> GanRun:
    """Adversarial training on ``real`` (N, 3, H, W) for ``cfg.gan.iterations`` steps.

    Writes ``gan_log.csv``, ``gan.ckpt`` (latest) and ``samples_<step>.png``
    under ``out_dir``.  ``stop_after`` ends the run early at that step, as an
    interruption would.  A numeric abort that exhausts the retry budget
    leaves the checkpoint of the last good state and re-raises.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    real = np.asarray(real, dtype=cfg.dtype)
    if real.ndim != 4 or real.shape[1:] != (3, cfg.resolution, cfg.resolution):
        raise ConfigError(f"real images have shape {real.shape[1:]}, model expects (3, {cfg.resolution}, "
                          f"{cfg.resolution})")
    seed = cfg.run.seed
    ckpt = out / "gan.ckpt"
    log = out / "gan_log.csv"
    sampling = cfg.scene_sampling()
    with default_dtype(cfg.dtype):
        if resume is not None:
            b = load_bundle(resume, cfg, kind="gan")
            gen, disc = b.gen, b.disc
            step = b.step
            rng_gan = _restore_rng(stream(seed, "gan"), b.rng_state["gan"])
            rng_data = _restore_rng(stream(seed, "data"), b.rng_state["data"])
            _truncate_log(log, step)
        else:
            gen, disc, _ = build_networks(cfg)
            b, step = None, 0
            rng_gan, rng_data = stream(seed, "gan"), stream(seed, "data")
            if log.exists():
                log.unlink()
        trainer = GanTrainer(gen, disc, cfg.gan_config(), lambda r, n: sample_batch(r, n, sampling), rng_gan,
                             step_count=step, log_path=log)
        if b is not None:
            _restore_optimizer(trainer.opt_g, b.optim.get("g"))
            _restore_optimizer(trainer.opt_d, b.optim.get("d"))
            trainer.consecutive_aborts = b.extra.get("consecutive_aborts", 0)

        def save():
            Bundle("gan", cfg, gen, disc, None, trainer.step_count,
                   {"g": trainer.opt_g.accumulators, "d": trainer.opt_d.accumulators},
                   {"gan": rng_gan.bit_generator.state, "data": rng_data.bit_generator.state},
                   {"consecutive_aborts": trainer.consecutive_aborts}).save(ckpt)

        save()
        reports: list[GanBatchReport] = []
        end = cfg.gan.iterations if stop_after is None else min(stop_after, cfg.gan.iterations)
        try:
            while trainer.step_count < end:
                idx = rng_data.integers(0, len(real), cfg.gan.batch_size)
                report = trainer.step(real[idx])
                reports.append(report)
                if progress is not None:
                    progress(report, trainer)
                if trainer.step_count % cfg.gan.checkpoint_every == 0 or trainer.step_count == end:
                    save()
                    synth.write_png(out / f"samples_{trainer.step_count}.png", sample_grid(gen, cfg))
        except Exception:
            save()  # the trainer has already rolled back to the last good state
            raise
    return GanRun(trainer, reports, ckpt)


# --------------------------------------------------------------------------
# inverter training


@dataclass
class InverterRun:
    trainer: InverterTrainer
    reports: list[InverterReport]
    checkpoint_path: Path


def train_inverter(cfg: ExperimentConfig, out_dir: Path | str, checkpoint_path: Path | str,
                   stop_after: int | None = None,
                   progress: Callable[[InverterReport, InverterTrainer], None] | None = None) -> InverterRun:
    """Inverter training against the frozen G and D of ``checkpoint_path``.

    ``checkpoint_path`` is either a GAN checkpoint (fresh start) or an
    inverter checkpoint (resume).  The model sections must match ``cfg``;
    this is checked before any step.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    seed = cfg.run.seed
    ckpt = out / "inverter.ckpt"
    log = out / "inverter_log.csv"
    sampling = cfg.scene_sampling()
    src = load_bundle(checkpoint_path, cfg)
    with default_dtype(cfg.dtype):
        gen, disc = src.gen, src.disc
        if src.kind == "inverter":
            inv, step = src.inverter, src.step
            rng = _restore_rng(stream(seed, "inverter"), src.rng_state["inverter"])
            gan_digest = src.extra["gan_digest"]
            _truncate_log(log, step)
        else:
            inv = cfg.inverter_model(stream(seed, "inv_init"))
            step, rng = 0, stream(seed, "inverter")
            gan_digest = param_hash(gen)[:16] + param_hash(disc)[:16]
            if log.exists():
                log.unlink()
        trainer = InverterTrainer(inv, gen, disc, cfg.inverter_config(), lambda r, n: sample_batch(r, n, sampling),
                                  rng, step_count=step, log_path=log)
        if src.kind == "inverter":
            _restore_optimizer(trainer.opt, src.optim.get("inv"))

        def save():
            Bundle("inverter", cfg, gen, disc, inv, trainer.step_count, {"inv": trainer.opt.accumulators},
                   {"inverter": rng.bit_generator.state}, {"gan_digest": gan_digest}).save(ckpt)

        save()
        reports = []
        end = cfg.inverter.iterations if stop_after is None else min(stop_after, cfg.inverter.iterations)
        while trainer.step_count < end:
            report = trainer.step()
            reports.append(report)
            if progress is not None:
                progress(report, trainer)
            if trainer.step_count % cfg.inverter.checkpoint_every == 0 or trainer.step_count == end:
                save()
    return InverterRun(trainer, reports, ckpt)


# --------------------------------------------------------------------------
# evaluation


def _chunks(n: int, size: int = CHUNK):
    for i in range(0, n, size):
        yield slice(i, min(i + size, n))


def generate(gen: Generator, batch: SceneBatch) -> tuple[np.ndarray, np.ndarray]:
    """(images, object alpha) for a scene batch, chunked, eval mode, no rng."""
    gen.eval()
    imgs, alphas = [], []
    with no_grad():
        for sl in _chunks(batch.batch_size):
            out = gen.render(batch.slice(sl))
            imgs.append(out.image.data)
            alphas.append(out.object_alpha.data)
    return np.concatenate(imgs), np.concatenate(alphas)


def encode(inv: Inverter, images: np.ndarray) -> PredictedCodes:
    inv.eval()
    parts = []
    with no_grad():
        for sl in _chunks(len(images)):
            parts.append(inv(images[sl]))
    return PredictedCodes(*(Tensor(np.concatenate([getattr(p, k).data for p in parts]))
                            for k in ("obj_shape", "obj_app", "bg_shape", "bg_app")))


def canonical_scenes(cfg: ExperimentConfig, codes: PredictedCodes, poses: list[CameraPose]) -> SceneBatch:
    """Scenes for inverted real images: one per image, canonical object transform."""
    t = canonical_object(cfg)
    base = _scene(codes, 0, [t], poses, cfg.scene.background_scale)
    return base.with_codes([codes.obj_shape], [codes.obj_app], codes.bg_shape, codes.bg_app)


def reconstruction_stats(gen: Generator, inv: Inverter, batch: SceneBatch) -> dict:
    """Invert generated images of ``batch`` and re-render them with the source transforms and poses."""
    src, _ = generate(gen, batch)
    codes = encode(inv, src)
    rec, _ = generate(gen, batch.with_codes([codes.obj_shape], [codes.obj_app], codes.bg_shape, codes.bg_app))
    s = ssim_per_image(src, rec)
    p = psnr(src, rec)
    return {
        "ssim": s, "psnr": np.atleast_1d(p), "latent_l1": float(latent_l1(source_codes(batch), codes).data),
        "source": src, "reconstruction": rec,
    }


def pearson(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.ravel(a).astype(np.float64), np.ravel(b).astype(np.float64)
    a, b = a - a.mean(), b - b.mean()
    den = np.sqrt((a * a).sum() * (b * b).sum())
    return float((a * b).sum() / den) if den > 0 else 0.0


def evaluate(bundle: Bundle, manifest: synth.DatasetManifest, cfg: ExperimentConfig | None = None) -> dict:
    """JSON-ready report with exactly the keys of :data:`EVAL_KEYS`."""
    cfg = cfg or bundle.cfg
    if bundle.inverter is None:
        raise ConfigError("evaluation needs an inverter checkpoint")
    gen, inv = bundle.gen, bundle.inverter
    n = cfg.eval.n_images
    seed = cfg.run.seed
    rng = stream(seed, "eval")
    sampling = cfg.scene_sampling()
    embedder = default_embedder(seed)
    with default_dtype(bundle.cfg.dtype):
        records = manifest.split("test")[:n]
        if len(records) < 2:
            raise ConfigError("the test split needs at least two images")
        real = manifest.images("test")[:n]
        fake_a, _ = generate(gen, sample_batch(rng, n, sampling))
        fake_b, _ = generate(gen, sample_batch(rng, n, sampling))
        codes = encode(inv, real)
        poses = [r.params.pose for r in records]
        rec_real, alpha_real = generate(gen, canonical_scenes(cfg, codes, poses))
        trained = {r.params.label for r in manifest.split("train")} or {"face"}
        other = sorted(set(synth.PRIORS) - trained) or sorted(synth.PRIORS)
        cross = synth.render_class(rng, other[0], n, cfg.resolution)
        held = sample_batch(rng, n, sampling)
        stats = reconstruction_stats(gen, inv, held)
        shuffled = held.with_codes(*_random_codes(rng, n, cfg.model.latent_dim, held))
        rand_rec, _ = generate(gen, shuffled)
        factor = cfg.resolution // alpha_real.shape[-1]
        masks = np.stack([synth.render_synthetic(r.params, cfg.resolution)[1] for r in records])
        up = np.repeat(np.repeat(alpha_real, factor, axis=-2), factor, axis=-1)

        ref = collect_stats(embedder, real)
        report = {
            "config_digest": cfg.digest(),
            "seed": seed,
            "n_images": len(real),
            "fid_unconditional": frechet_distance(collect_stats(embedder, fake_a), ref),
            "fid_conditional": frechet_distance(collect_stats(embedder, rec_real), ref),
            "fid_self": fid_substitute(embedder, fake_a, fake_b),
            "fid_cross_class": fid_substitute(embedder, fake_a, cross),
            "recon_ssim_mean": float(stats["ssim"].mean()),
            "recon_ssim_std": float(stats["ssim"].std()),
            "recon_psnr_mean": float(stats["psnr"].mean()),
            "recon_psnr_std": float(stats["psnr"].std()),
            "random_code_ssim_mean": float(ssim_per_image(stats["source"], rand_rec).mean()),
            "latent_l1": stats["latent_l1"],
            "mask_alpha_pearson": pearson(up, masks),
        }
    assert tuple(report) == EVAL_KEYS
    return {k: (float(v) if isinstance(v, (float, np.floating)) else v) for k, v in report.items()}


def _random_codes(rng: np.random.Generator, n: int, dim: int, like: SceneBatch):
    def draw():
        return Tensor(rng.standard_normal((n, dim)))

    return [draw() for _ in like.obj_shape], [draw() for _ in like.obj_app], draw(), draw()


def write_json(path: Path | str, obj: dict) -> None:
    synth.atomic_write(path, json.dumps(obj, indent=2, sort_keys=False) + "\n")


def read_log(path: Path | str) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def centroid_x(alpha: np.ndarray, resolution: int) -> float:
    """Alpha centroid x in image pixels, for an alpha map at any lower resolution."""
    return alpha_centroid(alpha)[0] * resolution / alpha.shape[-1]
