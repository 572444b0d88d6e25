"""Command line entry point: ``fieldinv <command> [options]``.

Exit codes: 0 success, 2 configuration or argument error, 3 numeric abort,
4 I/O error (including missing or corrupt checkpoints).
"""

from __future__ import annotations

import argparse
import contextlib
import logging
import sys
from pathlib import Path

import numpy as np

from . import harness, synth
from .config import ConfigError, ExperimentConfig
from .inverter import compose_two_objects, style_mix, zero_shot_invert
from .scene import AffineTransform, CameraPose
from .tensor import NumericError, ShapeError, default_dtype
from .tensor.checkpoint import CheckpointError

log = logging.getLogger("fieldinv")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4


def _threads(n: int | None):
    if n is None:
        return contextlib.nullcontext()
    if n < 1:
        raise ConfigError("--threads must be >= 1")
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def _config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config)
    if args.seed is not None:
        cfg = cfg.replace(run={"seed": args.seed})
    return cfg


def _bundle_config(args, bundle: harness.Bundle) -> ExperimentConfig:
    """The checkpoint's own config unless ``--config`` is given (then dims must agree)."""
    cfg = _config(args) if args.config else bundle.cfg
    if cfg.model_digest() != bundle.cfg.model_digest():
        raise ConfigError("--config model section does not match the checkpoint")
    if args.seed is not None:
        cfg = cfg.replace(run={"seed": args.seed})
    return cfg


def _require(args, name: str):
    value = getattr(args, name)
    if value is None:
        raise ConfigError(f"--{name.replace('_', '-')} is required for {args.command}")
    return value


def _read_image(path: str, resolution: int) -> np.ndarray:
    img = synth.read_png(path)
    if img.shape != (3, resolution, resolution):
        raise ConfigError(f"{path}: image is {img.shape[2]}x{img.shape[1]}, model expects {resolution}x{resolution}")
    return synth.to_model_range(img)


def _transform(args, cfg: ExperimentConfig) -> AffineTransform:
    if args.scale is not None and args.scale <= 0:
        raise ConfigError("--scale must be positive")
    return harness.canonical_object(cfg, args.scale, args.translation)


def _transform_dict(args, cfg: ExperimentConfig) -> dict:
    t = _transform(args, cfg)
    return {"scale": t.scale.tolist(), "translation": t.translation.tolist()}


def _pose_dict(p: CameraPose) -> dict:
    return {"azimuth": float(p.azimuth), "elevation": float(p.elevation), "radius": float(p.radius)}


def _write_outputs(out: Path, cfg: ExperimentConfig, command: str, images: dict[str, np.ndarray], **info) -> dict:
    out.mkdir(parents=True, exist_ok=True)
    for name, img in images.items():
        synth.write_png(out / name, synth.from_model_range(img))
    manifest = {"command": command, "config_digest": cfg.digest(), "model_digest": cfg.model_digest(),
                "files": list(images), **info}
    harness.write_json(out / "manifest.json", manifest)
    return manifest


# --------------------------------------------------------------------------
# commands


def cmd_gen_data(args) -> None:
    cfg = _config(args)
    root = Path(args.out or cfg.data.root)
    manifest = synth.build_dataset(cfg.dataset_config(), harness.stream(cfg.run.seed, "data"), root,
                                   workers=args.threads or 1)
    log.info("wrote %d images to %s", len(manifest.records), root)


def _load_real(cfg: ExperimentConfig, data: str | None) -> np.ndarray:
    manifest = synth.DatasetManifest.load(data or cfg.data.root)
    if manifest.resolution != cfg.resolution:
        raise ConfigError(f"dataset resolution {manifest.resolution} != model resolution {cfg.resolution}")
    return manifest.images("train")


def cmd_train_gan(args) -> None:
    cfg = _config(args)
    real = _load_real(cfg, args.data)
    out = Path(args.out or "runs/gan")

    def progress(r, _trainer):
        if r.step % 50 == 0 or r.aborted:
            log.info("gan step %d d=%.4f g=%.4f r1=%.4g real=%.3f fake=%.3f%s", r.step, r.d_loss, r.g_loss,
                     r.r1_penalty, r.d_real_mean, r.d_fake_mean, " ABORTED" if r.aborted else "")

    run = harness.train_gan(cfg, out, real, resume=args.checkpoint, progress=progress)
    log.info("gan checkpoint %s at step %d", run.checkpoint_path, run.trainer.step_count)


def cmd_train_inverter(args) -> None:
    cfg = _config(args)
    ckpt = _require(args, "checkpoint")
    out = Path(args.out or "runs/inverter")

    def progress(r, _trainer):
        if r.step % 50 == 0:
            log.info("inverter step %d total=%.4f latent=%.4f reconst=%.4f gan=%.4f percept=%.4f", r.step, r.total,
                     r.latent, r.reconst, r.gan, r.percept)

    run = harness.train_inverter(cfg, out, ckpt, progress=progress)
    log.info("inverter checkpoint %s at step %d", run.checkpoint_path, run.trainer.step_count)


def _inference_setup(args):
    bundle = harness.load_bundle(_require(args, "checkpoint"), kind="inverter")
    cfg = _bundle_config(args, bundle)
    return bundle, cfg, Path(args.out or "out")


def cmd_invert(args) -> None:
    bundle, cfg, out = _inference_setup(args)
    with default_dtype(bundle.cfg.dtype):
        img = _read_image(_require(args, "image"), cfg.resolution)
        pose = CameraPose(args.azimuth, cfg.scene.elevation, cfg.scene.radius)
        views = zero_shot_invert(bundle.inverter, bundle.gen, img, [pose], _transform(args, cfg),
                                 cfg.scene.background_scale)
    codes = {k: v.tolist() for k, v in zip(("obj_shape", "obj_app", "bg_shape", "bg_app"),
                                           (t.data[0] for t in (views.codes.obj_shape, views.codes.obj_app,
                                                                views.codes.bg_shape, views.codes.bg_app)))}
    _write_outputs(out, cfg, "invert", {"reconstruction.png": views.images[0]}, input=args.image,
                   code_digest=views.codes.digest(), poses=[_pose_dict(pose)], transform=_transform_dict(args, cfg),
                   codes=codes, encoder_calls=bundle.inverter.forward_calls)


def _requested_poses(args, cfg) -> list[CameraPose]:
    if args.poses:
        return [CameraPose(a, cfg.scene.elevation, cfg.scene.radius) for a in args.poses]
    if args.count < 1:
        raise ConfigError("--count must be >= 1")
    if args.span <= 0:
        raise ConfigError("--span must be positive")
    return harness.sweep_poses(cfg, args.count, args.start, args.span)


def cmd_render_views(args) -> None:
    bundle, cfg, out = _inference_setup(args)
    poses = _requested_poses(args, cfg)
    with default_dtype(bundle.cfg.dtype):
        img = _read_image(_require(args, "image"), cfg.resolution)
        views = zero_shot_invert(bundle.inverter, bundle.gen, img, poses, _transform(args, cfg),
                                 cfg.scene.background_scale)
    images = {f"view_{i:03d}.png": v for i, v in enumerate(views.images)}
    _write_outputs(out, cfg, "render-views", images, input=args.image, code_digest=views.codes.digest(),
                   poses=[_pose_dict(p) for p in poses], transform=_transform_dict(args, cfg),
                   encoder_calls=bundle.inverter.forward_calls)


def cmd_style_mix(args) -> None:
    bundle, cfg, out = _inference_setup(args)
    with default_dtype(bundle.cfg.dtype):
        a = _read_image(_require(args, "image_a"), cfg.resolution)
        b = _read_image(_require(args, "image_b"), cfg.resolution)
        pose = CameraPose(args.azimuth, cfg.scene.elevation, cfg.scene.radius)
        res = style_mix(bundle.inverter, bundle.gen, a, b, pose, _transform(args, cfg), cfg.scene.background_scale)
    _write_outputs(out, cfg, "style-mix", {"style_mix.png": res.image.data[0]}, poses=[_pose_dict(pose)],
                   shape_source=args.image_a, appearance_source=args.image_b, transform=_transform_dict(args, cfg))


def cmd_compose(args) -> None:
    bundle, cfg, out = _inference_setup(args)
    if args.offset < 0:
        raise ConfigError("--offset must be >= 0")
    with default_dtype(bundle.cfg.dtype):
        a = _read_image(_require(args, "image_a"), cfg.resolution)
        b = _read_image(_require(args, "image_b"), cfg.resolution)
        # unit boxes of half-width offset/2 leave a gap of one offset between the objects
        scale = args.scale if args.scale is not None else args.offset / 2
        if scale <= 0:
            raise ConfigError("--scale must be positive")
        ta = AffineTransform(np.full(3, scale), [-args.offset, 0.0, 0.0])
        tb = AffineTransform(np.full(3, scale), [args.offset, 0.0, 0.0])
        pose = CameraPose(args.azimuth, cfg.scene.elevation, cfg.scene.radius)
        res = compose_two_objects(bundle.inverter, bundle.gen, a, b, ta, tb, pose, cfg.scene.background_scale)
    transforms = [{"scale": float(scale), "translation": t.translation.tolist()} for t in (ta, tb)]
    _write_outputs(out, cfg, "compose", {"compose.png": res.image.data[0]}, poses=[_pose_dict(pose)],
                   transforms=transforms)


def cmd_eval(args) -> None:
    bundle = harness.load_bundle(_require(args, "checkpoint"), kind="inverter")
    cfg = _bundle_config(args, bundle)
    manifest = synth.DatasetManifest.load(args.data or cfg.data.root)
    if manifest.resolution != cfg.resolution:
        raise ConfigError(f"dataset resolution {manifest.resolution} != model resolution {cfg.resolution}")
    report = harness.evaluate(bundle, manifest, cfg)
    out = Path(args.out or "eval.json")
    harness.write_json(out, report)
    log.info("eval report written to %s", out)


COMMANDS = {
    "gen-data": (cmd_gen_data, "render the synthetic dataset"),
    "train-gan": (cmd_train_gan, "adversarial training of generator and discriminator"),
    "train-inverter": (cmd_train_inverter, "train the inverter against a frozen GAN checkpoint"),
    "invert": (cmd_invert, "zero-shot inversion of one image"),
    "render-views": (cmd_render_views, "invert one image and render an azimuth sweep"),
    "style-mix": (cmd_style_mix, "shape from one image, appearance from another"),
    "compose": (cmd_compose, "two inverted objects in one scene"),
    "eval": (cmd_eval, "FID-substitute and reconstruction report as JSON"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fieldinv", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="INI config file (defaults apply to missing keys)")
        p.add_argument("--seed", type=int, help="override run.seed")
        p.add_argument("--out", help="output directory (report file for eval)")
        p.add_argument("--checkpoint", help="checkpoint to resume from or to load")
        p.add_argument("--threads", type=int, help="BLAS threads (worker processes for gen-data)")
        p.add_argument("-v", "--verbose", action="store_true")
        if name in ("train-gan", "eval"):
            p.add_argument("--data", help="dataset root (default data.root)")
        if name in ("invert", "render-views"):
            p.add_argument("--image", help="input PNG")
        if name in ("style-mix", "compose"):
            p.add_argument("--image-a", help="shape / first object source PNG")
            p.add_argument("--image-b", help="appearance / second object source PNG")
        if name in ("invert", "style-mix", "compose"):
            p.add_argument("--azimuth", type=float, default=0.0, help="camera azimuth in radians")
        if name in ("invert", "render-views", "style-mix", "compose"):
            p.add_argument("--scale", type=float,
                           help="object scale (default scene.canonical_scale; offset/2 for compose)")
        if name in ("invert", "render-views", "style-mix"):
            p.add_argument("--translation", type=float, nargs=3, default=(0.0, 0.0, 0.0), metavar=("X", "Y", "Z"),
                           help="object translation")
        if name == "render-views":
            p.add_argument("--count", type=int, default=8, help="number of views")
            p.add_argument("--start", type=float, default=0.0, help="azimuth of the first view (radians)")
            p.add_argument("--span", type=float, default=2 * np.pi, help="azimuth range covered (radians)")
            p.add_argument("--poses", type=float, nargs="+", help="explicit azimuths (radians)")
        if name == "compose":
            p.add_argument("--offset", type=float, default=0.7, help="objects at x = -offset and +offset")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s",
                        stream=sys.stderr)
    func = COMMANDS[args.command][0]
    try:
        with _threads(args.threads if args.command != "gen-data" else None):
            func(args)
    except NumericError as e:
        log.error("numeric abort: %s", e)
        return EXIT_NUMERIC
    except (OSError, CheckpointError) as e:
        log.error("%s", e)
        return EXIT_IO
    except (ConfigError, ShapeError, ValueError) as e:
        log.error("%s", e)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
