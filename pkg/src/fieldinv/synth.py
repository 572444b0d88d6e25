"""Procedural dataset: shaded primitives over gradient backgrounds.

Every image is an analytic ray cast of one primitive (ellipsoid or box),
lit by a fixed world-space directional light, so scene parameters, masks
and poses are known exactly.  Images on disk are 8-bit PNG; in memory they
are float64 in [0, 1] with shape (3, H, W).
"""

from __future__ import annotations

import csv
import io
import os
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from .scene import AffineTransform, CameraPose, rotation_y
from .volume import generate_rays

MANIFEST_VERSION = "fieldinv-synth-manifest v1"
MANIFEST_COLUMNS = (
    "split", "index", "path", "label", "kind", "axes", "color", "shading",
    "scale", "translation", "rotation", "azimuth", "elevation", "radius", "fov",
    "bg_top", "bg_bottom",
)
LIGHT = np.array([0.4, 0.8, 0.45]) / np.linalg.norm([0.4, 0.8, 0.45])
KINDS = ("ellipsoid", "box")


@dataclass
class SyntheticSceneParams:
    kind: str
    axes: np.ndarray  # semi-axis lengths in the local frame
    color: np.ndarray  # base albedo, RGB in [0, 1]
    shading: float  # 0 = flat colour, 1 = pure Lambertian
    transform: AffineTransform
    pose: CameraPose
    bg_top: np.ndarray
    bg_bottom: np.ndarray
    label: str = ""

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown primitive {self.kind!r}")
        self.axes = np.asarray(self.axes, dtype=np.float64).reshape(3)
        self.color = np.asarray(self.color, dtype=np.float64).reshape(3)
        self.bg_top = np.asarray(self.bg_top, dtype=np.float64).reshape(3)
        self.bg_bottom = np.asarray(self.bg_bottom, dtype=np.float64).reshape(3)
        self.shading = float(self.shading)
        if np.any(self.axes <= 0):
            raise ValueError("axes must be positive")
        for name in ("color", "bg_top", "bg_bottom"):
            v = getattr(self, name)
            if np.any(v < 0) or np.any(v > 1):
                raise ValueError(f"{name} must lie in [0, 1]")
        if not 0 <= self.shading <= 1:
            raise ValueError("shading must lie in [0, 1]")
        self.transform.validate()


# --------------------------------------------------------------------------
# ray casting


def _intersect_ellipsoid(o: np.ndarray, d: np.ndarray, axes: np.ndarray):
    o, d = o / axes, d / axes
    a = np.sum(d * d, -1)
    b = 2 * np.sum(o * d, -1)
    c = np.sum(o * o, -1) - 1
    disc = b * b - 4 * a * c
    hit = disc >= 0
    root = np.sqrt(np.where(hit, disc, 0.0))
    t = (-b - root) / (2 * a)
    p = o + t[:, None] * d
    normal = p / axes  # gradient of |x/axes|^2 in local coordinates
    return hit, t, normal


def _intersect_box(o: np.ndarray, d: np.ndarray, axes: np.ndarray):
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        t0 = (-axes - o) * inv
        t1 = (axes - o) * inv
    t_lo = np.fmin(t0, t1)
    t_hi = np.fmax(t0, t1)
    t_near = np.max(t_lo, -1)
    t_far = np.min(t_hi, -1)
    hit = t_near <= t_far
    face = np.argmax(t_lo, -1)
    normal = np.zeros_like(o)
    rows = np.arange(len(o))
    normal[rows, face] = -np.sign(d[rows, face])
    return hit, t_near, normal


def render_synthetic(params: SyntheticSceneParams, resolution: int = 32) -> tuple[np.ndarray, np.ndarray]:
    """Returns (image (3, H, W) in [0, 1], mask (H, W) bool)."""
    rays = generate_rays(params.pose, resolution)
    tr = params.transform
    o = tr.inverse(rays.origins)
    d = (rays.directions @ tr.rotation) / tr.scale  # same ray parameter t as in world space
    cast = _intersect_ellipsoid if params.kind == "ellipsoid" else _intersect_box
    hit, t, n_local = cast(o, d, params.axes)
    hit &= t > 0
    n_world = (n_local / tr.scale) @ tr.rotation.T
    n_world /= np.maximum(np.linalg.norm(n_world, axis=-1, keepdims=True), 1e-12)
    lambert = np.clip(n_world @ LIGHT, 0.0, 1.0)
    shade = (1 - params.shading) + params.shading * lambert
    fg = params.color * shade[:, None]

    rows = (np.arange(resolution) + 0.5) / resolution
    bg = params.bg_top + rows[:, None] * (params.bg_bottom - params.bg_top)
    bg = np.broadcast_to(bg[:, None, :], (resolution, resolution, 3)).reshape(-1, 3)
    rgb = np.where(hit[:, None], fg, bg)
    img = rgb.reshape(resolution, resolution, 3).transpose(2, 0, 1)
    return np.clip(img, 0.0, 1.0), hit.reshape(resolution, resolution)


# --------------------------------------------------------------------------
# class priors


@dataclass(frozen=True)
class ScenePrior:
    """Uniform bounds for every sampled parameter of one scene class."""

    kind: str
    axes: tuple
    color: tuple
    shading: tuple
    translation: tuple
    rotation: tuple
    azimuth: tuple
    bg_top: tuple
    bg_bottom: tuple
    elevation: float = 0.0

    def sample(self, rng: np.random.Generator, label: str) -> SyntheticSceneParams:
        def box(bounds):
            return np.array([rng.uniform(lo, hi) for lo, hi in bounds])

        axes = box(self.axes)
        color = box(self.color)
        shading = rng.uniform(*self.shading)
        t = box(self.translation)
        rot = rotation_y(rng.uniform(*self.rotation))
        az = float(rng.uniform(*self.azimuth))
        top, bottom = box(self.bg_top), box(self.bg_bottom)
        return SyntheticSceneParams(self.kind, axes, color, shading, AffineTransform(np.ones(3), t, rot),
                                    CameraPose(az, self.elevation), top, bottom, label)

    def contains(self, p: SyntheticSceneParams) -> dict[str, bool]:
        """Per parameter group: does ``p`` fall inside these bounds."""

        def inside(v, bounds):
            return all(lo <= x <= hi for x, (lo, hi) in zip(np.atleast_1d(v), bounds))

        return {
            "axes": inside(p.axes, self.axes),
            "color": inside(p.color, self.color),
            "bg_top": inside(p.bg_top, self.bg_top),
            "bg_bottom": inside(p.bg_bottom, self.bg_bottom),
        }


_DARK = ((0.05, 0.35),) * 3
_LIGHT_BG = ((0.6, 0.9),) * 3

PRIORS: dict[str, ScenePrior] = {
    # single centred ellipsoid, frontal hemisphere of views
    "face": ScenePrior(
        kind="ellipsoid",
        axes=((0.45, 0.6), (0.6, 0.8), (0.45, 0.6)),
        color=((0.6, 0.95), (0.35, 0.7), (0.25, 0.5)),
        shading=(0.5, 0.9),
        translation=((-0.1, 0.1), (-0.1, 0.1), (-0.1, 0.1)),
        rotation=(-np.pi / 12, np.pi / 12),
        azimuth=(-np.pi / 4, np.pi / 4),
        bg_top=_DARK,
        bg_bottom=_LIGHT_BG,
    ),
    # elongated box, any heading
    "car": ScenePrior(
        kind="box",
        axes=((0.75, 0.95), (0.25, 0.35), (0.35, 0.45)),
        color=((0.1, 0.9), (0.1, 0.9), (0.1, 0.9)),
        shading=(0.6, 0.95),
        translation=((-0.1, 0.1), (-0.25, -0.15), (-0.1, 0.1)),
        rotation=(-np.pi, np.pi),
        azimuth=(0.0, 2 * np.pi),
        bg_top=_LIGHT_BG,
        bg_bottom=_DARK,
    ),
}

# out-of-domain variants: shape, colour and background bounds disjoint from training
OOD_PRIORS: dict[str, ScenePrior] = {
    "face": ScenePrior(
        kind="ellipsoid",
        axes=((0.62, 0.72), (0.82, 0.95), (0.62, 0.72)),
        color=((0.1, 0.5), (0.75, 0.95), (0.55, 0.95)),
        shading=(0.5, 0.9),
        translation=((-0.1, 0.1), (-0.1, 0.1), (-0.1, 0.1)),
        rotation=(-np.pi / 12, np.pi / 12),
        azimuth=(-np.pi / 4, np.pi / 4),
        bg_top=((0.4, 0.55),) * 3,
        bg_bottom=((0.92, 1.0),) * 3,
    ),
    "car": ScenePrior(
        kind="box",
        axes=((0.97, 1.1), (0.38, 0.45), (0.47, 0.55)),
        color=((0.92, 1.0), (0.0, 0.08), (0.92, 1.0)),
        shading=(0.6, 0.95),
        translation=((-0.1, 0.1), (-0.25, -0.15), (-0.1, 0.1)),
        rotation=(-np.pi, np.pi),
        azimuth=(0.0, 2 * np.pi),
        bg_top=((0.92, 1.0),) * 3,
        bg_bottom=((0.4, 0.55),) * 3,
    ),
}


def sample_params(rng: np.random.Generator, label: str, ood: bool = False) -> SyntheticSceneParams:
    priors = OOD_PRIORS if ood else PRIORS
    if label not in priors:
        raise ValueError(f"unknown class {label!r}; choose from {sorted(priors)}")
    return priors[label].sample(rng, label)


def render_class(rng: np.random.Generator, label: str, n: int, resolution: int = 32, ood: bool = False):
    """``n`` fresh images of one class, in the model range [-1, 1], shape (n, 3, H, W)."""
    imgs = [render_synthetic(sample_params(rng, label, ood), resolution)[0] for _ in range(n)]
    return to_model_range(quantize(np.stack(imgs)))


# --------------------------------------------------------------------------
# 8-bit I/O


def quantize(img: np.ndarray) -> np.ndarray:
    """[0, 1] float to uint8 with round-half-up."""
    return np.floor(np.clip(img, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def to_model_range(img_u8: np.ndarray) -> np.ndarray:
    return img_u8.astype(np.float64) / 127.5 - 1.0


def from_model_range(img: np.ndarray) -> np.ndarray:
    return quantize((np.asarray(img, dtype=np.float64) + 1.0) / 2.0)


def png_bytes(img_u8: np.ndarray) -> bytes:
    """(3, H, W) uint8 to PNG bytes."""
    buf = io.BytesIO()
    Image.fromarray(np.ascontiguousarray(img_u8.transpose(1, 2, 0)), mode="RGB").save(buf, format="PNG")
    return buf.getvalue()


def atomic_write(path: Path | str, data: bytes | str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    raw = data.encode() if isinstance(data, str) else data
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(raw)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_png(path: Path | str, img_u8: np.ndarray) -> None:
    atomic_write(path, png_bytes(img_u8))


def read_png(path: Path | str) -> np.ndarray:
    """PNG file to (3, H, W) uint8."""
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB")).transpose(2, 0, 1).copy()


# --------------------------------------------------------------------------
# manifest


def _vec(v) -> str:
    return " ".join(repr(float(x)) for x in np.ravel(v))


def params_to_row(split: str, index: int, path: str, p: SyntheticSceneParams) -> list[str]:
    t, c = p.transform, p.pose
    return [split, str(index), path, p.label, p.kind, _vec(p.axes), _vec(p.color), repr(p.shading),
            _vec(t.scale), _vec(t.translation), _vec(t.rotation), repr(float(c.azimuth)),
            repr(float(c.elevation)), repr(float(c.radius)), repr(float(c.fov)), _vec(p.bg_top),
            _vec(p.bg_bottom)]


def row_to_params(row: dict) -> SyntheticSceneParams:
    def vec(key):
        return np.array([float(x) for x in row[key].split()])

    transform = AffineTransform(vec("scale"), vec("translation"), vec("rotation").reshape(3, 3))
    pose = CameraPose(float(row["azimuth"]), float(row["elevation"]), float(row["radius"]), float(row["fov"]))
    return SyntheticSceneParams(row["kind"], vec("axes"), vec("color"), float(row["shading"]), transform, pose,
                                vec("bg_top"), vec("bg_bottom"), row["label"])


@dataclass
class ManifestRecord:
    split: str
    index: int
    path: str  # relative to the dataset root
    params: SyntheticSceneParams


@dataclass
class DatasetManifest:
    root: Path
    resolution: int
    records: list[ManifestRecord] = field(default_factory=list)

    def split(self, name: str) -> list[ManifestRecord]:
        return [r for r in self.records if r.split == name]

    def to_text(self) -> str:
        buf = io.StringIO()
        buf.write(f"# {MANIFEST_VERSION} resolution={self.resolution}\n")
        w = csv.writer(buf, delimiter="\t", lineterminator="\n")
        w.writerow(MANIFEST_COLUMNS)
        for r in self.records:
            w.writerow(params_to_row(r.split, r.index, r.path, r.params))
        return buf.getvalue()

    @classmethod
    def load(cls, root: Path | str) -> "DatasetManifest":
        root = Path(root)
        lines = (root / "manifest.tsv").read_text().splitlines()
        if not lines or not lines[0].startswith(f"# {MANIFEST_VERSION}"):
            raise ValueError(f"{root / 'manifest.tsv'}: missing or unsupported version header")
        resolution = int(lines[0].split("resolution=")[1])
        reader = csv.DictReader(lines[1:], delimiter="\t")
        if tuple(reader.fieldnames or ()) != MANIFEST_COLUMNS:
            raise ValueError("manifest columns do not match this version")
        records = [ManifestRecord(r["split"], int(r["index"]), r["path"], row_to_params(r)) for r in reader]
        return cls(root, resolution, records)

    def images(self, split: str) -> np.ndarray:
        """All images of ``split`` in model range, shape (N, 3, H, W)."""
        recs = self.split(split)
        if not recs:
            raise ValueError(f"split {split!r} is empty")
        return to_model_range(np.stack([read_png(self.root / r.path) for r in recs]))


@dataclass
class DatasetConfig:
    resolution: int = 32
    counts: dict = field(default_factory=lambda: {"train": 512, "test": 128, "ood": 64})
    class_mix: dict = field(default_factory=lambda: {"face": 1.0})
    ood_splits: tuple = ("ood",)

    def validate(self) -> None:
        if self.resolution < 4:
            raise ValueError("resolution must be >= 4")
        if any(n < 0 for n in self.counts.values()):
            raise ValueError("split sizes must be non-negative")
        unknown = set(self.class_mix) - set(PRIORS)
        if unknown:
            raise ValueError(f"unknown classes {sorted(unknown)}")
        w = np.array(list(self.class_mix.values()), dtype=np.float64)
        if w.size == 0 or np.any(w < 0) or w.sum() <= 0:
            raise ValueError("class_mix needs non-negative weights with positive sum")


def _render_png(args) -> bytes:
    params, resolution = args
    return png_bytes(quantize(render_synthetic(params, resolution)[0]))


def build_dataset(cfg: DatasetConfig, rng: np.random.Generator, root: Path | str,
                  workers: int = 1) -> DatasetManifest:
    """Sample, render and write every split; the manifest is written last."""
    cfg.validate()
    root = Path(root)
    labels = list(cfg.class_mix)
    weights = np.array([cfg.class_mix[k] for k in labels], dtype=np.float64)
    weights /= weights.sum()
    manifest = DatasetManifest(root, cfg.resolution)
    for split, n in cfg.counts.items():
        ood = split in cfg.ood_splits
        for i in range(n):
            label = labels[rng.choice(len(labels), p=weights)]
            manifest.records.append(ManifestRecord(split, i, f"{split}/{i}.png", sample_params(rng, label, ood)))

    jobs = [(r.params, cfg.resolution) for r in manifest.records]
    if workers > 1:
        with ProcessPoolExecutor(workers) as ex:
            blobs = list(ex.map(_render_png, jobs, chunksize=16))
    else:
        blobs = [_render_png(j) for j in jobs]
    for rec, blob in zip(manifest.records, blobs):
        atomic_write(root / rec.path, blob)
    atomic_write(root / "manifest.tsv", manifest.to_text())
    return manifest


def verify_record(manifest: DatasetManifest, rec: ManifestRecord) -> bool:
    """Re-render from provenance and compare with the stored file byte for byte."""
    return (manifest.root / rec.path).read_bytes() == _render_png((rec.params, manifest.resolution))


def mask_centroid(mask: np.ndarray) -> tuple[float, float]:
    rows, cols = np.nonzero(mask)
    if rows.size == 0:
        raise ValueError("empty mask")
    return float(cols.mean() + 0.5), float(rows.mean() + 0.5)


def sphere_params(radius: float, translation: Sequence[float], pose: CameraPose) -> SyntheticSceneParams:
    """A flat-grey sphere on a black background; handy for geometric checks."""
    return SyntheticSceneParams("ellipsoid", np.full(3, radius), np.full(3, 0.5), 0.0,
                                AffineTransform(np.ones(3), translation), pose, np.zeros(3), np.zeros(3))
