"""Acceptance checks: one PASS/FAIL line per criterion.

Each test computes everything for its criterion, prints a verdict line and
then asserts it; the lines are repeated in the terminal summary.  Criteria
5 to 9 and 11 share one trained GAN and one trained inverter (module
fixtures), so run the file as a whole:

    pytest tests/test_acceptance.py -v

The trained-model criteria take roughly an hour on one CPU core.
"""

import time
import warnings

import numpy as np
import pytest

from conftest import tiny_generator, tiny_sampler
from fieldinv import cli, harness, synth
from fieldinv.adversarial import r1_penalty
from fieldinv.config import ExperimentConfig
from fieldinv.diagnostics import count_components
from fieldinv.field import COMPOSE_EPS, FieldSample, compose
from fieldinv.generator import sample_batch
from fieldinv.inverter import (
    canonical_transform,
    compose_two_objects,
    render_codes,
    style_mix,
    zero_shot_invert,
)
from fieldinv.metrics import GaussianStats, default_embedder, fid_substitute, frechet_distance, ssim, ssim_per_image
from fieldinv.scene import AffineTransform, CameraPose
from fieldinv.tensor import (
    Tensor,
    check_gradients,
    default_dtype,
    estimate_sigma,
    numerical_gradient,
    ops,
    param_hash,
    relative_error,
    spectral_normalize,
)
from test_tensor import CASES
from test_volume import SMOOTH_FIELDS, _quadrature

pytestmark = pytest.mark.filterwarnings("ignore::RuntimeWarning")

VERDICTS: dict[int, str] = {}

GAN_STEPS = 500
SIGMA_STEPS = 200
INV_STEPS = 2000
INV_BATCH = 8
HELD_OUT = 128


def verdict(number: int, title: str, ok: bool, detail: str) -> None:
    line = f"{'PASS' if ok else 'FAIL'} criterion {number:2d} ({title}): {detail}"
    VERDICTS[number] = line
    print(line, flush=True)
    assert ok, line


def acceptance_config(**inverter) -> ExperimentConfig:
    """A small generator (8x8 volume, two upsampling blocks, 4-dim codes) that fits the CPU time budgets."""
    return ExperimentConfig().replace(
        model={"latent_dim": 4, "hidden": 32, "volume_resolution": 8, "n_blocks": 2, "n_samples": 12},
        gan={"iterations": GAN_STEPS, "checkpoint_every": GAN_STEPS},
        inverter={"iterations": INV_STEPS, "batch_size": INV_BATCH, "checkpoint_every": INV_STEPS, **inverter},
    )


def spectral_layers(module, prefix=""):
    if getattr(module, "sn", None) is not None:
        yield prefix.rstrip("."), module
    for name, child in module.named_children():
        yield from spectral_layers(child, f"{prefix}{name}.")


def normalized_sigma(layer) -> float:
    """Power-iteration sigma of the weight as the next forward will normalise it (stored u, v)."""
    w = spectral_normalize(layer.weight, layer.sn, update=False).data
    return estimate_sigma(w.reshape(w.shape[0], -1), iters=100)


# --------------------------------------------------------------------------
# shared trained models


@pytest.fixture(scope="module")
def data_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("acceptance") / "data"
    assert cli.main(["gen-data", "--out", str(root)]) == 0
    return root


@pytest.fixture(scope="module")
def gan(data_root):
    cfg = acceptance_config()
    real = synth.DatasetManifest.load(data_root).images("train")
    sigmas, hashes = [], {}

    def watch(report, trainer):
        if report.step <= SIGMA_STEPS:
            nets = (("gen", trainer.gen), ("disc", trainer.disc))
            sigmas.append([normalized_sigma(layer) for _, net in nets for _, layer in spectral_layers(net)])
        if report.step == 100:
            hashes["step100"] = (param_hash(trainer.gen), param_hash(trainer.disc))

    start = time.perf_counter()
    run = harness.train_gan(cfg, data_root.parent / "gan", real, progress=watch)
    seconds = time.perf_counter() - start
    return {"cfg": cfg, "run": run, "seconds": seconds, "sigmas": np.array(sigmas), "hashes": hashes,
            "real": real, "out": data_root.parent / "gan"}


def held_out_batch(cfg: ExperimentConfig, n: int = HELD_OUT):
    return sample_batch(harness.stream(cfg.run.seed, "eval"), n, cfg.scene_sampling())


def run_inverter(cfg, gan_ckpt, out_dir):
    """Train an inverter from ``gan_ckpt``; returns the run, its wall time and the frozen hashes seen per step."""
    seen = set()

    def watch(report, trainer):
        seen.add((param_hash(trainer.gen), param_hash(trainer.disc)))

    start = time.perf_counter()
    run = harness.train_inverter(cfg, out_dir, gan_ckpt, progress=watch)
    return run, time.perf_counter() - start, seen


def recon_fid(cfg, gen, inv, embedder) -> float:
    with default_dtype(cfg.dtype):
        stats = harness.reconstruction_stats(gen, inv, held_out_batch(cfg))
    return fid_substitute(embedder, stats["reconstruction"], stats["source"])


@pytest.fixture(scope="module")
def inverter(gan):
    cfg = gan["cfg"]
    before = harness.load_bundle(gan["run"].checkpoint_path, cfg, kind="gan")
    frozen = (param_hash(before.gen), param_hash(before.disc))
    run, seconds, seen = run_inverter(cfg, gan["run"].checkpoint_path, gan["out"].parent / "inverter")
    bundle = harness.load_bundle(run.checkpoint_path, cfg, kind="inverter")
    with default_dtype(cfg.dtype):
        initial = cfg.inverter_model(harness.stream(cfg.run.seed, "inv_init"))
    return {"cfg": cfg, "run": run, "seconds": seconds, "bundle": bundle, "initial": initial,
            "frozen": frozen, "seen": seen}


# --------------------------------------------------------------------------
# criteria


def test_criterion_01_autodiff():
    start = time.perf_counter()
    worst_op, worst_name = 0.0, ""
    for name in sorted(CASES):
        make, fn = CASES[name]
        for seed in range(10):
            inputs = make(np.random.default_rng(seed))
            weights = Tensor(np.random.default_rng(1000 + seed).standard_normal(fn(*inputs).shape))
            err = check_gradients(lambda *xs: ops.sum(ops.mul(fn(*xs), weights)), inputs)
            if err > worst_op:
                worst_op, worst_name = err, name

    # end to end: 8x8 render of the small generator, every parameter tensor and the codes
    gen = tiny_generator(11)
    for block in gen.renderer.blocks:
        block.gain.data[:] = 0.5  # open the residual branches so their weights get gradients
    jitter = np.random.default_rng(12)
    for name, p in gen.named_parameters():
        if name.endswith("bias"):
            # zero biases put rows with all-off inputs exactly on the relu kink
            p.data += jitter.normal(0.0, 0.1, p.shape)
    gen.eval()
    batch = tiny_sampler()(np.random.default_rng(3), 2)
    probe = np.random.default_rng(4).standard_normal((2, 3, 8, 8))

    def functional():
        return ops.sum(ops.mul(gen(batch), probe))

    gen.zero_grad()
    for code in (batch.obj_shape[0], batch.bg_app):
        code.requires_grad, code.grad = True, None
    functional().backward()
    rng = np.random.default_rng(5)
    analytic, numeric = [], []
    targets = [p for p in gen.parameters()] + [batch.obj_shape[0], batch.bg_app]
    for t in targets:
        flat = rng.choice(t.size, size=min(3, t.size), replace=False)
        idx = [np.unravel_index(i, t.shape) for i in flat]
        num = numerical_gradient(lambda: float(functional().data), t.data, indices=idx)
        g = np.zeros(t.shape) if t.grad is None else t.grad
        analytic += [g[i] for i in idx]
        numeric += [num[i] for i in idx]
    e2e = relative_error(np.array(analytic), np.array(numeric))
    seconds = time.perf_counter() - start
    ok = worst_op < 1e-4 and e2e < 1e-3 and seconds < 120
    verdict(1, "autodiff", ok, f"{len(CASES)} ops x 10 seeds worst rel err {worst_op:.2e} ({worst_name}); "
                               f"generator 8x8 rel err {e2e:.2e} over {len(analytic)} entries; {seconds:.1f}s")


def test_criterion_02_quadrature():
    start = time.perf_counter()
    worst32, monotone = 0.0, True
    for name in sorted(SMOOTH_FIELDS):
        reference = _quadrature(name, 1024)
        errors = [np.max(np.abs(_quadrature(name, n) - reference)) for n in (32, 64, 128, 256)]
        worst32 = max(worst32, errors[0])
        monotone &= all(b <= a for a, b in zip(errors, errors[1:]))
    seconds = time.perf_counter() - start
    ok = worst32 < 1e-2 and monotone and seconds < 60
    verdict(2, "quadrature", ok, f"{len(SMOOTH_FIELDS)} fields, worst 32-sample Linf {worst32:.2e}, "
                                 f"non-increasing over 32..256: {monotone}; {seconds:.2f}s")


def test_criterion_03_composition():
    rng = np.random.default_rng(0)
    perm_exact, additive, identity_err, guarded = True, True, 0.0, 0
    for _ in range(20):
        k = int(rng.integers(2, 6))
        shape = (int(rng.integers(1, 5)), int(rng.integers(1, 40)))
        # multiples of 1/64 below 4: any summation order is exact, so the sum has one correct value
        sigmas = [rng.integers(0, 256, shape) / 64.0 for _ in range(k)]
        samples = [FieldSample(Tensor(sg), Tensor(rng.standard_normal(shape + (4,)))) for sg in sigmas]
        ref = compose(samples)
        out = compose([samples[i] for i in rng.permutation(k)])
        perm_exact &= np.array_equal(out.sigma.data, ref.sigma.data)
        perm_exact &= np.array_equal(out.feature.data, ref.feature.data)
        additive &= np.array_equal(ref.sigma.data, np.sum(sigmas, axis=0))

        single = FieldSample(Tensor(rng.exponential(1.0, shape) * (rng.random(shape) > 0.2)),
                             Tensor(rng.standard_normal(shape + (4,))))
        one = compose([single])
        additive &= np.array_equal(one.sigma.data, single.sigma.data)
        live = single.sigma.data >= COMPOSE_EPS
        guarded += int((~live).sum())
        identity_err = max(identity_err, np.max(np.abs(one.feature.data - single.feature.data)[live], initial=0.0))
    ok = perm_exact and additive and identity_err <= 1e-12
    verdict(3, "composition", ok, f"permutation exact: {perm_exact}; sigma additivity exact: {additive}; "
                                  f"single entity max feature change {identity_err:.1e} where sigma >= "
                                  f"eps_comp ({guarded} guarded samples)")


@pytest.mark.slow
def test_criterion_04_r1_and_spectral_norm(gan):
    images = np.random.default_rng(0).uniform(-1, 1, (4, 3, 8, 8))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        const, _ = r1_penalty(lambda x: Tensor(np.full(x.shape[0], 2.0)), images)
    total, _ = r1_penalty(lambda x: ops.sum(x, axis=(1, 2, 3)), images)
    sig = gan["sigmas"]
    in_band = sig.size > 0 and bool(np.all((sig >= 0.9) & (sig <= 1.05)))
    ok = float(const.data) == 0.0 and float(total.data) == 3 * 8 * 8 and len(sig) == SIGMA_STEPS and in_band
    verdict(4, "R1 and spectral norm", ok,
            f"R1(const D) = {float(const.data)}; R1(sum) = {float(total.data)} (pixels {3 * 8 * 8}); "
            f"{sig.shape[1] if sig.ndim == 2 else 0} normalised weights x {len(sig)} steps, "
            f"sigma in [{sig.min():.4f}, {sig.max():.4f}]")


@pytest.mark.slow
def test_criterion_05_gan_smoke(gan, tmp_path):
    reports = gan["run"].reports
    finite = all(np.isfinite([r.d_loss, r.g_loss, r.r1_penalty]).all() and not r.aborted for r in reports)
    last = reports[-100:]
    real_mean = float(np.mean([r.d_real_mean for r in last]))
    fake_mean = float(np.mean([r.d_fake_mean for r in last]))
    # rerun the first 100 steps from scratch: parameters and log must match bit for bit
    again = harness.train_gan(gan["cfg"], tmp_path, gan["real"], stop_after=100)
    same = (param_hash(again.trainer.gen), param_hash(again.trainer.disc)) == gan["hashes"]["step100"]
    log_a = (gan["out"] / "gan_log.csv").read_bytes().splitlines()[:101]
    log_b = (tmp_path / "gan_log.csv").read_bytes().splitlines()
    same &= log_a == log_b
    ok = (len(reports) == GAN_STEPS and finite and real_mean > fake_mean and same and gan["seconds"] < 900)
    verdict(5, "GAN smoke training", ok,
            f"{len(reports)} steps finite: {finite}; last-100 d_real {real_mean:.3f} vs d_fake {fake_mean:.3f}; "
            f"rerun bit-exact: {same}; {gan['seconds'] / 60:.1f} min")


@pytest.mark.slow
def test_criterion_06_latent_recovery(inverter):
    cfg, bundle = inverter["cfg"], inverter["bundle"]
    gen = bundle.gen
    with default_dtype(cfg.dtype):
        held = held_out_batch(cfg)
        before = harness.reconstruction_stats(gen, inverter["initial"], held)
        after = harness.reconstruction_stats(gen, bundle.inverter, held)
        rng = harness.stream(cfg.run.seed, "samples")
        shuffled = held.with_codes(*harness._random_codes(rng, len(after["source"]), cfg.model.latent_dim, held))
        random_rec, _ = harness.generate(gen, shuffled)
    baseline = float(ssim_per_image(after["source"], random_rec).mean())
    recon = float(after["ssim"].mean())
    drop = 1 - after["latent_l1"] / before["latent_l1"]
    ok = drop >= 0.5 and recon - baseline >= 0.15 and inverter["seconds"] < 1200
    verdict(6, "latent recovery", ok,
            f"held-out L1 {before['latent_l1']:.4f} -> {after['latent_l1']:.4f} ({drop:.0%} drop); "
            f"SSIM {recon:.3f} vs random-code {baseline:.3f} (gain {recon - baseline:+.3f}); "
            f"{INV_STEPS} steps in {inverter['seconds'] / 60:.1f} min")


@pytest.mark.slow
def test_criterion_07_ablation_ladder(gan, inverter, tmp_path):
    embedder = default_embedder(0)
    seconds = inverter["seconds"]
    fids = {}
    rungs = {
        "latent_only": {"use_reconst": False, "use_gan": False, "use_percept": False},
        "reconst": {"use_reconst": True, "use_gan": False, "use_percept": False},
        "gan": {"use_reconst": True, "use_gan": True, "use_percept": False},
    }
    for name, flags in rungs.items():
        cfg = acceptance_config(**flags)
        run, took, _ = run_inverter(cfg, gan["run"].checkpoint_path, tmp_path / name)
        seconds += took
        bundle = harness.load_bundle(run.checkpoint_path, cfg, kind="inverter")
        fids[name] = recon_fid(cfg, bundle.gen, bundle.inverter, embedder)
    full = inverter["bundle"]
    fids["full"] = recon_fid(inverter["cfg"], full.gen, full.inverter, embedder)
    values = list(fids.values())
    ordered = all(b <= a for a, b in zip(values, values[1:]))
    ok = ordered and fids["latent_only"] >= 2 * fids["full"] and seconds < 90 * 60
    verdict(7, "ablation ordering", ok,
            "FID-substitute " + ", ".join(f"{k} {v:.4f}" for k, v in fids.items())
            + f"; non-increasing: {ordered}; latent-only / full = {fids['latent_only'] / fids['full']:.2f}; "
            f"{seconds / 60:.1f} min")


@pytest.mark.slow
def test_criterion_08_controllability(inverter, data_root):
    cfg, bundle = inverter["cfg"], inverter["bundle"]
    res = cfg.resolution
    image = synth.DatasetManifest.load(data_root).images("test")[0]
    scale = 0.5 * (cfg.scene.scale_min + cfg.scene.scale_max)
    offset = np.array([0.4, 0.0, 0.0])
    poses = harness.sweep_poses(cfg, 8)
    with default_dtype(cfg.dtype):
        views = zero_shot_invert(bundle.inverter, bundle.gen, image, poses, canonical_transform(scale, offset),
                                 cfg.scene.background_scale)
    q = synth.from_model_range(views.images)
    distinct = all(not np.array_equal(q[i], q[j]) for i in range(8) for j in range(i + 1, 8))

    # centroid x against the projected object centre over each half turn
    measured = np.array([harness.centroid_x(a, res) for a in views.alpha])
    oracle = np.array([p.project(offset, res)[0, 0] for p in poses])
    hi, lo = int(np.argmax(oracle)), int(np.argmin(oracle))
    monotone = True
    for a, b in ((hi, lo), (lo, hi)):
        idx = [(a + k) % 8 for k in range((b - a) % 8 + 1)]
        step_sign = np.sign(np.diff(oracle[idx]))
        monotone &= bool(np.all(np.diff(measured[idx]) * step_sign > 0))

    # translation along +x at azimuth 0
    pose = CameraPose(0.0, cfg.scene.elevation, cfg.scene.radius)
    base, moved = np.zeros(3), np.array([0.5, 0.0, 0.0])
    with default_dtype(cfg.dtype):
        codes = harness.encode(bundle.inverter, image[None])
        a0 = render_codes(bundle.gen, codes, pose, AffineTransform(np.full(3, scale), base),
                          cfg.scene.background_scale).object_alpha.data[0]
        a1 = render_codes(bundle.gen, codes, pose, AffineTransform(np.full(3, scale), moved),
                          cfg.scene.background_scale).object_alpha.data[0]
    shift = harness.centroid_x(a1, res) - harness.centroid_x(a0, res)
    p0, p1 = pose.project(np.stack([base, moved]), res)
    predicted = p1[0] - p0[0]
    ok = distinct and monotone and abs(shift - predicted) <= 2.0
    verdict(8, "3D controllability", ok,
            f"8 views pairwise distinct: {distinct}; centroid x {np.round(measured, 2).tolist()} monotone per "
            f"half turn: {monotone}; +x shift {shift:.2f}px vs pinhole {predicted:.2f}px")


@pytest.mark.slow
def test_criterion_09_freeze_and_zero_shot(inverter, data_root):
    cfg, bundle = inverter["cfg"], inverter["bundle"]
    after = (param_hash(bundle.gen), param_hash(bundle.disc))
    log = harness.read_log(inverter["run"].checkpoint_path.parent / "inverter_log.csv")
    logged = {(row["gen_hash"], row["disc_hash"]) for row in log}
    frozen = inverter["seen"] == {inverter["frozen"]} and after == inverter["frozen"] and len(log) == INV_STEPS
    frozen &= logged == {inverter["frozen"]}

    images = synth.DatasetManifest.load(data_root).images("test")[:4]
    inv = bundle.inverter
    hashes = (param_hash(inv), param_hash(bundle.gen), param_hash(bundle.disc))
    calls = inv.forward_calls
    with default_dtype(cfg.dtype):
        for img in images:
            zero_shot_invert(inv, bundle.gen, img, [CameraPose(0.0)], canonical_transform(),
                             cfg.scene.background_scale)
    unchanged = (param_hash(inv), param_hash(bundle.gen), param_hash(bundle.disc)) == hashes
    one_pass = inv.forward_calls - calls == len(images)
    ok = frozen and unchanged and one_pass
    verdict(9, "freeze and zero-shot", ok,
            f"G/D hashes constant over {len(log)} inverter steps: {frozen}; invert left all hashes unchanged: "
            f"{unchanged}; encoder calls {inv.forward_calls - calls} for {len(images)} images")


def test_criterion_10_metric_identities():
    rng = np.random.default_rng(0)
    x = rng.uniform(-1, 1, (2, 3, 32, 32))
    s = float(ssim(x, x).data)
    stats = GaussianStats(rng.standard_normal(5), np.cov(rng.standard_normal((5, 50))), 50)
    same = frechet_distance(stats, stats)
    unit = frechet_distance(GaussianStats(np.zeros(1), np.ones((1, 1)), 1),
                            GaussianStats(np.ones(1), np.ones((1, 1)), 1))
    separations = []
    for seed in range(5):
        r = np.random.default_rng(seed)
        emb = default_embedder(seed)
        face_a, face_b = synth.render_class(r, "face", 96), synth.render_class(r, "face", 96)
        car = synth.render_class(r, "car", 96)
        separations.append((fid_substitute(emb, face_a, face_b), fid_substitute(emb, face_a, car)))
    separated = all(w < a for w, a in separations)
    ok = s == 1.0 and abs(same) <= 1e-6 and abs(unit - 1) <= 1e-6 and separated
    verdict(10, "metric identities", ok,
            f"SSIM(x,x) = {s}; FD(same) = {same:.1e}; FD(N(0,1),N(1,1)) = {unit:.8f}; "
            f"within/across class FID over 5 seeds: "
            + ", ".join(f"{w:.3f}<{a:.3f}" for w, a in separations))


@pytest.mark.slow
def test_criterion_11_style_mix_and_compose(inverter, data_root):
    cfg, bundle = inverter["cfg"], inverter["bundle"]
    inv, gen = bundle.inverter, bundle.gen
    images = synth.DatasetManifest.load(data_root).images("test")[:2]
    pose = CameraPose(0.3, cfg.scene.elevation, cfg.scene.radius)
    t = canonical_transform()
    with default_dtype(cfg.dtype):
        codes_a = harness.encode(inv, images[:1])
        plain = render_codes(gen, codes_a, pose, t, cfg.scene.background_scale)
        same = style_mix(inv, gen, images[0], images[0], pose, t, cfg.scene.background_scale)
        mixed = style_mix(inv, gen, images[0], images[1], pose, t, cfg.scene.background_scale)
        ta = AffineTransform(np.full(3, 0.4), [-0.8, 0.0, 0.0])
        tb = AffineTransform(np.full(3, 0.4), [0.8, 0.0, 0.0])
        pair = compose_two_objects(inv, gen, images[0], images[1], ta, tb, CameraPose(0.0, cfg.scene.elevation,
                                                                                      cfg.scene.radius),
                                   cfg.scene.background_scale)
    degenerate = np.array_equal(same.image.data, plain.image.data)
    alpha_same = np.array_equal(mixed.object_alpha.data, plain.object_alpha.data)
    components = count_components(pair.object_alpha.data[0])
    ok = degenerate and alpha_same and components == 2
    verdict(11, "style mix and composition", ok,
            f"style_mix(a, a) == inversion bit-exact: {degenerate}; mixed alpha == shape-source alpha: "
            f"{alpha_same}; separated pair components: {components}")
