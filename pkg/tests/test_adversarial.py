import csv
import warnings

import numpy as np
import pytest

from conftest import TINY, tiny_generator, tiny_sampler
from fieldinv.adversarial import (
    Discriminator,
    GanConfig,
    GanTrainer,
    discriminate,
    gan_losses,
    r1_penalty,
)
from fieldinv.tensor import (
    NumericError,
    ShapeError,
    Tensor,
    grad,
    numerical_gradient,
    ops,
    param_hash,
    relative_error,
)


def _disc(seed=0, res=8, base=4):
    return Discriminator(np.random.default_rng(seed), resolution=res, base_channels=base, max_channels=8)


def _images(seed, n=3, res=8):
    return np.random.default_rng(seed).uniform(-1, 1, (n, 3, res, res))


class TestDiscriminator:
    def test_zero_weights(self):
        d = _disc()
        for p in d.parameters():
            p.data[:] = 0.0
        logits = discriminate(d, _images(0))
        assert np.array_equal(logits.data, np.zeros(3))
        assert np.allclose(1 / (1 + np.exp(-logits.data)), 0.5)

    def test_batch_permutation(self):
        d = _disc().eval()
        x = _images(1, n=5)
        perm = [3, 0, 4, 1, 2]
        assert np.array_equal(discriminate(d, x[perm]).data, discriminate(d, x).data[perm])

    def test_resolution_checked(self):
        with pytest.raises(ShapeError):
            discriminate(_disc(res=8), _images(0, res=16))
        with pytest.raises(ValueError):
            Discriminator(np.random.default_rng(0), resolution=12)

    @pytest.mark.parametrize("seed", range(3))
    def test_input_gradient(self, seed):
        d = _disc(seed).eval()
        x = Tensor(_images(seed + 10, n=2), requires_grad=True)
        ops.sum(d(x)).backward()
        num = numerical_gradient(lambda: float(ops.sum(d(Tensor(x.data))).data), x.data)
        assert relative_error(x.grad, num) < 1e-3

    def test_leaky_slope(self):
        d = _disc()
        for p in d.parameters():
            p.data[:] = 0.0
        d.from_rgb.weight.data[0, 0, 1, 1] = 1.0
        x = Tensor(-np.ones((1, 3, 8, 8)))
        feat = d.from_rgb(x)
        assert np.allclose(ops.leaky_relu(feat, 0.2).data[0, 0], 0.2 * feat.data[0, 0])


class TestLosses:
    def test_zero_logits(self):
        d_loss, g_loss = gan_losses(Tensor(np.zeros(4)), Tensor(np.zeros(4)))
        assert float(d_loss.data) == pytest.approx(2 * np.log(2))
        assert float(g_loss.data) == pytest.approx(np.log(2))

    def test_limit(self):
        d_loss, _ = gan_losses(Tensor(np.full(4, 40.0)), Tensor(np.full(4, -40.0)))
        assert float(d_loss.data) < 1e-15

    def test_saturating_flag(self):
        _, g = gan_losses(Tensor(np.zeros(2)), Tensor(np.zeros(2)), saturating=True)
        assert float(g.data) == pytest.approx(-np.log(2))

    def test_convex_in_each_logit(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            a, b = rng.normal(0, 5, (2, 2))
            mid = (a + b) / 2

            def f(v):
                return float(gan_losses(Tensor(v[:1]), Tensor(v[1:]))[0].data)

            assert f(mid) <= (f(a) + f(b)) / 2 + 1e-12


class TestR1:
    def test_constant_discriminator(self):
        def const(x):
            return Tensor(np.full(x.shape[0], 2.0))

        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            pen, _ = r1_penalty(const, _images(0))
        assert float(pen.data) == 0.0

    def test_zero_weight_discriminator(self):
        d = _disc()
        for p in d.parameters():
            p.data[:] = 0.0
        pen, _ = r1_penalty(d, _images(0))
        assert float(pen.data) == 0.0

    @pytest.mark.parametrize("method", ["double_backward", "finite_difference"])
    def test_sum_discriminator(self, method):
        def total(x):
            return ops.sum(x, axis=(1, 2, 3))

        pen, _ = r1_penalty(total, _images(0, n=4), method)
        assert float(pen.data) == 3 * 8 * 8

    def test_value_matches_finite_difference_gradient(self):
        d = _disc(2).eval()
        x = _images(3, n=2)
        pen, _ = r1_penalty(d, x)
        sq = 0.0
        for i in range(len(x)):
            xi = x[i:i + 1].copy()
            g = numerical_gradient(lambda: float(d(Tensor(xi)).data[0]), xi)
            sq += np.sum(g * g)
        assert relative_error(float(pen.data), sq / len(x)) < 1e-3

    @pytest.mark.parametrize("seed", range(2))
    def test_parameter_gradient_double_backward(self, seed):
        d = _disc(seed).eval()
        x = _images(seed + 20, n=2)

        def value():
            return float(r1_penalty(d, x)[0].data)

        pen, _ = r1_penalty(d, x)
        w = d.blocks[0].conv1.weight
        (gw,) = grad(pen, [w])
        idx = [tuple(np.random.default_rng(seed).integers(0, s) for s in w.shape) for _ in range(10)]
        num = numerical_gradient(value, w.data, indices=idx)
        assert relative_error(np.array([gw.data[i] for i in idx]), np.array([num[i] for i in idx])) < 1e-3

    def test_finite_difference_fallback_agrees(self):
        d = _disc(4).eval()
        x = _images(5, n=2)
        params = d.parameters()
        exact = grad(r1_penalty(d, x)[0], params)
        approx_pen, _ = r1_penalty(d, x, "finite_difference", eps=1e-4)
        approx = grad(approx_pen, params)
        assert float(approx_pen.data) == pytest.approx(float(r1_penalty(d, x)[0].data))
        for a, b in zip(exact, approx):
            if a is None:
                continue
            assert relative_error(a.data, b.data) < 1e-2


def _trainer(seed=0, **cfg):
    rng = np.random.default_rng(seed)
    gen = tiny_generator(seed)
    disc = Discriminator(np.random.default_rng(seed + 1), resolution=TINY.image_resolution, base_channels=4,
                         max_channels=8)
    return GanTrainer(gen, disc, GanConfig(batch_size=4, **cfg), tiny_sampler(), rng)


class TestTrainer:
    def test_reports_deterministic(self):
        real = _images(0, n=4)
        runs = []
        for _ in range(2):
            t = _trainer(3)
            runs.append([t.step(real) for _ in range(3)])
        assert runs[0] == runs[1]
        assert all(np.isfinite(r.d_loss) and r.r1_penalty >= 0 for r in runs[0])

    def test_discriminator_step_touches_only_discriminator(self):
        t = _trainer(1)
        g_before = param_hash(t.gen)
        d_before = param_hash(t.disc)
        t.discriminator_step(_images(0, n=4))
        assert param_hash(t.gen) == g_before and param_hash(t.disc) != d_before

    def test_generator_step_touches_only_generator(self):
        t = _trainer(1)
        g_before = param_hash(t.gen)
        d_before = param_hash(t.disc)
        t.generator_step(4)
        assert param_hash(t.disc) == d_before and param_hash(t.gen) != g_before

    def test_generator_loss_decreases_against_frozen_discriminator(self):
        t = _trainer(2)
        batch = tiny_sampler()(np.random.default_rng(0), 4)
        t.disc.eval()
        losses = []
        for _ in range(10):
            t.gen.train()
            logits = t.disc(t.gen(batch))
            loss = ops.mean(ops.softplus(ops.neg(logits)))
            losses.append(float(loss.data))
            t.opt_g.step([g.data if g is not None else None for g in grad(loss, t.opt_g.params)])
        assert all(b <= a for a, b in zip(losses, losses[1:])), losses

    def test_symmetric_case_near_chance(self):
        t = _trainer(4, r1_gamma=0.0)
        real = t.gen(tiny_sampler()(np.random.default_rng(9), 16)).data
        d_loss, *_ = t.discriminator_step(real)
        assert d_loss == pytest.approx(2 * np.log(2), abs=0.05)

    def test_spectral_norms_in_band(self):
        t = _trainer(5)
        real = _images(1, n=4)
        convs = [t.disc.from_rgb, t.disc.head] + [c for b in t.disc.blocks for c in (b.conv1, b.conv2, b.shortcut) if c]
        for _ in range(3):
            t.step(real)
            for c in convs:
                w = c.effective_weight().data
                s = np.linalg.svd(w.reshape(w.shape[0], -1), compute_uv=False)[0]
                assert 0.9 <= s <= 1.05

    def test_nan_restores_state(self, tmp_path):
        t = _trainer(6)
        t.log_path = tmp_path / "log.csv"
        t.__post_init__()
        t.step(_images(0, n=4))
        g_before, d_before = param_hash(t.gen), param_hash(t.disc)
        acc_before = [a.copy() for a in t.opt_d.accumulators]
        bad = _images(0, n=4)
        bad[0, 0, 0, 0] = np.inf
        report = t.step(bad)
        assert report.aborted and np.isnan(report.d_loss)
        assert param_hash(t.gen) == g_before and param_hash(t.disc) == d_before
        assert all(np.array_equal(a, b) for a, b in zip(acc_before, t.opt_d.accumulators))
        rows = list(csv.reader(open(t.log_path)))
        assert rows[0] == ["step", "d_loss", "g_loss", "r1_penalty", "d_real_mean", "d_fake_mean"]
        assert len(rows) == 3

    def test_repeated_aborts_raise(self):
        t = _trainer(7, max_consecutive_aborts=2)
        bad = np.full((4, 3, 8, 8), np.nan)
        t.step(bad)
        with pytest.raises(NumericError):
            t.step(bad)
