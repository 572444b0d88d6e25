import numpy as np
import pytest

from fieldinv.field import FeatureField, FieldSample, compose, positional_encode
from fieldinv.scene import (
    AffineTransform,
    CameraPose,
    LatentCode,
    SceneSampling,
    SceneSpec,
    apply_inverse_transform,
    rotation_y,
    sample_scene_spec,
)
from fieldinv.tensor import ShapeError, Tensor, numerical_gradient, ops, relative_error


def _random_rotation(rng):
    q, r = np.linalg.qr(rng.standard_normal((3, 3)))
    q *= np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] *= -1
    return q


def _small_field(seed=0, **kw):
    args = dict(latent_dim=8, hidden=16, depth=3, feature_dim=5, n_freq_x=3, n_freq_d=2)
    args.update(kw)
    return FeatureField(np.random.default_rng(seed), **args)


def _inputs(field, rng, q=7, b=1):
    x = positional_encode(rng.uniform(-1, 1, (q, 3)), field.n_freq_x)
    d = rng.standard_normal((q, 3))
    d = positional_encode(d / np.linalg.norm(d, axis=1, keepdims=True), field.n_freq_d)
    zs = Tensor(rng.standard_normal((b, field.latent_dim)))
    za = Tensor(rng.standard_normal((b, field.latent_dim)))
    return x, d, zs, za


class TestPositionalEncoding:
    @pytest.mark.parametrize("n_freq", [1, 3, 6])
    def test_origin_alternates(self, n_freq):
        enc = positional_encode(np.zeros((1, 3)), n_freq)
        assert np.array_equal(enc[0], np.tile([0.0, 1.0], 3 * n_freq))

    def test_half_on_x_axis(self):
        enc = positional_encode(np.array([[0.5, 0.0, 0.0]]), 1)
        assert enc[0, 0] == pytest.approx(1.0, abs=1e-12)
        assert enc[0, 1] == pytest.approx(0.0, abs=1e-12)
        assert np.array_equal(enc[0, 2:], [0.0, 1.0, 0.0, 1.0])

    def test_width(self):
        assert positional_encode(np.ones((4, 3)), 10).shape == (4, 60)

    def test_rejects_zero_frequencies(self):
        with pytest.raises(ValueError):
            positional_encode(np.zeros((1, 3)), 0)


class TestAffineTransform:
    def test_identity(self):
        x = np.random.default_rng(0).standard_normal((5, 3))
        assert np.array_equal(apply_inverse_transform(AffineTransform.identity(), x), x)

    def test_translation_only(self):
        t = AffineTransform(np.ones(3), [1.0, 0, 0])
        assert np.allclose(t.inverse(np.array([1.0, 0, 0])), 0.0)

    @pytest.mark.parametrize("seed", range(10))
    def test_round_trip(self, seed):
        rng = np.random.default_rng(seed)
        t = AffineTransform(rng.uniform(0.2, 2.0, 3), rng.standard_normal(3), _random_rotation(rng))
        t.validate()
        x = rng.standard_normal((50, 3))
        assert np.max(np.abs(t.inverse(t.apply(x)) - x)) < 1e-6

    def test_directions_rotate_only(self):
        rng = np.random.default_rng(1)
        r = _random_rotation(rng)
        t = AffineTransform([0.3, 2.0, 1.0], [5.0, 1, 1], r)
        d = np.array([[0.0, 0.0, 1.0]])
        assert np.allclose(t.inverse_directions(d), d @ r)
        assert np.allclose(np.linalg.norm(t.inverse_directions(d), axis=1), 1.0)

    def test_nonpositive_scale_rejected(self):
        t = AffineTransform([1.0, 0.0, 1.0], np.zeros(3))
        with pytest.raises(ValueError):
            t.inverse(np.zeros(3))
        with pytest.raises(ValueError):
            t.validate()

    def test_improper_rotation_rejected(self):
        with pytest.raises(ValueError):
            AffineTransform(np.ones(3), np.zeros(3), np.diag([1.0, 1.0, -1.0])).validate()


class TestFeatureField:
    def test_sigma_nonnegative(self):
        field = _small_field()
        rng = np.random.default_rng(3)
        x, d, zs, za = _inputs(field, rng, q=10_000)
        out = field(x, d, zs, za)
        assert out.sigma.shape == (10_000,)
        assert np.all(out.sigma.data >= 0)
        assert np.all(np.isfinite(out.feature.data))

    def test_sigma_ignores_appearance_and_direction(self):
        field = _small_field()
        rng = np.random.default_rng(4)
        x, d, zs, za = _inputs(field, rng)
        base = field(x, d, zs, za)
        other_a = field(x, d, zs, Tensor(rng.standard_normal(za.shape)))
        other_d = field(x, rng.standard_normal(d.shape), zs, za)
        assert np.array_equal(base.sigma.data, other_a.sigma.data)
        assert np.array_equal(base.sigma.data, other_d.sigma.data)
        assert not np.allclose(base.feature.data, other_a.feature.data)

    def test_batched_codes_match_per_scene_calls(self):
        field = _small_field()
        rng = np.random.default_rng(5)
        x, d, zs, za = _inputs(field, rng, q=9, b=2)
        counts = np.array([4, 5])
        both = field(x, d, zs, za, counts)
        first = field(x[:4], d[:4], Tensor(zs.data[:1]), Tensor(za.data[:1]))
        second = field(x[4:], d[4:], Tensor(zs.data[1:]), Tensor(za.data[1:]))
        assert np.allclose(both.sigma.data, np.concatenate([first.sigma.data, second.sigma.data]))
        assert np.allclose(both.feature.data, np.concatenate([first.feature.data, second.feature.data]))

    def test_dimension_mismatch(self):
        field = _small_field()
        rng = np.random.default_rng(6)
        x, d, zs, za = _inputs(field, rng)
        with pytest.raises(ShapeError):
            field(x[:, :-1], d, zs, za)
        with pytest.raises(ShapeError):
            field(x, d, Tensor(np.zeros((1, 3))), za)
        with pytest.raises(ShapeError):
            field(x, d[:-1], zs, za)

    @pytest.mark.parametrize("seed", range(3))
    def test_weight_gradients(self, seed):
        field = _small_field(seed)
        rng = np.random.default_rng(100 + seed)
        x, d, zs, za = _inputs(field, rng, q=6)
        wf = rng.standard_normal((6, field.feature_dim))
        ws = rng.standard_normal(6)

        def functional():
            out = field(x, d, zs, za)
            return ops.add(ops.sum(ops.mul(out.feature, wf)), ops.sum(ops.mul(out.sigma, ws)))

        field.zero_grad()
        functional().backward()
        for name, p in field.named_parameters():
            num = numerical_gradient(lambda: float(functional().data), p.data)
            assert relative_error(p.grad, num) < 1e-4, name


def _sample(sigma, feature):
    return FieldSample(Tensor(np.asarray(sigma, dtype=float)), Tensor(np.asarray(feature, dtype=float)))


class TestCompose:
    def test_two_entities_analytic(self):
        out = compose([_sample([1.0], [[0.0]]), _sample([1.0], [[2.0]])])
        assert out.sigma.data[0] == 2.0
        assert out.feature.data[0, 0] == pytest.approx(1.0)

    def test_single_entity(self):
        rng = np.random.default_rng(0)
        s = _sample(rng.uniform(0.1, 3, 20), rng.standard_normal((20, 4)))
        out = compose([s])
        assert np.array_equal(out.sigma.data, s.sigma.data)
        assert np.allclose(out.feature.data, s.feature.data, rtol=1e-12)

    def test_zero_density_partner_is_ignored(self):
        rng = np.random.default_rng(1)
        s = _sample(rng.uniform(0.1, 3, 20), rng.standard_normal((20, 4)))
        z = _sample(np.zeros(20), rng.standard_normal((20, 4)))
        out = compose([z, s])
        assert np.allclose(out.feature.data, s.feature.data, rtol=1e-12)

    @pytest.mark.parametrize("seed", range(5))
    def test_permutation_invariant(self, seed):
        rng = np.random.default_rng(seed)
        samples = [_sample(rng.uniform(0, 2, (3, 7)), rng.standard_normal((3, 7, 4))) for _ in range(4)]
        ref = compose(samples)
        for perm in [[3, 2, 1, 0], [1, 3, 0, 2]]:
            out = compose([samples[i] for i in perm])
            assert np.array_equal(out.sigma.data, ref.sigma.data)
            assert np.array_equal(out.feature.data, ref.feature.data)

    def test_misaligned(self):
        with pytest.raises(ShapeError):
            compose([_sample([1.0, 2.0], [[0.0], [1.0]]), _sample([1.0], [[0.0]])])
        with pytest.raises(ValueError):
            compose([])


class TestSceneSampling:
    def test_determinism(self):
        cfg = SceneSampling(n_objects=2)
        a = sample_scene_spec(np.random.default_rng(42), cfg)
        b = sample_scene_spec(np.random.default_rng(42), cfg)
        assert a.to_text() == b.to_text()

    def test_latent_mean(self):
        cfg = SceneSampling(latent_dim=50)
        rng = np.random.default_rng(0)
        draws = np.concatenate([sample_scene_spec(rng, cfg).latent.as_vector() for _ in range(1000)])
        assert draws.size == 1000 * 2 * 2 * 50
        assert abs(draws.mean()) < 0.02

    def test_ranges(self):
        cfg = SceneSampling(n_objects=3)
        rng = np.random.default_rng(1)
        for _ in range(200):
            spec = sample_scene_spec(rng, cfg)
            assert cfg.azimuth_range[0] <= spec.pose.azimuth <= cfg.azimuth_range[1]
            for t in spec.transforms[:-1]:
                t.validate()
                assert np.all((t.scale >= cfg.scale_range[0]) & (t.scale <= cfg.scale_range[1]))
            bg = spec.transforms[-1]
            assert np.array_equal(bg.scale, np.full(3, cfg.background_scale))
            assert np.array_equal(bg.rotation, np.eye(3))

    def test_object_cap(self):
        with pytest.raises(ValueError):
            sample_scene_spec(np.random.default_rng(0), SceneSampling(n_objects=5))

    def test_text_round_trip(self):
        spec = sample_scene_spec(np.random.default_rng(9), SceneSampling(n_objects=2, latent_dim=6))
        back = SceneSpec.from_text(spec.to_text())
        assert np.array_equal(back.latent.shape, spec.latent.shape)
        assert np.array_equal(back.latent.appearance, spec.latent.appearance)
        for a, b in zip(back.transforms, spec.transforms):
            assert np.array_equal(a.rotation, b.rotation) and np.array_equal(a.translation, b.translation)
        assert back.pose == spec.pose

    def test_latent_code_invariants(self):
        with pytest.raises(ValueError):
            LatentCode(np.zeros((1, 4)), np.zeros((1, 4)))
        with pytest.raises(ValueError):
            LatentCode(np.zeros((2, 4)), np.zeros((2, 3)))
        code = LatentCode(np.arange(8.0).reshape(2, 4), -np.arange(8.0).reshape(2, 4))
        assert np.array_equal(LatentCode.from_vector(code.as_vector(), 4).shape, code.shape)


class TestCameraPose:
    def test_basis_is_rigid(self):
        for az in np.linspace(-3, 3, 7):
            r, u, f = CameraPose(az, 0.3).basis()
            m = np.stack([r, u, f])
            assert np.allclose(m @ m.T, np.eye(3), atol=1e-12)

    def test_projects_origin_to_center(self):
        col, row = CameraPose(0.7).project(np.zeros(3), 16)[0]
        assert col == pytest.approx(8.0) and row == pytest.approx(8.0)

    def test_rotation_y_is_proper(self):
        r = rotation_y(0.4)
        assert np.allclose(r.T @ r, np.eye(3)) and np.linalg.det(r) == pytest.approx(1.0)

    def test_radius_positive(self):
        with pytest.raises(ValueError):
            CameraPose(0.0, radius=0.0)
