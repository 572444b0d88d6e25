import numpy as np
import pytest

from fieldinv.renderer import NeuralRenderer, UpBlock, activation_policy, block_widths
from fieldinv.tensor import RMSProp, ShapeError, Tensor, numerical_gradient, ops, relative_error


def _features(rng, b=2, m=8, res=4):
    return Tensor(rng.standard_normal((b, m, res, res)))


def _convs(renderer):
    for block in renderer.blocks:
        yield block.conv1
        yield block.conv2
        if block.shortcut is not None:
            yield block.shortcut
    yield from renderer.to_rgb


class TestShapes:
    def test_one_block_doubles(self):
        r = NeuralRenderer(np.random.default_rng(0), feature_dim=32, n_blocks=1, input_resolution=16)
        out = r(_features(np.random.default_rng(1), b=1, m=32, res=16))
        assert out.shape == (1, 3, 32, 32)

    def test_widths_halve_with_floor(self):
        assert block_widths(128, 4) == [64, 32, 16, 16]
        assert block_widths(32, 2) == [16, 16]
        assert block_widths(8, 2) == [8, 8]

    def test_resolution_mismatch(self):
        r = NeuralRenderer(np.random.default_rng(0), feature_dim=8, n_blocks=1, input_resolution=4)
        with pytest.raises(ShapeError):
            r(_features(np.random.default_rng(1), res=8))
        with pytest.raises(ShapeError):
            r(_features(np.random.default_rng(1), m=6))

    def test_output_in_range(self):
        r = NeuralRenderer(np.random.default_rng(0), feature_dim=8, n_blocks=2, input_resolution=4)
        for block in r.blocks:
            block.gain.data[:] = 3.0
        out = r(Tensor(50 * np.random.default_rng(2).standard_normal((2, 8, 4, 4))))
        assert np.all(np.abs(out.data) <= 1.0)


class TestBehaviour:
    def test_zero_weights_give_squashed_bias(self):
        r = NeuralRenderer(np.random.default_rng(0), feature_dim=8, n_blocks=2, input_resolution=4)
        rng = np.random.default_rng(3)
        for p in r.parameters():
            p.data[:] = 0.0
        for c in r.to_rgb:
            c.bias.data[:] = rng.standard_normal(3) * 0.3
        out = r(_features(rng)).data
        expected = np.tanh(sum(c.bias.data for c in r.to_rgb))
        assert np.allclose(out, expected[None, :, None, None], atol=1e-12)

    @pytest.mark.parametrize("extra", [1, 2])
    def test_identity_blocks_preserve_output(self, extra):
        rng = np.random.default_rng(4)
        r = NeuralRenderer(rng, feature_dim=8, n_blocks=extra, input_resolution=4)
        for block in r.blocks:
            block.gain.data[:] = 0.5
        f = _features(rng)
        before = r.logits(f)
        for _ in range(extra):
            r.add_identity_block(rng)
        after = r.logits(f)
        expected = before
        for _ in range(extra):
            expected = ops.upsample_bilinear(expected)
        assert after.shape[-1] == 4 * 2 ** (2 * extra)
        assert np.max(np.abs(after.data - expected.data)) < 1e-5

    @pytest.mark.parametrize("seed", range(3))
    def test_first_block_gradient(self, seed):
        rng = np.random.default_rng(seed)
        r = NeuralRenderer(rng, feature_dim=8, n_blocks=2, input_resolution=4).eval()
        for block in r.blocks:
            block.gain.data[:] = 0.7
        f = _features(rng)

        def mean_pixel():
            return ops.mean(r(f))

        r.zero_grad()
        mean_pixel().backward()
        w = r.blocks[0].conv1.weight
        idx = [tuple(rng.integers(0, s) for s in w.shape) for _ in range(12)]
        num = numerical_gradient(lambda: float(mean_pixel().data), w.data, indices=idx)
        assert relative_error(np.array([w.grad[i] for i in idx]), np.array([num[i] for i in idx])) < 1e-3

    @pytest.mark.parametrize("seed", range(4))
    def test_spectral_norm_after_training_steps(self, seed):
        # generator learning rate; sigma measured exactly by SVD
        rng = np.random.default_rng(seed)
        r = NeuralRenderer(rng, feature_dim=16, n_blocks=2, input_resolution=4)
        opt = RMSProp(r.parameters(), lr=1e-4)
        f = _features(rng, m=16)
        target = Tensor(rng.uniform(-1, 1, (2, 3, 16, 16)))
        for _ in range(10):
            opt.zero_grad()
            ops.mse(r(f), target).backward()
            opt.step()
            for conv in _convs(r):
                w = conv.effective_weight().data
                sigma = np.linalg.svd(w.reshape(w.shape[0], -1), compute_uv=False)[0]
                assert 0.9 <= sigma <= 1.05


class TestActivationPolicy:
    def test_policy(self):
        p = activation_policy()
        assert (p.renderer, p.discriminator, p.leaky_slope) == ("relu", "leaky_relu", 0.2)

    def test_residual_branch_zero_on_negative_preactivation(self):
        block = UpBlock(4, 4, np.random.default_rng(0))
        for c in (block.conv1, block.conv2):
            c.bias.data[:] = -100.0
        x = Tensor(np.random.default_rng(1).standard_normal((1, 4, 3, 3)))
        assert np.all(block.residual(ops.upsample_nearest(x)).data == 0.0)

    def test_identity_path_bypasses_activation(self):
        block = UpBlock(4, 4, np.random.default_rng(0))
        block.gain.data[:] = 1.0
        for c in (block.conv1, block.conv2):
            c.bias.data[:] = -100.0
        x = Tensor(-np.abs(np.random.default_rng(1).standard_normal((1, 4, 3, 3))))
        assert np.array_equal(block(x).data, ops.upsample_nearest(x).data)
