"""2D neural renderer: feature map to RGB image."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Conv2d, Module, Parameter, ShapeError, Tensor, ops


@dataclass(frozen=True)
class ActivationPolicy:
    renderer: str = "relu"
    discriminator: str = "leaky_relu"
    leaky_slope: float = 0.2


def activation_policy() -> ActivationPolicy:
    """Renderer blocks use ReLU; the discriminator uses leaky ReLU."""
    return ActivationPolicy()


def block_widths(feature_dim: int, n_blocks: int, floor: int = 16) -> list[int]:
    """Channel count after each block: halve from ``feature_dim``, never below ``floor``."""
    widths, c = [], feature_dim
    for _ in range(n_blocks):
        c = max(c // 2, min(floor, c))
        widths.append(c)
    return widths


class UpBlock(Module):
    """Nearest upsample, then x + gain * relu(conv(relu(conv(x))))."""

    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator):
        self.conv1 = Conv2d(c_in, c_out, rng, spectral=True, gain=np.sqrt(2.0))
        self.conv2 = Conv2d(c_out, c_out, rng, spectral=True, gain=np.sqrt(2.0))
        self.shortcut = Conv2d(c_in, c_out, rng, k=1, bias=False, spectral=True) if c_in != c_out else None
        # zero gain: the block starts as (upsampled) identity
        self.gain = Parameter(np.zeros(1))

    def residual(self, x: Tensor) -> Tensor:
        return ops.relu(self.conv2(ops.relu(self.conv1(x))))

    def forward(self, x: Tensor) -> Tensor:
        x = ops.upsample_nearest(x)
        skip = x if self.shortcut is None else self.shortcut(x)
        return ops.add(skip, ops.mul(self.gain, self.residual(x)))


class NeuralRenderer(Module):
    """Upsamples an (B, M_f, H_v, W_v) feature map by 2 per block to an image in [-1, 1].

    Every block also projects its output to RGB; these skips are
    bilinearly upsampled and summed before the final tanh.
    """

    def __init__(self, rng: np.random.Generator, feature_dim: int = 32, n_blocks: int = 1,
                 input_resolution: int = 16):
        if n_blocks < 1:
            raise ValueError("need at least one renderer block")
        self.feature_dim, self.input_resolution = feature_dim, input_resolution
        widths = block_widths(feature_dim, n_blocks)
        self.blocks = []
        c = feature_dim
        for w in widths:
            self.blocks.append(UpBlock(c, w, rng))
            c = w
        self.to_rgb = [Conv2d(feature_dim, 3, rng, spectral=True)]
        self.to_rgb += [Conv2d(w, 3, rng, spectral=True) for w in widths]

    @property
    def n_blocks(self) -> int:
        return len(self.blocks)

    @property
    def output_resolution(self) -> int:
        return self.input_resolution * 2 ** self.n_blocks

    def add_identity_block(self, rng: np.random.Generator) -> None:
        """Append a block that leaves the pre-squash image unchanged up to resampling."""
        c = self.blocks[-1].conv2.weight.shape[0]
        self.blocks.append(UpBlock(c, c, rng))
        rgb = Conv2d(c, 3, rng, spectral=True)
        rgb.weight.data = np.zeros_like(rgb.weight.data)
        self.to_rgb.append(rgb)

    def logits(self, features: Tensor) -> Tensor:
        """Pre-squash image accumulator, (B, 3, H, W)."""
        if features.ndim != 4 or features.shape[1] != self.feature_dim:
            raise ShapeError("render_image", features.shape, (None, self.feature_dim, None, None))
        if features.shape[2] != self.input_resolution or features.shape[3] != self.input_resolution:
            raise ShapeError("render_image", features.shape[2:], (self.input_resolution,) * 2)
        x = features
        acc = self.to_rgb[0](x)
        for block, rgb in zip(self.blocks, self.to_rgb[1:]):
            x = block(x)
            acc = ops.add(ops.upsample_bilinear(acc), rgb(x))
        return acc

    def forward(self, features: Tensor) -> Tensor:
        return ops.tanh(self.logits(features))


def render_image(renderer: NeuralRenderer, features: Tensor) -> Tensor:
    return renderer(features)
