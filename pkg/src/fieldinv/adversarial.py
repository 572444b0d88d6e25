"""Discriminator, GAN losses with R1, and the alternating G/D trainer."""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .generator import Generator, SceneBatch
from .tensor import (
    Conv2d,
    Linear,
    Module,
    NumericError,
    RMSProp,
    ShapeError,
    Tensor,
    grad,
    input_gradient,
    no_grad,
    ops,
)

LEAKY_SLOPE = 0.2
R1_GAMMA = 10.0


class DownBlock(Module):
    """Pre-activation residual block with 2x average pooling."""

    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator):
        self.conv1 = Conv2d(c_in, c_out, rng, spectral=True)
        self.conv2 = Conv2d(c_out, c_out, rng, spectral=True)
        self.shortcut = Conv2d(c_in, c_out, rng, k=1, bias=False, spectral=True) if c_in != c_out else None

    def forward(self, x: Tensor) -> Tensor:
        h = self.conv1(ops.leaky_relu(x, LEAKY_SLOPE))
        h = ops.avg_pool(self.conv2(ops.leaky_relu(h, LEAKY_SLOPE)))
        s = x if self.shortcut is None else self.shortcut(x)
        return ops.add(ops.avg_pool(s), h)


class Discriminator(Module):
    """Image (B, 3, R, R) to one raw logit per image.

    Residual blocks halve the resolution down to 4x4; a global mean pool
    and a spectrally normalised linear head give the logit.
    """

    def __init__(self, rng: np.random.Generator, resolution: int = 32, base_channels: int = 16,
                 max_channels: int = 64):
        n_down = int(round(math.log2(resolution / 4)))
        if resolution < 4 or 4 * 2**n_down != resolution:
            raise ValueError("resolution must be 4 * 2^k")
        self.resolution = resolution
        self.from_rgb = Conv2d(3, base_channels, rng, spectral=True)
        self.blocks, c = [], base_channels
        for _ in range(n_down):
            nxt = min(2 * c, max_channels)
            self.blocks.append(DownBlock(c, nxt, rng))
            c = nxt
        self.head = Linear(c, 1, rng, spectral=True)

    def forward(self, images: Tensor) -> Tensor:
        if images.ndim != 4 or images.shape[1:] != (3, self.resolution, self.resolution):
            raise ShapeError("discriminate", images.shape, (None, 3, self.resolution, self.resolution))
        x = self.from_rgb(images)
        for block in self.blocks:
            x = block(x)
        x = ops.mean(ops.leaky_relu(x, LEAKY_SLOPE), axis=(2, 3))
        return ops.reshape(self.head(x), (-1,))


def discriminate(disc: Discriminator, images) -> Tensor:
    return disc(images if isinstance(images, Tensor) else Tensor(images))


def gan_losses(real_logits: Tensor, fake_logits: Tensor, saturating: bool = False) -> tuple[Tensor, Tensor]:
    """Cross-entropy GAN losses on raw logits.

    d_loss = mean softplus(-real) + mean softplus(fake).  The generator loss
    is mean softplus(-fake) (non-saturating) or -mean softplus(fake).
    """
    d_loss = ops.add(ops.mean(ops.softplus(ops.neg(real_logits))), ops.mean(ops.softplus(fake_logits)))
    if saturating:
        g_loss = ops.neg(ops.mean(ops.softplus(fake_logits)))
    else:
        g_loss = ops.mean(ops.softplus(ops.neg(fake_logits)))
    return d_loss, g_loss


def generator_loss(fake_logits: Tensor, saturating: bool = False) -> Tensor:
    if saturating:
        return ops.neg(ops.mean(ops.softplus(fake_logits)))
    return ops.mean(ops.softplus(ops.neg(fake_logits)))


def r1_penalty(disc: Callable[[Tensor], Tensor], real_images, method: str = "double_backward",
               eps: float = 1e-3) -> tuple[Tensor, Tensor]:
    """Mean over the batch of |grad_x D(x)|^2 on real images.

    Returns (penalty, real_logits).  ``method="double_backward"``
    differentiates through the input gradient.  ``"finite_difference"``
    returns a surrogate with the same value whose parameter gradient is the
    central difference 2 * (grad D(x + eps g) - grad D(x - eps g)) / (2 eps)
    along the stopped input gradient g.
    """
    data = real_images.data if isinstance(real_images, Tensor) else np.asarray(real_images)
    x = Tensor(data, requires_grad=True)
    logits = disc(x)
    b = data.shape[0]
    if method == "double_backward":
        g = input_gradient(logits, x, create_graph=True)
        if g.independent:
            return Tensor(np.zeros(())), logits.detach()
        return ops.div(ops.sum(ops.mul(g, g)), float(b)), logits
    if method != "finite_difference":
        raise ValueError(f"unknown R1 method {method!r}")
    g = input_gradient(logits, x, create_graph=False).data
    value = float(np.sum(g * g)) / b
    if not np.any(g):
        return Tensor(np.zeros(())), logits.detach()
    plus = ops.sum(disc(Tensor(data + eps * g)))
    minus = ops.sum(disc(Tensor(data - eps * g)))
    surrogate = ops.div(ops.sub(plus, minus), eps * b)
    return ops.add(surrogate, value - float(surrogate.data)), logits.detach()


def _finite_grads(grads, who: str) -> list:
    out = [None if g is None else g.data for g in grads]
    for g in out:
        if g is not None and not np.all(np.isfinite(g)):
            raise NumericError(f"{who} gradient")
    return out


@dataclass
class GanConfig:
    batch_size: int = 16
    lr_g: float = 1e-4
    lr_d: float = 7e-5
    r1_gamma: float = R1_GAMMA
    r1_method: str = "double_backward"
    saturating: bool = False
    max_consecutive_aborts: int = 5


@dataclass
class GanBatchReport:
    step: int
    d_loss: float
    g_loss: float
    r1_penalty: float
    d_real_mean: float
    d_fake_mean: float
    aborted: bool = False

    FIELDS = ("step", "d_loss", "g_loss", "r1_penalty", "d_real_mean", "d_fake_mean")

    def row(self) -> list:
        return [getattr(self, k) for k in self.FIELDS]


@dataclass
class GanTrainer:
    """Strict 1:1 alternation: one discriminator step, then one generator step.

    ``sample_scenes(rng, n)`` draws the generator input; the trainer owns
    the rng, so a fixed seed reproduces every report bit-exactly.
    """

    gen: Generator
    disc: Discriminator
    cfg: GanConfig
    sample_scenes: Callable[[np.random.Generator, int], SceneBatch]
    rng: np.random.Generator
    step_count: int = 0
    opt_g: RMSProp = None
    opt_d: RMSProp = None
    log_path: Path | None = None
    consecutive_aborts: int = field(default=0)

    def __post_init__(self):
        if self.opt_g is None:
            self.opt_g = RMSProp(self.gen.parameters(), lr=self.cfg.lr_g)
        if self.opt_d is None:
            self.opt_d = RMSProp(self.disc.parameters(), lr=self.cfg.lr_d)
        if self.log_path is not None:
            self.log_path = Path(self.log_path)
            if not self.log_path.exists():
                self.log_path.parent.mkdir(parents=True, exist_ok=True)
                with open(self.log_path, "w", newline="") as fh:
                    csv.writer(fh).writerow(GanBatchReport.FIELDS)

    # -- state snapshots for abort/restore
    def _snapshot(self):
        return (
            {k: v.copy() for k, v in self.gen.state_dict().items()},
            {k: v.copy() for k, v in self.disc.state_dict().items()},
            [a.copy() for a in self.opt_g.accumulators],
            [a.copy() for a in self.opt_d.accumulators],
        )

    def _restore(self, snap):
        g, d, ag, ad = snap
        self.gen.load_state_dict(g)
        self.disc.load_state_dict(d)
        self.opt_g.accumulators = ag
        self.opt_d.accumulators = ad

    def _fake(self, n: int, train_gen: bool) -> Tensor:
        batch = self.sample_scenes(self.rng, n)
        self.gen.train(train_gen)
        return self.gen(batch, self.rng)

    def discriminator_step(self, real: np.ndarray):
        self.disc.train()
        with no_grad():
            fake = self._fake(len(real), train_gen=False)
        penalty, real_logits = r1_penalty(self.disc, real, self.cfg.r1_method)
        fake_logits = self.disc(fake)
        d_loss, _ = gan_losses(real_logits, fake_logits, self.cfg.saturating)
        total = ops.add(d_loss, ops.mul(penalty, 0.5 * self.cfg.r1_gamma))
        self.opt_d.step(_finite_grads(grad(total, self.opt_d.params), "discriminator"))
        return float(d_loss.data), float(penalty.data), float(real_logits.data.mean()), float(fake_logits.data.mean())

    def generator_step(self, n: int) -> float:
        self.disc.eval()
        fake = self._fake(n, train_gen=True)
        g_loss = generator_loss(self.disc(fake), self.cfg.saturating)
        self.opt_g.step(_finite_grads(grad(g_loss, self.opt_g.params), "generator"))
        self.disc.train()
        return float(g_loss.data)

    def step(self, real: np.ndarray) -> GanBatchReport:
        """One D step (R1 on ``real``) then one G step.

        A non-finite loss or forward value restores the pre-step parameters
        and optimizer state and returns an aborted report.
        """
        snap = self._snapshot()
        self.step_count += 1
        try:
            d_loss, pen, real_mean, fake_mean = self.discriminator_step(np.asarray(real))
            g_loss = self.generator_step(len(real))
            values = (d_loss, g_loss, pen, real_mean, fake_mean)
            if not all(np.isfinite(values)):
                raise NumericError("gan loss")
        except NumericError:
            self._restore(snap)
            self.consecutive_aborts += 1
            report = GanBatchReport(self.step_count, *(math.nan,) * 5, aborted=True)
            if self.consecutive_aborts >= self.cfg.max_consecutive_aborts:
                self._log(report)
                raise
            self._log(report)
            return report
        self.consecutive_aborts = 0
        report = GanBatchReport(self.step_count, d_loss, g_loss, pen, real_mean, fake_mean)
        self._log(report)
        return report

    def _log(self, report: GanBatchReport) -> None:
        if self.log_path is None:
            return
        with open(self.log_path, "a", newline="") as fh:
            csv.writer(fh).writerow([repr(v) if isinstance(v, float) else v for v in report.row()])


def report_dict(report: GanBatchReport) -> dict:
    return asdict(report)
