import sys

import numpy as np
import pytest

from fieldinv.generator import Generator, GeneratorConfig, sample_batch, sampling_for

TINY = GeneratorConfig(latent_dim=4, feature_dim=8, hidden=8, depth=2, n_freq_x=2, n_freq_d=1,
                       volume_resolution=4, n_blocks=1, n_samples=6)


def tiny_generator(seed=0, cfg=TINY):
    return Generator(cfg, np.random.default_rng(seed))


def tiny_sampler(cfg=TINY, **overrides):
    sampling = sampling_for(cfg, **overrides)
    return lambda rng, n: sample_batch(rng, n, sampling)


@pytest.fixture
def tiny_gen():
    return tiny_generator()


def pytest_terminal_summary(terminalreporter):
    acceptance = sys.modules.get("test_acceptance")
    if acceptance is None or not acceptance.VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(acceptance.VERDICTS):
        terminalreporter.write_line(acceptance.VERDICTS[number])
