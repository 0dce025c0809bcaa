import numpy as np
import pytest

from pdcguard.prony import build_area_block
from pdcguard.signalgen import (
    BENCHMARK_MODES,
    Mode,
    SignalSpec,
    partition_channels,
    random_channels,
    synth_ringdown,
)

BENCH_MODES = [Mode(*m) for m in BENCHMARK_MODES]


def make_blocks(T=0.4, seed=0, N=5, p=15, M=120, magnitude=(0.5, 1.5), modes=None):
    """Noiseless benchmark signal split into ``N`` contiguous areas."""
    modes = BENCH_MODES if modes is None else modes
    spec = SignalSpec(modes, random_channels(len(modes), p, seed, magnitude), T, M, seed)
    sig = synth_ringdown(spec)
    part = partition_channels(p, N)
    blocks = [build_area_block(sig, chs, len(modes), area_id=i) for i, chs in enumerate(part.assignment, 1)]
    return spec, blocks


@pytest.fixture(scope="session")
def bench_blocks():
    return make_blocks()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
