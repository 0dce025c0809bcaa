import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pdcguard.prony import planted_coefficients
from pdcguard.signalgen import (
    ChannelSpec,
    Mode,
    SignalSpec,
    partition_channels,
    random_channels,
    synth_ringdown,
)

from conftest import BENCH_MODES


def test_constant_channel_from_static_mode():
    spec = SignalSpec([Mode(0.0, 0.0)], [ChannelSpec([0.5])], 0.1, 6)
    np.testing.assert_array_equal(synth_ringdown(spec).samples, np.ones((1, 6)))


def test_closed_form_direct_evaluation():
    spec = SignalSpec([Mode(0.3, 2.0)], [ChannelSpec([1 + 0j])], 0.05, 10)
    got = synth_ringdown(spec).samples[0]
    want = [2 * math.exp(-0.3 * m * 0.05) * math.cos(2.0 * m * 0.05) for m in range(10)]
    np.testing.assert_allclose(got, want, rtol=0, atol=1e-15)


def test_residue_phase_enters_cosine():
    spec = SignalSpec([Mode(0.0, 1.0)], [ChannelSpec([1j])], 0.5, 4)
    want = [2 * math.cos(m * 0.5 + math.pi / 2) for m in range(4)]
    np.testing.assert_allclose(synth_ringdown(spec).samples[0], want, atol=1e-15)


@pytest.mark.parametrize("T", [math.pi / 4.9836, 1.0])
def test_aliasing_rejected(T):
    spec = SignalSpec(BENCH_MODES, random_channels(4, 2, 0), T, 50)
    with pytest.raises(ValueError, match="alias"):
        synth_ringdown(spec)


@pytest.mark.parametrize(
    "mutate, match",
    [
        (lambda s: setattr(s, "sample_period", float("nan")), "sample_period"),
        (lambda s: setattr(s, "modes", [Mode(float("inf"), 1.0)] * 4), "non-finite"),
        (lambda s: setattr(s, "channels", [ChannelSpec([complex("nan")] * 4)]), "non-finite"),
        (lambda s: setattr(s, "num_samples", 5), "num_samples"),
        (lambda s: setattr(s, "channels", [ChannelSpec([1, 1])]), "residues"),
        (lambda s: setattr(s, "channels", []), "channel"),
    ],
)
def test_invalid_specs(mutate, match):
    spec = SignalSpec(BENCH_MODES, random_channels(4, 2, 0), 0.4, 50)
    mutate(spec)
    with pytest.raises(ValueError, match=match):
        synth_ringdown(spec)


def test_same_seed_bit_identical():
    chans = random_channels(4, 3, 7, noise_std=0.01)
    a = synth_ringdown(SignalSpec(BENCH_MODES, chans, 0.4, 80, seed=3)).samples
    b = synth_ringdown(SignalSpec(BENCH_MODES, chans, 0.4, 80, seed=3)).samples
    c = synth_ringdown(SignalSpec(BENCH_MODES, chans, 0.4, 80, seed=4)).samples
    assert a.tobytes() == b.tobytes()
    assert not np.array_equal(a, c)


def test_zero_residue_drops_mode():
    chans = random_channels(4, 2, 5)
    for ch in chans:
        ch.residues[2] = 0j
    full = synth_ringdown(SignalSpec(BENCH_MODES, chans, 0.4, 60)).samples
    reduced_modes = [m for i, m in enumerate(BENCH_MODES) if i != 2]
    reduced = [ChannelSpec([r for i, r in enumerate(ch.residues) if i != 2]) for ch in chans]
    np.testing.assert_allclose(full, synth_ringdown(SignalSpec(reduced_modes, reduced, 0.4, 60)).samples, atol=1e-14)


@settings(max_examples=30, deadline=None)
@given(
    n=st.integers(1, 4),
    seed=st.integers(0, 2**16),
    T=st.floats(0.05, 0.3),
)
def test_noiseless_signal_satisfies_recursion(n, seed, T):
    rng = np.random.default_rng(seed)
    modes = [Mode(float(rng.uniform(0.05, 0.6)), float(rng.uniform(0.3, 2.5) * (k + 1))) for k in range(n)]
    if T * max(m.omega for m in modes) >= math.pi:
        return
    sig = synth_ringdown(SignalSpec(modes, random_channels(n, 1, seed), T, 4 * n + 10)).samples[0]
    a = planted_coefficients(modes, T).a
    d = a.size
    for m in range(d, sig.size):
        pred = -np.dot(a, sig[m - 1 :: -1][:d])
        assert abs(pred - sig[m]) <= 1e-10 * max(1.0, np.max(np.abs(sig)))


def test_random_channels_ranges():
    chans = random_channels(4, 50, 0, magnitude=(0.5, 1.5))
    mags = np.abs([r for ch in chans for r in ch.residues])
    assert mags.min() >= 0.5 and mags.max() <= 1.5


@pytest.mark.parametrize(
    "p, N, policy, want",
    [
        (3, 3, "contiguous", [[0], [1], [2]]),
        (15, 5, "contiguous", [[0, 1, 2], [3, 4, 5], [6, 7, 8], [9, 10, 11], [12, 13, 14]]),
        (5, 2, "round-robin", [[0, 2, 4], [1, 3]]),
        (7, 3, "contiguous", [[0, 1, 2], [3, 4], [5, 6]]),
    ],
)
def test_partition_examples(p, N, policy, want):
    part = partition_channels(p, N, policy)
    assert part.assignment == want
    part.validate(p)


def test_partition_rejects_too_many_areas():
    with pytest.raises(ValueError):
        partition_channels(3, 4)
    with pytest.raises(ValueError):
        partition_channels(3, 2, "diagonal")


@given(p=st.integers(1, 60), N=st.integers(1, 60))
def test_contiguous_sizes_are_balanced(p, N):
    if N > p:
        return
    sizes = [len(a) for a in partition_channels(p, N).assignment]
    assert set(sizes) <= {p // N, -(-p // N)}
    assert sum(sizes) == p
