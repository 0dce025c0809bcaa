"""Synthetic multi-channel ringdown signals built from damped sinusoids."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

# Inter-area modes of the IEEE 68-bus benchmark, (damping 1/s, rad/s).
BENCHMARK_MODES = (
    (0.32557, 2.2262),
    (0.31429, 3.2505),
    (0.43118, 3.5809),
    (0.43011, 4.9836),
)


@dataclass(frozen=True)
class Mode:
    """Continuous-time mode ``-sigma +/- j*omega``.

    ``omega == 0`` stands for a single real pole.
    """

    sigma: float
    omega: float

    @property
    def eigenvalue(self) -> complex:
        return complex(-self.sigma, self.omega)


@dataclass
class ChannelSpec:
    residues: list[complex]
    noise_std: float = 0.0


@dataclass
class SignalSpec:
    modes: list[Mode]
    channels: list[ChannelSpec]
    sample_period: float = 0.4
    num_samples: int = 120
    seed: int = 0

    @property
    def order(self) -> int:
        """Degree 2n of the characteristic polynomial."""
        return 2 * len(self.modes)

    def validate(self) -> None:
        n = len(self.modes)
        if n == 0:
            raise ValueError("at least one mode is required")
        if not self.channels:
            raise ValueError("at least one channel is required")
        T = self.sample_period
        if not (math.isfinite(T) and T > 0):
            raise ValueError(f"sample_period must be finite and > 0, got {T}")
        for m in self.modes:
            if not (math.isfinite(m.sigma) and math.isfinite(m.omega)):
                raise ValueError(f"non-finite mode {m}")
            if m.omega < 0:
                raise ValueError(f"mode frequency must be >= 0, got {m.omega}")
        max_omega = max(m.omega for m in self.modes)
        if T * max_omega >= math.pi:
            raise ValueError(
                f"T*max(omega) = {T * max_omega:.4g} >= pi; planted modes would alias"
            )
        if self.num_samples < 2 * n + 2:
            raise ValueError(
                f"num_samples={self.num_samples} < 2n+2={2 * n + 2}"
            )
        for i, ch in enumerate(self.channels):
            if len(ch.residues) != n:
                raise ValueError(
                    f"channel {i} has {len(ch.residues)} residues, expected {n}"
                )
            if not all(np.isfinite(complex(r)) for r in ch.residues):
                raise ValueError(f"channel {i} has non-finite residues")
            if not (math.isfinite(ch.noise_std) and ch.noise_std >= 0):
                raise ValueError(f"channel {i} has invalid noise_std {ch.noise_std}")


@dataclass
class RingdownSignal:
    samples: np.ndarray  # (p, M)
    sample_period: float

    @property
    def num_channels(self) -> int:
        return self.samples.shape[0]

    @property
    def num_samples(self) -> int:
        return self.samples.shape[1]


@dataclass
class AreaPartition:
    assignment: list[list[int]] = field(default_factory=list)

    @property
    def num_areas(self) -> int:
        return len(self.assignment)

    def validate(self, p: int) -> None:
        seen = sorted(c for area in self.assignment for c in area)
        if any(len(area) == 0 for area in self.assignment):
            raise ValueError("every area must contain at least one channel")
        if seen != list(range(p)):
            raise ValueError(f"areas must cover channels 0..{p - 1} exactly once")


def synth_ringdown(spec: SignalSpec) -> RingdownSignal:
    """Sample ``y_i(mT) = sum_k 2|r_ik| exp(-sigma_k mT) cos(omega_k mT + arg r_ik)``.

    Noise is i.i.d. Gaussian per sample with the channel's ``noise_std``, drawn
    from a generator seeded by ``spec.seed`` (one draw per channel, in order).
    """
    spec.validate()
    t = np.arange(spec.num_samples) * spec.sample_period
    sigma = np.array([m.sigma for m in spec.modes])
    omega = np.array([m.omega for m in spec.modes])
    decay = np.exp(-np.outer(sigma, t))
    phase = np.outer(omega, t)

    rng = np.random.default_rng(spec.seed)
    out = np.zeros((len(spec.channels), spec.num_samples))
    for i, ch in enumerate(spec.channels):
        r = np.asarray(ch.residues, dtype=complex)
        terms = 2 * np.abs(r)[:, None] * decay * np.cos(phase + np.angle(r)[:, None])
        out[i] = terms.sum(axis=0)
        if ch.noise_std > 0:
            out[i] += rng.normal(0.0, ch.noise_std, spec.num_samples)
    if not np.all(np.isfinite(out)):
        raise ValueError("synthesized signal contains non-finite values")
    return RingdownSignal(samples=out, sample_period=spec.sample_period)


def random_channels(
    num_modes: int,
    num_channels: int,
    seed: int,
    magnitude: tuple[float, float] = (0.5, 1.5),
    noise_std: float = 0.0,
) -> list[ChannelSpec]:
    """Draw residues with uniform magnitudes and uniform phases in [0, 2*pi)."""
    rng = np.random.default_rng(seed)
    mags = rng.uniform(*magnitude, size=(num_channels, num_modes))
    phases = rng.uniform(0.0, 2 * np.pi, size=(num_channels, num_modes))
    res = mags * np.exp(1j * phases)
    return [
        ChannelSpec(residues=[complex(v) for v in row], noise_std=noise_std)
        for row in res
    ]


def partition_channels(p: int, N: int, policy: str = "contiguous") -> AreaPartition:
    if N < 1:
        raise ValueError(f"need at least one area, got N={N}")
    if N > p:
        raise ValueError(f"cannot split {p} channels into {N} non-empty areas")
    if policy == "round-robin":
        assignment = [list(range(a, p, N)) for a in range(N)]
    elif policy == "contiguous":
        base, extra = divmod(p, N)
        assignment, start = [], 0
        for a in range(N):
            size = base + (1 if a < extra else 0)
            assignment.append(list(range(start, start + size)))
            start += size
    else:
        raise ValueError(f"unknown partition policy {policy!r}")
    return AreaPartition(assignment)
