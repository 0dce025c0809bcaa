"""Prony-style linear prediction: Hankel regression, LS solve, pole conversion.

The regression unknown solved by every routine here is ``x = -a``, where
``a = (a_1, ..., a_2n)`` are the coefficients of the monic characteristic
polynomial ``z^2n + a_1 z^(2n-1) + ... + a_2n``. Consensus loops carry ``x``;
:class:`CharPolyCoeffs` carries ``a``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from pdcguard.signalgen import Mode, RingdownSignal


class DegenerateRootError(ValueError):
    """A discrete-time root at exactly zero has no continuous-time image."""


@dataclass
class CharPolyCoeffs:
    a: np.ndarray

    def __post_init__(self):
        self.a = np.asarray(self.a, dtype=float)
        if self.a.ndim != 1:
            raise ValueError("coefficient vector must be one-dimensional")

    @property
    def order(self) -> int:
        return self.a.size

    @property
    def regression(self) -> np.ndarray:
        """The regression unknown ``-a``."""
        return -self.a

    @classmethod
    def from_regression(cls, x) -> "CharPolyCoeffs":
        return cls(-np.asarray(x, dtype=float))


@dataclass
class HankelBlock:
    H: np.ndarray
    c: np.ndarray
    area_id: int = 0

    def __post_init__(self):
        self.H = np.atleast_2d(np.asarray(self.H, dtype=float))
        self.c = np.asarray(self.c, dtype=float).ravel()
        if self.H.shape[0] != self.c.size:
            raise ValueError(
                f"H has {self.H.shape[0]} rows but c has {self.c.size} entries"
            )

    @property
    def order(self) -> int:
        return self.H.shape[1]


def build_hankel(
    signal: RingdownSignal, channel: int, n: int, ell: int | None = None
) -> HankelBlock:
    """Linear-prediction block of one channel.

    Row ``r`` is ``[y(2n-1+r), ..., y(r)]`` with target ``y(2n+r)``,
    ``r = 0..ell``. Solving ``H x = c`` gives ``x = -a``. ``ell`` defaults to
    ``M - 2n - 1`` (all samples).
    """
    y = np.asarray(signal.samples[channel], dtype=float)
    M = y.size
    order = 2 * n
    if ell is None:
        ell = M - order - 1
    if ell < 0 or order + ell > M - 1:
        raise ValueError(
            f"window violates 2n+ell <= M-1: 2n+ell={order + ell}, M={M}"
        )
    # Column j holds y(order-1-j+r).
    idx = np.arange(ell + 1)[:, None] + (order - 1 - np.arange(order))[None, :]
    return HankelBlock(H=y[idx], c=y[order : order + ell + 1].copy())


def build_area_block(
    signal: RingdownSignal, channels, n: int, ell: int | None = None, area_id: int = 0
) -> HankelBlock:
    block = stack_blocks([build_hankel(signal, ch, n, ell) for ch in channels])
    block.area_id = area_id
    return block


def stack_blocks(blocks: list[HankelBlock]) -> HankelBlock:
    if not blocks:
        raise ValueError("nothing to stack")
    cols = {b.order for b in blocks}
    if len(cols) != 1:
        raise ValueError(f"blocks disagree on column count: {sorted(cols)}")
    return HankelBlock(
        H=np.vstack([b.H for b in blocks]),
        c=np.concatenate([b.c for b in blocks]),
        area_id=blocks[0].area_id,
    )


def solve_regression(block: HankelBlock, ridge: float = 0.0) -> np.ndarray:
    """``argmin 0.5||Hx - c||^2 + 0.5*ridge*||x||^2`` via an SVD-based solve."""
    H, c = block.H, block.c
    if H.size == 0:
        raise ValueError("empty regression block")
    if not (np.all(np.isfinite(H)) and np.all(np.isfinite(c))):
        raise ValueError("regression block contains non-finite entries")
    if ridge < 0:
        raise ValueError(f"ridge must be >= 0, got {ridge}")
    if ridge > 0:
        d = H.shape[1]
        H = np.vstack([H, math.sqrt(ridge) * np.eye(d)])
        c = np.concatenate([c, np.zeros(d)])
    x, *_ = np.linalg.lstsq(H, c, rcond=None)
    return x


def centralized_ls(block: HankelBlock, ridge: float = 0.0) -> CharPolyCoeffs:
    return CharPolyCoeffs.from_regression(solve_regression(block, ridge))


def _sort_roots(roots: np.ndarray) -> np.ndarray:
    keys = [(-round(abs(z), 12), round(float(np.angle(z)), 12)) for z in roots]
    order = sorted(range(len(roots)), key=keys.__getitem__)
    return roots[order]


def char_poly_roots(coeffs: CharPolyCoeffs) -> np.ndarray:
    """Roots of the monic polynomial from the eigenvalues of its companion matrix."""
    a = coeffs.a
    if not np.all(np.isfinite(a)):
        raise ValueError("non-finite polynomial coefficients")
    d = a.size
    if d == 0:
        return np.zeros(0, dtype=complex)
    comp = np.zeros((d, d))
    comp[0, :] = -a
    comp[np.arange(1, d), np.arange(d - 1)] = 1.0
    return _sort_roots(np.linalg.eigvals(comp).astype(complex))


def to_continuous_modes(roots, T: float, tol: float = 1e-9) -> list[Mode]:
    """Map z-plane roots to modes via ``ln(z)/T``, merging conjugate pairs.

    Unstable or real roots are kept; a real negative root maps to
    ``omega = pi/T``.
    """
    if not T > 0:
        raise ValueError(f"sample period must be > 0, got {T}")
    roots = [complex(z) for z in roots]
    if any(z == 0 for z in roots):
        raise DegenerateRootError("root at z = 0 has no logarithm")

    modes: list[Mode] = []
    used = [False] * len(roots)
    for i, z in enumerate(roots):
        if used[i]:
            continue
        used[i] = True
        lam = np.log(z) / T
        scale = max(1.0, abs(z))
        if abs(z.imag) > tol * scale:
            # consume the closest unused conjugate partner, if any
            best, best_d = None, tol * 1e3 * scale
            for j in range(i + 1, len(roots)):
                if not used[j]:
                    dist = abs(roots[j] - z.conjugate())
                    if dist <= best_d:
                        best, best_d = j, dist
            if best is not None:
                used[best] = True
            modes.append(Mode(sigma=float(-lam.real), omega=float(abs(lam.imag))))
        elif z.real > 0:
            modes.append(Mode(sigma=float(-math.log(z.real) / T), omega=0.0))
        else:
            modes.append(Mode(sigma=float(-math.log(-z.real) / T), omega=math.pi / T))
    return modes


def modes_from_regression(x, T: float) -> list[Mode]:
    return to_continuous_modes(char_poly_roots(CharPolyCoeffs.from_regression(x)), T)


def planted_coefficients(modes: list[Mode], T: float) -> CharPolyCoeffs:
    """Monic polynomial whose roots are ``exp(lambda T)`` for every planted pole."""
    poles = []
    for m in modes:
        poles.append(np.exp(m.eigenvalue * T))
        if m.omega > 0:
            poles.append(np.exp(m.eigenvalue.conjugate() * T))
    return CharPolyCoeffs(np.real(np.poly(poles))[1:])


@dataclass
class MatchedMode:
    truth: Mode
    estimate: Mode
    sigma_error: float
    omega_error: float

    @property
    def error(self) -> float:
        return max(self.sigma_error, self.omega_error)


@dataclass
class ModeComparison:
    matched: list[MatchedMode] = field(default_factory=list)
    spurious: list[Mode] = field(default_factory=list)
    missing: list[Mode] = field(default_factory=list)

    @property
    def max_error(self) -> float:
        return max((m.error for m in self.matched), default=0.0)


def compare_modes(estimated: list[Mode], truth: list[Mode]) -> ModeComparison:
    """Greedy nearest-neighbour matching in the (sigma, omega) plane."""
    pairs = sorted(
        (math.hypot(e.sigma - t.sigma, e.omega - t.omega), ti, ei)
        for ti, t in enumerate(truth)
        for ei, e in enumerate(estimated)
    )
    t_used, e_used = set(), set()
    result = ModeComparison()
    for _, ti, ei in pairs:
        if ti in t_used or ei in e_used:
            continue
        t_used.add(ti)
        e_used.add(ei)
        t, e = truth[ti], estimated[ei]
        result.matched.append(
            MatchedMode(t, e, abs(e.sigma - t.sigma), abs(e.omega - t.omega))
        )
    result.matched.sort(key=lambda m: (m.truth.omega, m.truth.sigma))
    result.spurious = [e for i, e in enumerate(estimated) if i not in e_used]
    result.missing = [t for i, t in enumerate(truth) if i not in t_used]
    return result
