"""Bias-injection attacks on the estimates that PDCs transmit."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

BIAS_KINDS = ("constant", "iid-random", "fixed-random", "sparse")


@dataclass
class BiasGenerator:
    """Per-iteration bias for one attacked PDC.

    ``constant``: ``value`` (scalar broadcast or full vector) every iteration.
    ``iid-random``: fresh uniform draw on ``[0, value]`` per coordinate,
    seeded by ``(seed, pdc, k)``. ``fixed-random``: one uniform draw on
    ``[0, value]`` seeded by ``(seed, pdc)`` and held for every iteration.
    ``sparse``: zero except at ``indices``
    (0-based), which take ``value`` (scalar or one entry per index).
    """

    kind: str = "constant"
    value: float | list[float] = 0.0
    indices: list[int] = field(default_factory=list)
    seed: int = 0

    def __post_init__(self):
        if self.kind not in BIAS_KINDS:
            raise ValueError(f"unknown bias kind {self.kind!r}; expected one of {BIAS_KINDS}")

    def draw(self, pdc: int, k: int, dim: int) -> np.ndarray:
        if self.kind == "constant":
            return np.broadcast_to(np.asarray(self.value, dtype=float), (dim,)).copy()
        if self.kind == "iid-random":
            rng = np.random.default_rng([self.seed, pdc, k])
            return rng.uniform(0.0, float(self.value), size=dim)
        if self.kind == "fixed-random":
            rng = np.random.default_rng([self.seed, pdc])
            return rng.uniform(0.0, float(self.value), size=dim)
        out = np.zeros(dim)
        vals = np.broadcast_to(np.asarray(self.value, dtype=float), (len(self.indices),))
        for idx, v in zip(self.indices, vals):
            if not 0 <= idx < dim:
                raise IndexError(f"sparse bias index {idx} outside 0..{dim - 1}")
            out[idx] = v
        return out


@dataclass
class AttackSpec:
    attacked: set[int] = field(default_factory=set)
    generators: dict[int, BiasGenerator] = field(default_factory=dict)
    start_iteration: int = 1
    corrupt_dual: bool = False

    def __post_init__(self):
        self.attacked = set(self.attacked)
        missing = self.attacked - set(self.generators)
        if missing:
            raise ValueError(f"attacked PDCs {sorted(missing)} have no bias generator")

    def validate(self, N: int) -> None:
        bad = [i for i in self.attacked if not 1 <= i <= N]
        if bad:
            raise ValueError(f"attacked PDC ids {bad} outside 1..{N}")
        if len(self.attacked) >= N:
            raise ValueError("at least one PDC must remain unattacked")


def bias_at(spec: AttackSpec | None, pdc: int, k: int, dim: int) -> np.ndarray:
    if spec is None or pdc not in spec.attacked or k < spec.start_iteration:
        return np.zeros(dim)
    return spec.generators[pdc].draw(pdc, k, dim)


def average_bias(spec: AttackSpec | None, N: int, k: int, dim: int) -> np.ndarray:
    """``(1/N) * sum_{j in S} bias_j^k``, the shift the averaging step sees."""
    total = np.zeros(dim)
    for j in range(1, N + 1):
        total += bias_at(spec, j, k, dim)
    return total / N


def apply_attack(msg, spec: AttackSpec | None):
    """Return ``msg`` with the sender's bias added to the reported estimate.

    The reported dual is shifted by the same bias only when
    ``spec.corrupt_dual`` is set.
    """
    delta = bias_at(spec, msg.sender, msg.iteration, msg.a_reported.size)
    if not delta.any():
        return msg
    changes = {"a_reported": msg.a_reported + delta}
    if spec.corrupt_dual and msg.w_reported is not None:
        changes["w_reported"] = msg.w_reported + delta
    return dataclasses.replace(msg, **changes)


@dataclass
class RequirementCheck:
    k: int
    large_gap: bool      # bias beats the spread-based threshold term
    second_gap: bool     # bias beats the min2-based threshold term
    honest_cohesion: bool

    @property
    def all_hold(self) -> bool:
        return self.large_gap and self.second_gap and self.honest_cohesion


def check_bias_requirements(true_a, deltas, attacked, k_values=None) -> list[RequirementCheck]:
    """Evaluate the sufficient bias conditions for grouping-based localisation.

    ``true_a`` and ``deltas`` are sequences (one per iteration) of ``(N, d)``
    arrays holding the unbiased estimates and the injected biases; this
    needs ground truth the supervisor never sees. PDC ids are 1-based.
    """
    out = []
    attacked = set(attacked)
    for t, (A, D) in enumerate(zip(true_a, deltas)):
        A, D = np.atleast_2d(A), np.atleast_2d(D)
        N = A.shape[0]
        ids = range(1, N + 1)
        bad = [i for i in ids if i in attacked]
        good = [j for j in ids if j not in attacked]
        norms = np.linalg.norm(A, axis=1)
        inf = np.abs(A).max(axis=1)
        dinf = np.abs(D).max(axis=1)
        srt = np.sort(norms)
        n_max, n_min = srt[-1], srt[0]
        n_min2 = srt[1] if N > 1 else srt[0]
        d_max = dinf.max()
        a_max_inf = inf[int(np.argmax(norms))]

        large = bool(bad and good)
        second = bool(bad and good)
        for i in bad:
            for j in good:
                rhs_tail = norms[j - 1] - inf[i - 1]
                large &= dinf[i - 1] - d_max / N > (n_max - n_min) / N + rhs_tail
                second &= dinf[i - 1] > N * (n_min2 - n_min) + rhs_tail
        cohesion = True
        for i in good:
            for j in good:
                if i != j:
                    cohesion &= d_max > N * (norms[i - 1] - norms[j - 1]) + n_min - a_max_inf
        kk = k_values[t] if k_values is not None else t + 1
        out.append(RequirementCheck(kk, bool(large), bool(second), bool(cohesion)))
    return out
