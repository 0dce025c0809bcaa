"""Consensus ADMM between local PDCs and a supervisor.

Iteration ``k`` (1-based) runs, for every active PDC ``i``::

    a_i^k = (H_i'H_i + rho I)^-1 (H_i'c_i - w_i^(k-1) + rho z^(k-1))   # primal
    transmit a_i^k (+ bias)                                            # attack hook
    z^k   = aggregate(reported a^k)                                    # average or RR
    w_i^k = w_i^(k-1) + rho (a_i^k - z^k)                              # dual

starting from ``a^0 = w^0 = z^0 = 0``. The consensus vectors are the
regression unknowns of :mod:`pdcguard.prony` (negated polynomial coefficients).
PDC ids are 1-based throughout.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from pdcguard.attacks import AttackSpec, apply_attack, bias_at
from pdcguard.prony import HankelBlock

DEFAULT_RHO = 1e-6
PROTOCOLS = ("average", "rr")


class AggregationError(RuntimeError):
    """The supervisor could not form a consensus vector from the messages."""


class MissingMessageError(AggregationError):
    pass


class EstimatorState:
    """One local PDC: primal ``a``, dual ``w`` and the cached factor of ``H'H + rho I``."""

    def __init__(self, block: HankelBlock, rho: float = DEFAULT_RHO, pdc: int = 1):
        self.pdc = pdc
        self.gram = block.H.T @ block.H
        self.rhs = block.H.T @ block.c
        d = self.gram.shape[0]
        self.a = np.zeros(d)
        self.w = np.zeros(d)
        self._rho = None
        self._factor = None
        self.rho = rho

    @property
    def dim(self) -> int:
        return self.a.size

    @property
    def rho(self) -> float:
        return self._rho

    @rho.setter
    def rho(self, value: float) -> None:
        if not value > 0:
            raise ValueError(f"penalty rho must be > 0, got {value}")
        if value != self._rho:
            self._rho = float(value)
            self._factor = cho_factor(self.gram + self._rho * np.eye(self.dim))

    def solve(self, v: np.ndarray) -> np.ndarray:
        """``(H'H + rho I)^-1 v`` through the cached Cholesky factor."""
        return cho_solve(self._factor, v)


def _check_dim(state: EstimatorState, z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    if z.shape != state.a.shape:
        raise ValueError(f"consensus vector has shape {z.shape}, expected {state.a.shape}")
    return z


def local_dual_update(state: EstimatorState, z) -> np.ndarray:
    z = _check_dim(state, z)
    state.w = state.w + state.rho * (state.a - z)
    return state.w


def local_primal_update(state: EstimatorState, z) -> np.ndarray:
    z = _check_dim(state, z)
    state.a = state.solve(state.rhs - state.w + state.rho * z)
    return state.a


@dataclass(frozen=True)
class ConsensusMsg:
    sender: int
    iteration: int
    a_reported: np.ndarray
    w_reported: np.ndarray | None = None


@dataclass
class RoundOrder:
    """Round-robin schedule: one permutation of the PDC ids per period.

    Periods beyond the listed ones reuse the list cyclically.
    """

    period_orders: list[tuple[int, ...]]
    alpha: float = 1.0

    def __post_init__(self):
        if self.alpha == 0:
            raise ValueError("alpha must be non-zero")
        if not self.period_orders:
            raise ValueError("at least one period order is required")
        self.period_orders = [tuple(int(i) for i in p) for p in self.period_orders]
        ref = sorted(self.period_orders[0])
        for p in self.period_orders:
            if sorted(p) != ref or len(set(p)) != len(p):
                raise ValueError(f"period order {p} is not a permutation of {ref}")

    @classmethod
    def fixed(cls, N: int, alpha: float = 1.0) -> "RoundOrder":
        return cls([tuple(range(1, N + 1))], alpha)

    @classmethod
    def random(cls, N: int, periods: int, seed: int, alpha: float = 1.0) -> "RoundOrder":
        rng = np.random.default_rng(seed)
        return cls([tuple(int(i) + 1 for i in rng.permutation(N)) for _ in range(periods)], alpha)

    @property
    def N(self) -> int:
        return len(self.period_orders[0])

    def period(self, p: int) -> tuple[int, ...]:
        """Permutation used in period ``p`` (0-based)."""
        return self.period_orders[p % len(self.period_orders)]

    def selected(self, r: int) -> int:
        """PDC feeding round-robin iteration ``r`` (1-based)."""
        p, pos = divmod(r - 1, self.N)
        return self.period(p)[pos]


def _index_msgs(msgs: Iterable[ConsensusMsg]) -> dict[int, ConsensusMsg]:
    out: dict[int, ConsensusMsg] = {}
    for m in msgs:
        if m.sender in out:
            raise AggregationError(f"duplicate message from PDC {m.sender}")
        out[m.sender] = m
    return out


def average_consensus(msgs: Iterable[ConsensusMsg], expected: Iterable[int] | None = None) -> np.ndarray:
    by_sender = _index_msgs(msgs)
    if not by_sender:
        raise AggregationError("no messages to aggregate")
    if expected is not None:
        expected = set(expected)
        missing = expected - set(by_sender)
        extra = set(by_sender) - expected
        if missing:
            raise MissingMessageError(f"missing messages from PDCs {sorted(missing)}")
        if extra:
            raise AggregationError(f"unexpected messages from PDCs {sorted(extra)}")
    return np.mean([by_sender[i].a_reported for i in sorted(by_sender)], axis=0)


def rr_consensus(msgs: Iterable[ConsensusMsg], r: int, order: RoundOrder) -> np.ndarray:
    """``alpha`` times the estimate of the PDC scheduled for RR iteration ``r``."""
    by_sender = _index_msgs(msgs)
    pick = order.selected(r)
    if pick not in by_sender:
        raise MissingMessageError(f"PDC {pick} scheduled for RR iteration {r} sent nothing")
    return order.alpha * by_sender[pick].a_reported


@dataclass
class IterationRecord:
    """What the supervisor saw at iteration ``k``."""

    k: int
    protocol: str
    z: np.ndarray
    a: dict[int, np.ndarray]
    w: dict[int, np.ndarray]
    rho: float
    excluded: tuple[int, ...] = ()
    source: int | None = None     # PDC selected under RR
    rr_index: int | None = None   # position since the last switch to RR


@dataclass
class GroundTruth:
    """Unbiased estimates and injected biases; never handed to detectors."""

    k: int
    a: dict[int, np.ndarray]
    delta: dict[int, np.ndarray]


class ConsensusLoop:
    """Stateful supervisor plus local PDCs; the handle detection and mitigation drive."""

    def __init__(
        self,
        blocks: list[HankelBlock],
        rho: float = DEFAULT_RHO,
        protocol: str = "average",
        order: RoundOrder | None = None,
        attack: AttackSpec | None = None,
        exclusions: Iterable[int] = (),
        missing: Iterable[tuple[int, int]] = (),
        sink: Callable[[IterationRecord], None] | None = None,
        record_truth: bool = False,
    ):
        if not blocks:
            raise ValueError("need at least one block")
        self.N = len(blocks)
        self.states = {i: EstimatorState(b, rho, pdc=i) for i, b in enumerate(blocks, start=1)}
        self.dim = self.states[1].dim
        if any(s.dim != self.dim for s in self.states.values()):
            raise ValueError("all blocks must share the polynomial order")
        if attack is not None:
            attack.validate(self.N)
        self.attack = attack
        self.base_rho = float(rho)
        self.rho = float(rho)
        self.excluded: set[int] = set()
        self.exclude(exclusions)
        self.missing = set(missing)
        self.sink = sink
        self.record_truth = record_truth
        self.z = np.zeros(self.dim)
        self.k = 0
        self.trace: list[IterationRecord] = []
        self.truth: list[GroundTruth] = []
        self.protocol = "average"
        self.order: RoundOrder | None = None
        self.rr_index = 0
        self._realized: dict[int, list[int]] = {}
        self.switch_protocol(protocol, order)

    @property
    def active(self) -> list[int]:
        return [i for i in range(1, self.N + 1) if i not in self.excluded]

    def set_rho(self, rho: float) -> None:
        """Broadcast a new penalty; every PDC refactors its local system."""
        for s in self.states.values():
            s.rho = rho
        self.rho = float(rho)

    def switch_protocol(self, protocol: str, order: RoundOrder | None = None) -> None:
        if protocol not in PROTOCOLS:
            raise ValueError(f"unknown protocol {protocol!r}")
        if protocol == "rr":
            order = order or self.order or RoundOrder.fixed(self.N)
            if sorted(order.period_orders[0]) != self.active:
                raise ValueError("round-robin order must cover exactly the active PDCs")
            self.order = order
            self.rr_index = 0
            self._realized = {}
        self.protocol = protocol

    def exclude(self, pdcs: Iterable[int]) -> None:
        pdcs = set(pdcs)
        bad = [i for i in pdcs if not 1 <= i <= self.N]
        if bad:
            raise ValueError(f"PDC ids {bad} outside 1..{self.N}")
        if self.excluded | pdcs >= set(range(1, self.N + 1)):
            raise ValueError("cannot exclude every PDC")
        self.excluded |= pdcs

    def reset_duals(self) -> None:
        for i in self.active:
            self.states[i].w = np.zeros(self.dim)

    def restart(self) -> None:
        """Zero the duals and the broadcast consensus vector; iteration count keeps running."""
        self.reset_duals()
        self.z = np.zeros(self.dim)

    def _rr_pick(self, r: int, present: set[int]) -> int:
        """Scheduled PDC for RR iteration ``r``; swaps in the next unvisited one if absent."""
        p, pos = divmod(r - 1, self.order.N)
        perm = self._realized.setdefault(p, list(self.order.period(p)))
        if perm[pos] not in present:
            for j in range(pos + 1, len(perm)):
                if perm[j] in present:
                    perm[pos], perm[j] = perm[j], perm[pos]
                    break
            else:
                raise MissingMessageError(
                    f"no unvisited PDC available for RR iteration {r}"
                )
        return perm[pos]

    def realized_source(self, r: int) -> int:
        p, pos = divmod(r - 1, self.order.N)
        return self._realized[p][pos]

    def step(self) -> IterationRecord:
        k = self.k + 1
        active = self.active
        msgs, true_a, deltas = [], {}, {}
        for i in active:
            s = self.states[i]
            local_primal_update(s, self.z)
            if (k, i) in self.missing:
                continue
            msg = apply_attack(ConsensusMsg(i, k, s.a.copy()), self.attack)
            msgs.append(msg)
            if self.record_truth:
                true_a[i] = s.a.copy()
                deltas[i] = bias_at(self.attack, i, k, self.dim)

        source = rr_index = None
        if self.protocol == "average":
            z = average_consensus(msgs, expected=active)
        else:
            self.rr_index += 1
            rr_index = self.rr_index
            present = {m.sender for m in msgs}
            source = self._rr_pick(rr_index, present)
            by_sender = {m.sender: m for m in msgs}
            z = self.order.alpha * by_sender[source].a_reported

        w_rep = {}
        for i in active:
            s = self.states[i]
            local_dual_update(s, z)
            w = s.w.copy()
            if self.attack is not None and self.attack.corrupt_dual:
                w = w + bias_at(self.attack, i, k, self.dim)
            w_rep[i] = w

        self.z = z
        self.k = k
        rec = IterationRecord(
            k=k,
            protocol=self.protocol,
            z=z.copy(),
            a={m.sender: m.a_reported for m in msgs},
            w=w_rep,
            rho=self.rho,
            excluded=tuple(sorted(self.excluded)),
            source=source,
            rr_index=rr_index,
        )
        self.trace.append(rec)
        if self.record_truth:
            self.truth.append(GroundTruth(k, true_a, deltas))
        if self.sink is not None:
            self.sink(rec)
        return rec

    def run(self, iters: int) -> list[IterationRecord]:
        if iters < 0:
            raise ValueError("iteration count must be non-negative")
        return [self.step() for _ in range(iters)]


def run_loop(
    blocks: list[HankelBlock],
    protocol: str = "average",
    order: RoundOrder | None = None,
    iters: int = 500,
    attack: AttackSpec | None = None,
    exclusions: Iterable[int] = (),
    hooks: Callable[[IterationRecord], None] | None = None,
    rho: float = DEFAULT_RHO,
    missing: Iterable[tuple[int, int]] = (),
) -> list[IterationRecord]:
    if iters < 1:
        raise ValueError("iters must be >= 1")
    loop = ConsensusLoop(
        blocks, rho=rho, protocol=protocol, order=order, attack=attack,
        exclusions=exclusions, missing=missing, sink=hooks,
    )
    return loop.run(iters)


@dataclass
class StateModel:
    """Second-order recursion of the averaging loop.

    ``[a^(k+1); a^k] = L [a^k; a^(k-1)] + [P; 0] u^k`` with the stacked primal
    ``a^k`` and drive ``u^k = 2 D^k - D^(k-1)``, where ``D^k`` is the averaged
    bias entering ``z^k`` (constant biases give ``u^k = D^k`` for k >= 2).
    """

    L: np.ndarray
    P: np.ndarray
    N: int
    dim: int
    A: list[np.ndarray] = field(default_factory=list)

    @property
    def L11(self) -> np.ndarray:
        m = self.N * self.dim
        return self.L[:m, :m]

    @property
    def L12(self) -> np.ndarray:
        m = self.N * self.dim
        return self.L[:m, m:]

    def initial_state(self, blocks: list[HankelBlock], rho: float) -> np.ndarray:
        """``[a^1; a^0]`` from zero initial primal, dual and consensus."""
        a1 = np.concatenate([Aj @ (b.H.T @ b.c) for Aj, b in zip(self.A, blocks)])
        return np.concatenate([a1, np.zeros_like(a1)])

    def simulate(self, x0: np.ndarray, avg_biases: list[np.ndarray]) -> list[np.ndarray]:
        """Stacked primal ``a^1, a^2, ...``; ``avg_biases[k-1]`` is ``D^k``."""
        m = self.N * self.dim
        out = [x0[:m].copy()]
        x = x0.copy()
        prev = np.zeros(self.dim)
        for delta in avg_biases:
            u = 2 * delta - prev
            drive = np.concatenate([self.P @ u, np.zeros(m)])
            x = self.L @ x + drive
            out.append(x[:m].copy())
            prev = delta
        return out


def build_state_model(blocks: list[HankelBlock], rho: float) -> StateModel:
    if not rho > 0:
        raise ValueError(f"penalty rho must be > 0, got {rho}")
    N = len(blocks)
    d = blocks[0].order
    if any(b.order != d for b in blocks):
        raise ValueError("all blocks must share the polynomial order")
    eye = np.eye(d)
    A = [np.linalg.inv(b.H.T @ b.H + rho * eye) for b in blocks]
    m = N * d
    L11 = np.zeros((m, m))
    L12 = np.zeros((m, m))
    for i, j in itertools.product(range(N), range(N)):
        rows, cols = slice(i * d, (i + 1) * d), slice(j * d, (j + 1) * d)
        if i == j:
            L11[rows, cols] = eye + (2 - N) * rho / N * A[i]
        else:
            L11[rows, cols] = 2 * rho * A[i] / N
        L12[rows, cols] = -rho * A[i] / N
    L = np.block([[L11, L12], [np.eye(m), np.zeros((m, m))]])
    P = np.vstack([rho * Aj for Aj in A])
    return StateModel(L=L, P=P, N=N, dim=d, A=A)
