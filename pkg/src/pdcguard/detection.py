"""Presence detection and identification of biased PDCs from supervisor data.

Everything here consumes only what the supervisor receives: reported
estimates, reported duals and the consensus vectors it broadcast.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from pdcguard.admm import IterationRecord, RoundOrder

DEFAULT_WINDOW = 5
PRESENCE_TOL = 1e-12
DUAL_REL_TOL = 1e-12
REDUCED_RHO = 1e-9
METHODS = ("alg1", "alg2", "alg3", "alg4", "rr-random")


@dataclass
class DetectionReport:
    method: str
    presence: bool = False
    presence_evidence: list[float] | None = None
    identified_malicious: set[int] = field(default_factory=set)
    confirmed: bool = False
    confirmed_at_iteration: int | None = None
    first_flagged_at: int | None = None
    status: str = "no-attack"
    per_iteration_evidence: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "presence": self.presence,
            "presence_evidence": self.presence_evidence,
            "identified_malicious": sorted(self.identified_malicious),
            "confirmed": self.confirmed,
            "confirmed_at_iteration": self.confirmed_at_iteration,
            "first_flagged_at": self.first_flagged_at,
            "status": self.status,
            # dict keys become strings so a JSON round-trip is lossless
            "per_iteration_evidence": json.loads(json.dumps(self.per_iteration_evidence)),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DetectionReport":
        d = dict(d)
        d["identified_malicious"] = set(d.get("identified_malicious", ()))
        return cls(**d)


@dataclass
class PresenceResult:
    flag: bool
    mean_dual: np.ndarray
    implied_bias: np.ndarray  # -mean/rho, the average injected bias


def detect_presence(w_msgs: Sequence[np.ndarray], rho: float, tol: float = PRESENCE_TOL) -> PresenceResult:
    """Flag an attack when the mean of the first-iteration duals is non-zero.

    Honest loops started from zero keep the dual average at zero; an average
    bias ``D`` at iteration 1 shows up as ``mean(w^1) = -rho * D``.
    """
    if len(w_msgs) == 0:
        raise ValueError("need at least one dual vector")
    mean = np.mean(np.asarray(w_msgs, dtype=float), axis=0)
    flag = bool(np.max(np.abs(mean)) > tol)
    return PresenceResult(flag, mean, -mean / rho)


def threshold_gamma_a(norms: Sequence[float], N: int | None = None) -> float:
    """Grouping threshold ``min((max-min)/N, N*(min2-min))`` over estimate norms."""
    norms = np.sort(np.asarray(norms, dtype=float))
    N = len(norms) if N is None else N
    if N < 2 or len(norms) < 2:
        raise ValueError("the grouping threshold needs at least two estimates")
    n_min, n_min2, n_max = norms[0], norms[1], norms[-1]
    return float(min((n_max - n_min) / N, N * (n_min2 - n_min)))


@dataclass
class GroupingResult:
    groups: list[list[int]]
    representative_norms: list[float]
    unbiased_group: int

    @property
    def unbiased(self) -> set[int]:
        return set(self.groups[self.unbiased_group])


def group_estimates(norms: Sequence[float], gamma: float, ids: Sequence[int] | None = None) -> GroupingResult:
    """Split PDCs into groups whose norms chain within ``gamma``.

    Closeness is closed transitively, so on the real line groups are maximal
    runs of sorted norms with consecutive gaps ``<= gamma``. The group holding
    the smallest norm is the unbiased one.
    """
    if gamma < 0:
        raise ValueError(f"gamma must be >= 0, got {gamma}")
    norms = [float(v) for v in norms]
    ids = list(range(1, len(norms) + 1)) if ids is None else list(ids)
    if len(ids) != len(norms):
        raise ValueError("ids and norms differ in length")
    if not norms:
        raise ValueError("nothing to group")
    order = sorted(range(len(norms)), key=lambda i: (norms[i], ids[i]))
    groups, reps = [[ids[order[0]]]], [norms[order[0]]]
    for prev, cur in zip(order, order[1:]):
        if norms[cur] - norms[prev] <= gamma:
            groups[-1].append(ids[cur])
        else:
            groups.append([ids[cur]])
            reps.append(norms[cur])
    for g in groups:
        g.sort()
    return GroupingResult(groups, reps, unbiased_group=0)


class _Confirmer:
    """Tracks consecutive identical non-empty verdicts."""

    def __init__(self, s: int):
        if s < 1:
            raise ValueError("confirmation window must be >= 1")
        self.s = s
        self.last: frozenset | None = None
        self.count = 0
        self.first_flagged_at: int | None = None

    def push(self, verdict: frozenset | None, at: int) -> bool:
        if verdict and self.first_flagged_at is None:
            self.first_flagged_at = at
        if not verdict:
            self.last, self.count = None, 0
            return False
        if verdict == self.last:
            self.count += 1
        else:
            self.last, self.count = verdict, 1
        return self.count >= self.s


class GroupingIdentifier:
    """Norm grouping of the reported estimates at each averaging iteration."""

    def __init__(self, s: int = DEFAULT_WINDOW, start: int = 3, method: str = "alg1"):
        self.start = start
        self.report = DetectionReport(method=method, presence=True, status="unconfirmed")
        self._confirm = _Confirmer(s)

    @property
    def done(self) -> bool:
        return self.report.confirmed

    def observe(self, rec: IterationRecord) -> bool:
        if self.done or rec.k < self.start or rec.protocol != "average":
            return self.done
        ids = sorted(rec.a)
        norms = [float(np.linalg.norm(rec.a[i])) for i in ids]
        gamma = threshold_gamma_a(norms)
        grouping = group_estimates(norms, gamma, ids)
        suspects = frozenset(ids) - grouping.unbiased
        self.report.per_iteration_evidence.append({
            "k": rec.k,
            "gamma_a": gamma,
            "norms": dict(zip(ids, norms)),
            "groups": grouping.groups,
            "suspects": sorted(suspects),
        })
        if self._confirm.push(suspects, rec.k):
            self._finish(suspects, rec.k)
        self.report.first_flagged_at = self._confirm.first_flagged_at
        return self.done

    def _finish(self, suspects, k):
        self.report.identified_malicious = set(suspects)
        self.report.confirmed = True
        self.report.confirmed_at_iteration = k
        self.report.status = "confirmed"


class RRNormIdentifier:
    """Spike search on round-robin consensus norms, one verdict per period.

    For period ``p`` the smallest norm at RR index ``k_min`` defines the
    reference PDC ``m``; the threshold is the growth of ``m``'s next
    consensus value. Every PDC is then judged at its first visit at or after
    ``k_min``. With fixed order this is the window ``k_min .. k_min+N-1``.

    A period whose reference norm shrinks (negative threshold) carries no
    evidence either way: it is logged as invalid and leaves the confirmation
    streak untouched.
    """

    def __init__(self, N: int, s: int = DEFAULT_WINDOW, method: str = "alg2"):
        self.N = N
        self.method = method
        self.report = DetectionReport(method=method, presence=True, status="unconfirmed")
        self._confirm = _Confirmer(s)
        self.norms: dict[int, float] = {}
        self.sources: dict[int, int] = {}
        self.global_k: dict[int, int] = {}
        self._period = 0

    @property
    def done(self) -> bool:
        return self.report.confirmed

    def observe(self, rec: IterationRecord) -> bool:
        if self.done or rec.rr_index is None:
            return self.done
        r = rec.rr_index
        self.norms[r] = float(np.linalg.norm(rec.z))
        self.sources[r] = rec.source
        self.global_k[r] = rec.k
        while not self.done and self._try_period(self._period):
            self._period += 1
        return self.done

    def _try_period(self, p: int) -> bool:
        N = self.N
        lo, hi = p * N + 1, p * N + N
        if hi not in self.norms:
            return False
        k_min = min(range(lo, hi + 1), key=lambda r: (self.norms[r], r))
        m = self.sources[k_min]
        k_star = next((r for r in range(k_min + 1, max(self.norms) + 1) if self.sources.get(r) == m), None)
        if k_star is None:
            return False
        first_visit: dict[int, int] = {}
        r = k_min
        while len(first_visit) < N:
            if r not in self.norms:
                return False
            first_visit.setdefault(self.sources[r], r)
            r += 1
        ref = self.norms[k_min]
        gamma = self.norms[k_star] - ref
        at = self.global_k[max(k_star, max(first_visit.values()))]
        if gamma < 0:
            verdict = None
            flagged: list[int] = []
        else:
            flagged = sorted(i for i, rr in first_visit.items() if self.norms[rr] > ref + gamma)
            verdict = frozenset(flagged)
        self.report.per_iteration_evidence.append({
            "period": p + 1,
            "k": at,
            "k_min": k_min,
            "reference_pdc": m,
            "k_star": k_star,
            "gamma_z": gamma,
            "z_norms": {rr: self.norms[rr] for rr in range(lo, hi + 1)},
            "flagged": flagged,
            "valid": gamma >= 0,
        })
        if gamma >= 0 and self._confirm.push(verdict, at):
            self.report.identified_malicious = set(verdict)
            self.report.confirmed = True
            self.report.confirmed_at_iteration = at
            self.report.status = "confirmed"
        self.report.first_flagged_at = self._confirm.first_flagged_at
        return True


class DualDifferenceIdentifier:
    """Checks ``w_i^k - w_i^(k-1)`` of the PDC that fed the RR step ``k``.

    Under ``alpha = 1`` an honest selected PDC has an exactly zero difference;
    a biased one shows ``-rho * bias``. Windows are RR indices
    ``pN+2 .. pN+N+1``, so the first verdict lands after ``N+1`` RR steps.
    """

    def __init__(self, N: int, s: int = DEFAULT_WINDOW, rel_tol: float = DUAL_REL_TOL):
        self.N = N
        self.rel_tol = rel_tol
        self.report = DetectionReport(method="alg4", presence=True, status="unconfirmed")
        self._confirm = _Confirmer(s)
        self._prev: IterationRecord | None = None
        self._window: set[int] = set()
        self._checked = 0

    @property
    def done(self) -> bool:
        return self.report.confirmed

    def observe(self, rec: IterationRecord) -> bool:
        prev, self._prev = self._prev, rec
        if self.done or rec.rr_index is None or prev is None:
            return self.done
        r = rec.rr_index
        if r < 2:
            return False
        i = rec.source
        if i not in rec.w or i not in prev.w:
            self.report.per_iteration_evidence.append({"k": rec.k, "pdc": i, "missing": True})
            self._confirm.push(None, rec.k)
            self._window, self._checked = set(), 0
            return False
        diff = rec.w[i] - prev.w[i]
        tol = self.rel_tol * max(1.0, float(np.max(np.abs(rec.w[i]))))
        nonzero = bool(np.max(np.abs(diff)) > tol)
        self.report.per_iteration_evidence.append({
            "k": rec.k,
            "rr_index": r,
            "pdc": i,
            "max_abs_difference": float(np.max(np.abs(diff))),
            "difference": diff.tolist(),
            "tolerance": tol,
            "malicious": nonzero,
        })
        if nonzero:
            self._window.add(i)
        self._checked += 1
        if self._checked == self.N:
            verdict = frozenset(self._window)
            if self._confirm.push(verdict, rec.k):
                self.report.identified_malicious = set(verdict)
                self.report.confirmed = True
                self.report.confirmed_at_iteration = rec.k
                self.report.status = "confirmed"
            self.report.first_flagged_at = self._confirm.first_flagged_at
            self._window, self._checked = set(), 0
        return self.done


def _presence_from_trace(trace: Sequence[IterationRecord], tol: float) -> PresenceResult:
    first = trace[0]
    return detect_presence([first.w[i] for i in sorted(first.w)], first.rho, tol)


def _no_attack(method: str, presence: PresenceResult) -> DetectionReport:
    return DetectionReport(method=method, presence=False, presence_evidence=presence.mean_dual.tolist())


def identify_alg1(trace: Sequence[IterationRecord], s: int = DEFAULT_WINDOW, start: int = 3,
                  tol: float = PRESENCE_TOL, method: str = "alg1") -> DetectionReport:
    """Grouping identification over an averaging trace (presence checked first)."""
    presence = _presence_from_trace(trace, tol)
    if not presence.flag:
        return _no_attack(method, presence)
    ident = GroupingIdentifier(s=s, start=start, method=method)
    for rec in trace:
        if ident.observe(rec):
            break
    ident.report.presence_evidence = presence.mean_dual.tolist()
    return ident.report


def _rr_records(z_trace, order: RoundOrder | None, N: int) -> list[IterationRecord]:
    """Accept RR records or bare consensus vectors (RR index = position + 1)."""
    out = []
    for pos, item in enumerate(z_trace, start=1):
        if isinstance(item, IterationRecord):
            out.append(item)
            continue
        src = order.selected(pos) if order is not None else (pos - 1) % N + 1
        out.append(IterationRecord(k=pos, protocol="rr", z=np.asarray(item, dtype=float),
                                   a={}, w={}, rho=float("nan"), source=src, rr_index=pos))
    return out


def identify_alg2(z_trace, N: int, order: RoundOrder | None = None, s: int = DEFAULT_WINDOW) -> DetectionReport:
    ident = RRNormIdentifier(N, s=s, method="alg2")
    for rec in _rr_records(z_trace, order, N):
        if ident.observe(rec):
            break
    return ident.report


def identify_rr_random(z_trace, order: RoundOrder, s: int = DEFAULT_WINDOW) -> DetectionReport:
    ident = RRNormIdentifier(order.N, s=s, method="rr-random")
    for rec in _rr_records(z_trace, order, order.N):
        if ident.observe(rec):
            break
    return ident.report


def identify_alg4(w_trace: Sequence[IterationRecord], N: int, s: int = DEFAULT_WINDOW,
                  rel_tol: float = DUAL_REL_TOL) -> DetectionReport:
    """Dual-difference identification; ``w_trace`` holds RR records and the one before them."""
    ident = DualDifferenceIdentifier(N, s=s, rel_tol=rel_tol)
    for rec in w_trace:
        if ident.observe(rec):
            break
    return ident.report


def mitigate(loop, malicious: Iterable[int], rho: float | None = None) -> None:
    """Drop ``malicious`` from aggregation and restart clean averaging.

    Remaining duals are zeroed and the penalty restored; the next primal
    update starts from the last broadcast consensus vector.
    """
    malicious = set(malicious)
    if malicious >= set(loop.active) and malicious:
        raise ValueError("cannot exclude every PDC")
    if not malicious:
        return
    loop.exclude(malicious)
    loop.switch_protocol("average")
    loop.reset_duals()
    loop.set_rho(loop.base_rho if rho is None else rho)


def identify_alg3(loop, rho_reduced: float = REDUCED_RHO, s: int = DEFAULT_WINDOW, start: int = 3,
                  max_iters: int = 50, tol: float = PRESENCE_TOL, restart: bool = True) -> DetectionReport:
    """Small-bias identification: shrink the penalty, then group as in ``identify_alg1``.

    ``loop`` is a live :class:`~pdcguard.admm.ConsensusLoop` that has run at
    least one averaging iteration. The reduced penalty is broadcast right after
    the presence check and stays in force until mitigation restores it.

    With ``restart`` the broadcast also zeroes duals and the consensus vector.
    Duals accumulated under the old penalty otherwise keep feeding the
    ``rho``-scale spread back through ``(H'H + rho' I)^-1``.
    """
    if not loop.trace:
        loop.step()
    presence = _presence_from_trace(loop.trace, tol)
    if not presence.flag:
        return _no_attack("alg3", presence)
    loop.set_rho(rho_reduced)
    if restart:
        loop.restart()
    ident = GroupingIdentifier(s=s, start=max(start, loop.k + 1), method="alg3")
    for _ in range(max_iters):
        if ident.observe(loop.step()):
            break
    ident.report.presence_evidence = presence.mean_dual.tolist()
    return ident.report
