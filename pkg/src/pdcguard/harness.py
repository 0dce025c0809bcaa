"""Scenario configs, the end-to-end experiment driver and trace export.

A scenario is one YAML document. :func:`run_scenario` turns it into a
signal, area blocks and a consensus loop, runs presence detection and the
configured identifier, mitigates on confirmation and finally recovers the
modes from the last consensus vector.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field, fields
from importlib import resources
from pathlib import Path
from typing import Any, ClassVar

import numpy as np
import yaml

from pdcguard.admm import DEFAULT_RHO, ConsensusLoop, IterationRecord, RoundOrder
from pdcguard.attacks import BIAS_KINDS, AttackSpec, BiasGenerator
from pdcguard.detection import (
    DEFAULT_WINDOW,
    DUAL_REL_TOL,
    METHODS,
    PRESENCE_TOL,
    REDUCED_RHO,
    DetectionReport,
    DualDifferenceIdentifier,
    GroupingIdentifier,
    RRNormIdentifier,
    detect_presence,
    mitigate,
)
from pdcguard.prony import (
    build_area_block,
    compare_modes,
    modes_from_regression,
    solve_regression,
    stack_blocks,
)
from pdcguard.signalgen import (
    BENCHMARK_MODES,
    ChannelSpec,
    Mode,
    SignalSpec,
    partition_channels,
    random_channels,
    synth_ringdown,
)

DEFAULT_ITERS = 500
FORMATS = ("csv", "json")
CSV_HEADER = ("iteration", "pdc_id", "variable", "coordinate_index", "value")
RR_METHODS = ("alg2", "rr-random", "alg4")


class HarnessError(Exception):
    """Failure with a machine-readable record for the CLI."""

    kind = "harness-error"

    def __init__(self, message: str, scenario: str | None = None):
        super().__init__(message)
        self.scenario = scenario

    def to_record(self) -> dict:
        return {"error": self.kind, "message": str(self), "scenario": self.scenario}


class ConfigError(HarnessError):
    kind = "config-error"


class ScenarioError(HarnessError):
    kind = "scenario-error"


class ExportError(HarnessError):
    kind = "export-error"


# ----------------------------------------------------------------- config


class _Section:
    """Mapping <-> dataclass plumbing shared by every config section."""

    _nested: ClassVar[dict[str, type]] = {}

    @classmethod
    def from_dict(cls, data: Any, where: str = ""):
        where = where or cls.__name__
        if data is None:
            data = {}
        if not isinstance(data, dict):
            raise ConfigError(f"{where}: expected a mapping, got {type(data).__name__}")
        names = {f.name for f in fields(cls)}
        unknown = sorted(set(map(str, data)) - names)
        if unknown:
            raise ConfigError(f"{where}: unknown keys {unknown}")
        kwargs = {}
        for key, val in data.items():
            sub = cls._nested.get(key)
            if sub is not None and val is not None:
                val = sub.from_dict(val, f"{where}.{key}")
            kwargs[key] = val
        try:
            return cls(**kwargs)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{where}: {exc}") from exc

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            val = getattr(self, f.name)
            out[f.name] = val.to_dict() if isinstance(val, _Section) else _plain(val)
        return out


def _plain(val):
    if isinstance(val, (list, tuple)):
        return [_plain(v) for v in val]
    if isinstance(val, dict):
        return {k: _plain(v) for k, v in val.items()}
    if isinstance(val, np.generic):
        return val.item()
    return val


@dataclass
class ChannelConfig(_Section):
    """Random residues per channel, or explicit ``[re, im]`` pairs in ``residues``."""

    count: int = 15
    seed: int = 0
    magnitude: list[float] = field(default_factory=lambda: [0.5, 1.5])
    noise_std: float = 0.0
    residues: list[list[list[float]]] | None = None

    def build(self, num_modes: int) -> list[ChannelSpec]:
        if self.residues is not None:
            return [
                ChannelSpec([complex(re, im) for re, im in row], self.noise_std)
                for row in self.residues
            ]
        lo, hi = self.magnitude
        return random_channels(num_modes, self.count, self.seed, (lo, hi), self.noise_std)


@dataclass
class SignalConfig(_Section):
    _nested: ClassVar[dict[str, type]] = {"channels": ChannelConfig}

    modes: list[list[float]] = field(default_factory=lambda: [list(m) for m in BENCHMARK_MODES])
    sample_period: float = 0.4
    num_samples: int = 120
    channels: ChannelConfig = field(default_factory=ChannelConfig)

    def build(self, seed: int) -> SignalSpec:
        modes = [Mode(float(s), float(w)) for s, w in self.modes]
        return SignalSpec(modes, self.channels.build(len(modes)), self.sample_period, self.num_samples, seed)


@dataclass
class PartitionConfig(_Section):
    N: int = 5
    policy: str = "contiguous"


@dataclass
class OrderConfig(_Section):
    """RR schedule: ``fixed`` identity, ``random`` permutations or ``explicit`` lists."""

    kind: str = "fixed"
    periods: int = 20
    seed: int | None = None
    orders: list[list[int]] | None = None

    def build(self, N: int, alpha: float, default_seed: int) -> RoundOrder:
        if self.kind == "fixed":
            return RoundOrder.fixed(N, alpha)
        if self.kind == "random":
            seed = default_seed if self.seed is None else self.seed
            return RoundOrder.random(N, self.periods, seed, alpha)
        if self.kind == "explicit":
            return RoundOrder([tuple(p) for p in self.orders or []], alpha)
        raise ConfigError(f"unknown order kind {self.kind!r}")


@dataclass
class AdmmConfig(_Section):
    _nested: ClassVar[dict[str, type]] = {"order": OrderConfig}

    protocol: str = "average"
    rho: float = DEFAULT_RHO
    rho_reduced: float = REDUCED_RHO
    restart_on_reduce: bool = True
    alpha: float = 1.0
    iters: int = DEFAULT_ITERS
    switch_at: int = 3  # first RR iteration when an RR identifier runs
    order: OrderConfig = field(default_factory=OrderConfig)


@dataclass
class GeneratorConfig(_Section):
    kind: str = "constant"
    value: float | list[float] = 0.0
    indices: list[int] = field(default_factory=list)
    seed: int = 0


@dataclass
class AttackConfig(_Section):
    attacked: list[int] = field(default_factory=list)
    generators: dict[int, GeneratorConfig] = field(default_factory=dict)
    start_iteration: int = 1
    corrupt_dual: bool = False

    def __post_init__(self):
        self.generators = {
            int(k): v if isinstance(v, GeneratorConfig) else GeneratorConfig.from_dict(v, f"attack.generators.{k}")
            for k, v in (self.generators or {}).items()
        }

    def to_dict(self) -> dict:
        out = super().to_dict()
        out["generators"] = {k: g.to_dict() for k, g in sorted(self.generators.items())}
        return out

    def build(self) -> AttackSpec:
        gens = {
            i: BiasGenerator(g.kind, g.value, list(g.indices), g.seed)
            for i, g in self.generators.items()
        }
        return AttackSpec(set(self.attacked), gens, self.start_iteration, self.corrupt_dual)


@dataclass
class DetectionConfig(_Section):
    method: str = "none"
    s: int = DEFAULT_WINDOW
    start: int = 3
    presence_tol: float = PRESENCE_TOL
    dual_rel_tol: float = DUAL_REL_TOL
    mitigate: bool = True


@dataclass
class OutputConfig(_Section):
    dir: str = "out"
    format: str = "csv"


@dataclass
class ExpectConfig(_Section):
    """Assertions checked by ``verify``; unset fields are skipped."""

    presence: bool | None = None
    identified: list[int] | None = None
    confirmed: bool | None = None
    confirmed_by: int | None = None
    max_mode_error: float | None = None
    min_mode_error: float | None = None


@dataclass
class ScenarioConfig(_Section):
    _nested: ClassVar[dict[str, type]] = {
        "signal": SignalConfig,
        "partition": PartitionConfig,
        "admm": AdmmConfig,
        "attack": AttackConfig,
        "detection": DetectionConfig,
        "output": OutputConfig,
        "expect": ExpectConfig,
    }

    name: str = "scenario"
    description: str = ""
    seed: int = 0
    signal: SignalConfig = field(default_factory=SignalConfig)
    partition: PartitionConfig = field(default_factory=PartitionConfig)
    admm: AdmmConfig = field(default_factory=AdmmConfig)
    attack: AttackConfig | None = None
    detection: DetectionConfig = field(default_factory=DetectionConfig)
    output: OutputConfig = field(default_factory=OutputConfig)
    expect: ExpectConfig = field(default_factory=ExpectConfig)

    def validate(self) -> None:
        N = self.partition.N
        n_modes = len(self.signal.modes)
        dim = 2 * n_modes
        p = len(self.signal.channels.residues) if self.signal.channels.residues is not None else self.signal.channels.count
        err = lambda msg: ConfigError(msg, self.name)  # noqa: E731
        if not 1 <= N <= p:
            raise err(f"partition.N={N} must be within 1..{p} (channel count)")
        if self.admm.protocol not in ("average", "rr"):
            raise err(f"admm.protocol must be 'average' or 'rr', got {self.admm.protocol!r}")
        if not self.admm.rho > 0 or not self.admm.rho_reduced > 0:
            raise err("admm.rho and admm.rho_reduced must be > 0")
        if self.admm.iters < 1:
            raise err("admm.iters must be >= 1")
        if self.admm.switch_at < 2:
            raise err("admm.switch_at must be >= 2 (iteration 1 runs the presence check)")
        if self.admm.order.kind == "explicit":
            for perm in self.admm.order.orders or [[]]:
                if sorted(perm) != list(range(1, N + 1)):
                    raise err(f"admm.order: {perm} is not a permutation of 1..{N}")
        method = self.detection.method
        if method != "none" and method not in METHODS:
            raise err(f"detection.method must be 'none' or one of {METHODS}, got {method!r}")
        if method in ("alg1", "alg3") and self.admm.protocol != "average":
            raise err(f"{method} needs admm.protocol 'average'")
        if self.detection.s < 1:
            raise err("detection.s must be >= 1")
        if self.output.format not in FORMATS:
            raise err(f"output.format must be one of {FORMATS}")
        if self.attack is not None:
            bad = [i for i in self.attack.attacked if not 1 <= i <= N]
            if bad:
                raise err(f"attack.attacked ids {bad} outside 1..{N}")
            for i, g in self.attack.generators.items():
                if g.kind not in BIAS_KINDS:
                    raise err(f"attack.generators.{i}.kind {g.kind!r} not in {BIAS_KINDS}")
                if any(not 0 <= j < dim for j in g.indices):
                    raise err(f"attack.generators.{i}.indices must lie in 0..{dim - 1}")
            try:
                self.attack.build().validate(N)
            except ValueError as exc:
                raise err(f"attack: {exc}") from exc

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    @classmethod
    def from_yaml(cls, text: str) -> "ScenarioConfig":
        try:
            data = yaml.safe_load(text)
        except yaml.YAMLError as exc:
            raise ConfigError(f"malformed YAML: {exc}") from exc
        cfg = cls.from_dict(data, "scenario")
        cfg.validate()
        return cfg


def load_config(path) -> ScenarioConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc.strerror or exc}") from exc
    try:
        return ScenarioConfig.from_yaml(text)
    except ConfigError as exc:
        exc.scenario = exc.scenario or str(path)
        raise


def save_config(cfg: ScenarioConfig, path) -> None:
    Path(path).write_text(cfg.to_yaml())


def shipped_scenarios() -> dict[str, Path]:
    """Name -> path for every scenario bundled with the package."""
    root = resources.files("pdcguard") / "scenarios"
    return {
        Path(str(p)).stem: Path(str(p))
        for p in sorted(root.iterdir(), key=lambda q: q.name)
        if p.name.endswith(".yaml")
    }


def resolve_scenario(ref: str) -> Path:
    """A file path, or the name of a bundled scenario."""
    path = Path(ref)
    if path.exists():
        return path
    shipped = shipped_scenarios()
    if ref in shipped:
        return shipped[ref]
    raise ConfigError(f"no scenario file or bundled scenario named {ref!r}", ref)


# ------------------------------------------------------------------ trace


def _record_to_dict(rec: IterationRecord) -> dict:
    return {
        "k": rec.k,
        "protocol": rec.protocol,
        "z": rec.z.tolist(),
        "a": {str(i): v.tolist() for i, v in sorted(rec.a.items())},
        "w": {str(i): v.tolist() for i, v in sorted(rec.w.items())},
        "rho": rec.rho,
        "excluded": list(rec.excluded),
        "source": rec.source,
        "rr_index": rec.rr_index,
    }


def _record_from_dict(d: dict) -> IterationRecord:
    return IterationRecord(
        k=int(d["k"]),
        protocol=d["protocol"],
        z=np.asarray(d["z"], dtype=float),
        a={int(i): np.asarray(v, dtype=float) for i, v in d["a"].items()},
        w={int(i): np.asarray(v, dtype=float) for i, v in d["w"].items()},
        rho=float(d["rho"]),
        excluded=tuple(d.get("excluded", ())),
        source=d.get("source"),
        rr_index=d.get("rr_index"),
    )


def _modes_to_list(modes: list[Mode]) -> list[list[float]]:
    return [[m.sigma, m.omega] for m in modes]


def _modes_from_list(rows) -> list[Mode]:
    return [Mode(float(s), float(w)) for s, w in rows]


@dataclass(eq=False)
class RunTrace:
    """Everything one scenario run produced."""

    scenario: str
    records: list[IterationRecord] = field(default_factory=list)
    report: DetectionReport | None = None
    modes: list[Mode] = field(default_factory=list)
    oracle_modes: list[Mode] = field(default_factory=list)
    planted_modes: list[Mode] = field(default_factory=list)
    mitigated_at: int | None = None
    active: list[int] = field(default_factory=list)

    def __post_init__(self):
        ks = [r.k for r in self.records]
        if ks != list(range(1, len(ks) + 1)):
            raise ValueError("trace iterations must run contiguously from 1")

    @property
    def mode_error(self) -> float:
        """Worst (sigma, omega) deviation from the planted modes; inf if any is missing."""
        cmp = compare_modes(self.modes, self.planted_modes)
        return math.inf if cmp.missing else cmp.max_error

    @property
    def oracle_error(self) -> float:
        cmp = compare_modes(self.modes, self.oracle_modes)
        return math.inf if cmp.missing else cmp.max_error

    def to_dict(self) -> dict:
        return {
            "scenario": self.scenario,
            "records": [_record_to_dict(r) for r in self.records],
            "report": None if self.report is None else self.report.to_dict(),
            "modes": _modes_to_list(self.modes),
            "oracle_modes": _modes_to_list(self.oracle_modes),
            "planted_modes": _modes_to_list(self.planted_modes),
            "mitigated_at": self.mitigated_at,
            "active": list(self.active),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunTrace":
        return cls(
            scenario=d["scenario"],
            records=[_record_from_dict(r) for r in d["records"]],
            report=None if d.get("report") is None else DetectionReport.from_dict(d["report"]),
            modes=_modes_from_list(d.get("modes", [])),
            oracle_modes=_modes_from_list(d.get("oracle_modes", [])),
            planted_modes=_modes_from_list(d.get("planted_modes", [])),
            mitigated_at=d.get("mitigated_at"),
            active=list(d.get("active", [])),
        )

    def __eq__(self, other) -> bool:
        if not isinstance(other, RunTrace):
            return NotImplemented
        return self.to_dict() == other.to_dict()

    def summary(self) -> dict:
        rep = self.report
        return {
            "scenario": self.scenario,
            "iterations": len(self.records),
            "method": rep.method if rep else None,
            "presence": rep.presence if rep else None,
            "status": rep.status if rep else None,
            "identified": sorted(rep.identified_malicious) if rep else [],
            "confirmed_at_iteration": rep.confirmed_at_iteration if rep else None,
            "mitigated_at": self.mitigated_at,
            "mode_error": self.mode_error,
            "oracle_mode_error": self.oracle_error,
        }


# ----------------------------------------------------------------- driver


def _identifier(cfg: ScenarioConfig, loop: ConsensusLoop, order: RoundOrder):
    det = cfg.detection
    m = det.method
    if m == "alg1":
        return GroupingIdentifier(s=det.s, start=det.start, method="alg1")
    if m == "alg3":
        loop.set_rho(cfg.admm.rho_reduced)
        if cfg.admm.restart_on_reduce:
            loop.restart()
        return GroupingIdentifier(s=det.s, start=max(det.start, loop.k + 1), method="alg3")
    if m in ("alg2", "rr-random"):
        return RRNormIdentifier(order.N, s=det.s, method=m)
    if m == "alg4":
        return DualDifferenceIdentifier(order.N, s=det.s, rel_tol=det.dual_rel_tol)
    return None


def run_scenario(cfg: ScenarioConfig) -> RunTrace:
    """Run the whole pipeline for one scenario, deterministically."""
    cfg.validate()
    try:
        return _run(cfg)
    except HarnessError:
        raise
    except (ValueError, ArithmeticError, np.linalg.LinAlgError, RuntimeError) as exc:
        raise ScenarioError(f"{type(exc).__name__}: {exc}", cfg.name) from exc


def _run(cfg: ScenarioConfig) -> RunTrace:
    spec = cfg.signal.build(cfg.seed)
    sig = synth_ringdown(spec)
    part = partition_channels(sig.num_channels, cfg.partition.N, cfg.partition.policy)
    n = len(spec.modes)
    blocks = [build_area_block(sig, chs, n, area_id=i) for i, chs in enumerate(part.assignment, start=1)]
    order = cfg.admm.order.build(cfg.partition.N, cfg.admm.alpha, cfg.seed)
    attack = cfg.attack.build() if cfg.attack is not None else None

    loop = ConsensusLoop(blocks, rho=cfg.admm.rho, protocol=cfg.admm.protocol, order=order, attack=attack)
    det = cfg.detection
    budget = cfg.admm.iters

    first = loop.step()
    presence = detect_presence([first.w[i] for i in sorted(first.w)], first.rho, det.presence_tol)
    report = DetectionReport(method=det.method, presence=presence.flag,
                             presence_evidence=presence.mean_dual.tolist(),
                             status="unconfirmed" if presence.flag else "no-attack")
    ident = None
    if det.method != "none" and presence.flag:
        ident = _identifier(cfg, loop, order)
        if ident is not None and det.method == "alg4":
            ident.observe(first)
    pending_switch = ident is not None and det.method in RR_METHODS
    mitigated_at = None

    while loop.k < budget:
        if pending_switch and loop.k + 1 == cfg.admm.switch_at:
            loop.switch_protocol("rr", order)
            pending_switch = False
        rec = loop.step()
        if ident is None or mitigated_at is not None:
            continue
        if ident.observe(rec):
            if det.mitigate and ident.report.identified_malicious:
                mitigate(loop, ident.report.identified_malicious)
                mitigated_at = rec.k

    if ident is not None:
        report = ident.report
        report.presence_evidence = presence.mean_dual.tolist()

    honest = stack_blocks([blocks[i - 1] for i in loop.active])
    T = spec.sample_period
    return RunTrace(
        scenario=cfg.name,
        records=list(loop.trace),
        report=report,
        modes=modes_from_regression(loop.z, T),
        oracle_modes=modes_from_regression(solve_regression(honest), T),
        planted_modes=list(spec.modes),
        mitigated_at=mitigated_at,
        active=list(loop.active),
    )


# ----------------------------------------------------------------- export


def trace_rows(trace: RunTrace):
    """CSV rows: per iteration every PDC's ``a`` then ``w``, then the broadcast ``z``."""
    for rec in trace.records:
        for i in sorted(set(rec.a) | set(rec.w)):
            for var, vecs in (("a", rec.a), ("w", rec.w)):
                if i in vecs:
                    for j, v in enumerate(vecs[i]):
                        yield rec.k, i, var, j, repr(float(v))
        for j, v in enumerate(rec.z):
            yield rec.k, "supervisor", "z", j, repr(float(v))


def trace_to_csv(trace: RunTrace) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    writer.writerows(trace_rows(trace))
    return buf.getvalue()


def trace_to_json(trace: RunTrace) -> str:
    return json.dumps(trace.to_dict(), sort_keys=True, indent=1) + "\n"


def trace_from_json(text: str) -> RunTrace:
    return RunTrace.from_dict(json.loads(text))


def _write(path: Path, text: str) -> None:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text)
    except OSError as exc:
        raise ExportError(f"cannot write {path}: {exc.strerror or exc}") from exc


def export_trace(trace: RunTrace, format: str, path) -> list[Path]:
    """Write ``trace`` under directory ``path``; returns the files written.

    ``csv`` gives ``<name>.trace.csv`` plus ``<name>.report.json`` with the
    detection report and modes; ``json`` gives one ``<name>.trace.json``.
    """
    if format not in FORMATS:
        raise ExportError(f"unknown export format {format!r}; expected one of {FORMATS}")
    out = Path(path)
    if format == "json":
        target = out / f"{trace.scenario}.trace.json"
        _write(target, trace_to_json(trace))
        return [target]
    data = trace.to_dict()
    data.pop("records")
    csv_path = out / f"{trace.scenario}.trace.csv"
    rep_path = out / f"{trace.scenario}.report.json"
    _write(csv_path, trace_to_csv(trace))
    _write(rep_path, json.dumps(data, sort_keys=True, indent=1) + "\n")
    return [csv_path, rep_path]


def load_trace(path) -> RunTrace:
    path = Path(path)
    try:
        return trace_from_json(path.read_text())
    except OSError as exc:
        raise ExportError(f"cannot read {path}: {exc.strerror or exc}") from exc


# ----------------------------------------------------------------- verify


def check_expectations(cfg: ScenarioConfig, trace: RunTrace) -> list[dict]:
    """Evaluate the scenario's ``expect`` block against a finished run."""
    exp, rep = cfg.expect, trace.report
    checks = []

    def add(name, expected, actual, passed):
        checks.append({"check": name, "expected": expected, "actual": actual, "passed": bool(passed)})

    if exp.presence is not None:
        add("presence", exp.presence, rep.presence, rep.presence == exp.presence)
    if exp.identified is not None:
        got = sorted(rep.identified_malicious)
        add("identified", sorted(exp.identified), got, got == sorted(exp.identified))
    if exp.confirmed is not None:
        add("confirmed", exp.confirmed, rep.confirmed, rep.confirmed == exp.confirmed)
    if exp.confirmed_by is not None:
        at = rep.confirmed_at_iteration
        add("confirmed_by", exp.confirmed_by, at, at is not None and at <= exp.confirmed_by)
    err = trace.mode_error
    if exp.max_mode_error is not None:
        add("max_mode_error", exp.max_mode_error, err, err <= exp.max_mode_error)
    if exp.min_mode_error is not None:
        add("min_mode_error", exp.min_mode_error, err, err >= exp.min_mode_error)
    return checks

