"""Command line entry point: ``run``, ``list-scenarios`` and ``verify``.

Results go to stdout as JSON. Failures print one JSON error record to stderr
and exit nonzero: 2 for bad usage or config, 3 for failed ``verify`` checks,
1 for anything raised while running.
"""

from __future__ import annotations

import argparse
import json
import sys

from pdcguard.harness import (
    FORMATS,
    ConfigError,
    HarnessError,
    ScenarioConfig,
    check_expectations,
    export_trace,
    load_config,
    resolve_scenario,
    run_scenario,
    shipped_scenarios,
)

EXIT_ERROR = 1
EXIT_CONFIG = 2
EXIT_VERIFY = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(f"usage: {message}")


def _parser() -> argparse.ArgumentParser:
    p = _Parser(prog="pdcguard", description="Run distributed mode-estimation attack scenarios.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    run = sub.add_parser("run", help="run one scenario and export its trace")
    run.add_argument("--scenario", required=True, help="YAML path or bundled scenario name")
    run.add_argument("--iters", type=int, help="iteration budget override")
    run.add_argument("--seed", type=int, help="master seed override")
    run.add_argument("--out", help="output directory override")
    run.add_argument("--format", choices=FORMATS, help="export format override")

    sub.add_parser("list-scenarios", help="list bundled scenarios")

    ver = sub.add_parser("verify", help="run a scenario and check its expect block")
    ver.add_argument("--scenario", required=True, help="YAML path or bundled scenario name")
    return p


def _load(ref: str, overrides: dict | None = None) -> ScenarioConfig:
    cfg = load_config(resolve_scenario(ref))
    if not overrides:
        return cfg
    data = cfg.to_dict()
    if overrides.get("iters") is not None:
        data["admm"]["iters"] = overrides["iters"]
    if overrides.get("seed") is not None:
        data["seed"] = overrides["seed"]
    if overrides.get("out") is not None:
        data["output"]["dir"] = overrides["out"]
    if overrides.get("format") is not None:
        data["output"]["format"] = overrides["format"]
    cfg = ScenarioConfig.from_dict(data, "scenario")
    cfg.validate()
    return cfg


def _cmd_run(args) -> int:
    cfg = _load(args.scenario, vars(args))
    trace = run_scenario(cfg)
    files = export_trace(trace, cfg.output.format, cfg.output.dir)
    out = trace.summary()
    out["files"] = [str(f) for f in files]
    print(json.dumps(out, sort_keys=True))
    return 0


def _cmd_list(_args) -> int:
    rows = []
    for name, path in shipped_scenarios().items():
        cfg = load_config(path)
        rows.append({"name": name, "method": cfg.detection.method, "description": cfg.description})
    print(json.dumps(rows, indent=1))
    return 0


def _cmd_verify(args) -> int:
    cfg = _load(args.scenario)
    trace = run_scenario(cfg)
    checks = check_expectations(cfg, trace)
    ok = all(c["passed"] for c in checks)
    print(json.dumps({"scenario": cfg.name, "passed": ok, "checks": checks}, sort_keys=True))
    return 0 if ok else EXIT_VERIFY


COMMANDS = {"run": _cmd_run, "list-scenarios": _cmd_list, "verify": _cmd_verify}


def main(argv: list[str] | None = None) -> int:
    try:
        args = _parser().parse_args(argv)
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(json.dumps(exc.to_record()), file=sys.stderr)
        return EXIT_CONFIG
    except HarnessError as exc:
        print(json.dumps(exc.to_record()), file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
