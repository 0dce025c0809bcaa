import json
import subprocess
import sys

from pdcguard.cli import EXIT_CONFIG, EXIT_VERIFY, main


def _run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def test_list_scenarios(capsys):
    code, out, _ = _run(capsys, "list-scenarios")
    rows = json.loads(out)
    assert code == 0
    assert [r["name"] for r in rows][:3] == ["case1", "case2", "case3"]
    assert {r["method"] for r in rows} >= {"alg1", "alg2", "alg3", "alg4", "rr-random"}


def test_run_exports_and_summarises(capsys, tmp_path):
    code, out, _ = _run(capsys, "run", "--scenario", "case3", "--out", str(tmp_path), "--iters", "40")
    summary = json.loads(out)
    assert code == 0
    assert summary["identified"] == [2, 3] and summary["iterations"] == 40
    assert (tmp_path / "case3.trace.csv").exists()


def test_run_json_format(capsys, tmp_path):
    code, out, _ = _run(capsys, "run", "--scenario", "case8", "--out", str(tmp_path), "--format", "json", "--iters", "30")
    assert code == 0
    data = json.loads((tmp_path / "case8.trace.json").read_text())
    assert len(data["records"]) == 30


def test_run_from_path(capsys, tmp_path):
    cfg = tmp_path / "mine.yaml"
    cfg.write_text("name: mine\nadmm: {iters: 5}\n")
    code, out, _ = _run(capsys, "run", "--scenario", str(cfg), "--out", str(tmp_path))
    assert code == 0 and json.loads(out)["status"] == "no-attack"


def test_verify_pass_and_fail(capsys, tmp_path):
    code, out, _ = _run(capsys, "verify", "--scenario", "case7")
    assert code == 0 and json.loads(out)["passed"]
    bad = tmp_path / "bad.yaml"
    bad.write_text("name: bad\nadmm: {iters: 5}\nexpect: {presence: true}\n")
    code, out, _ = _run(capsys, "verify", "--scenario", str(bad))
    assert code == EXIT_VERIFY and not json.loads(out)["passed"]


def test_errors_are_machine_readable(capsys, tmp_path):
    code, _, err = _run(capsys, "run", "--scenario", "nope")
    rec = json.loads(err)
    assert code == EXIT_CONFIG and rec["error"] == "config-error" and rec["scenario"] == "nope"
    code, _, err = _run(capsys, "frobnicate")
    assert code == EXIT_CONFIG and json.loads(err)["error"] == "config-error"
    bad = tmp_path / "alias.yaml"
    bad.write_text("name: alias\nsignal: {sample_period: 1.0}\n")
    code, _, err = _run(capsys, "run", "--scenario", str(bad), "--out", str(tmp_path))
    assert code == 1 and json.loads(err)["error"] == "scenario-error"


def test_module_entry_point(tmp_path):
    proc = subprocess.run(
        [sys.executable, "-m", "pdcguard", "run", "--scenario", "case1", "--iters", "3", "--out", str(tmp_path)],
        capture_output=True, text=True, check=False,
    )
    assert proc.returncode == 0, proc.stderr
    assert json.loads(proc.stdout)["scenario"] == "case1"
