import hashlib
import json
from pathlib import Path
from statistics import fmean

import pytest

from petes.cli import load_records, main, summarize

SCENARIOS = Path(__file__).resolve().parent.parent / "scenarios"


def run(*argv):
    return main([str(a) for a in argv])


def digests(out: Path) -> dict[str, str]:
    return {str(p.relative_to(out)): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(out.rglob("*")) if p.is_file()}


def test_missing_scenario_exit_2(tmp_path, capsys):
    code = run("run", "--scenario", tmp_path / "nope.scn", "--seed", 1, "--out", tmp_path)
    assert code == 2
    assert "nope.scn" in capsys.readouterr().err


def test_unknown_flag_is_error(capsys):
    with pytest.raises(SystemExit) as ei:
        run("run", "--scenario", "x", "--frobnicate")
    assert ei.value.code == 2
    assert "unrecognized" in capsys.readouterr().err


def test_no_seed_is_error(tmp_path):
    assert run("run", "--scenario", SCENARIOS / "mesh4.scn", "--out", tmp_path) == 2


def test_pipeline_writes_artifacts(tmp_path):
    out = tmp_path / "out"
    assert run("run", "--scenario", SCENARIOS / "mesh4.scn", "--seed", 1, "--seed", 2, "--out", out) == 0
    for seed in ("1", "2"):
        names = sorted(p.name for p in (out / seed).iterdir())
        assert names == ["core.ledger", "metrics.ndjson", "side.ledger", "trace.ndjson"]
    recs = [json.loads(line) for line in (out / "1" / "metrics.ndjson").read_text().splitlines()]
    assert {r["record"] for r in recs} == {"run", "score", "policy"}
    assert [r["arm"] for r in recs if r["record"] == "score"] == ["gor"]


def test_same_runspec_identical_artifacts(tmp_path):
    args = ["run", "--scenario", SCENARIOS / "mesh4.scn", "--seed", 3, "--mode", "ab_experiment"]
    assert run(*args, "--out", tmp_path / "a") == 0
    assert run(*args, "--out", tmp_path / "b") == 0
    assert digests(tmp_path / "a") == digests(tmp_path / "b")


def test_validate_mode(tmp_path, capsys):
    out = tmp_path / "out"
    run("run", "--scenario", SCENARIOS / "mesh4.scn", "--seed", 1, "--out", out)
    assert run("run", "--mode", "validate", "--out", out) == 0
    assert run("run", "--mode", "validate", "--ledger", out / "1" / "core.ledger") == 0
    bad = tmp_path / "bad.ledger"
    lines = (out / "1" / "core.ledger").read_text().splitlines()
    rec = json.loads(lines[1])
    rec["txs"][0]["amount"] += 1
    lines[1] = json.dumps(rec)
    bad.write_text("\n".join(lines) + "\n")
    assert run("run", "--mode", "validate", "--ledger", bad) == 4
    assert "tx_root" in capsys.readouterr().err
    assert run("run", "--mode", "validate", "--ledger", tmp_path / "none.ledger") == 2


def test_policy_unsatisfiable_exit_3(tmp_path, capsys):
    pol = tmp_path / "p.policy"
    pol.write_text("n_paths = 5\n")
    code = run("run", "--scenario", SCENARIOS / "mesh4.scn", "--policy", pol, "--seed", 1, "--out", tmp_path)
    assert code == 3
    assert "unsatisfiable" in capsys.readouterr().err


def test_bad_policy_file_exit_2(tmp_path, capsys):
    pol = tmp_path / "p.policy"
    pol.write_text("n_paths = 1\nshade = grey\n")
    code = run("run", "--scenario", SCENARIOS / "mesh4.scn", "--policy", pol, "--seed", 1, "--out", tmp_path)
    assert code == 2
    assert "p.policy:2" in capsys.readouterr().err


def test_bad_scenario_exit_2(tmp_path, capsys):
    scn = tmp_path / "s.scn"
    scn.write_text("mesh relays=2\nwarp 9\n")
    assert run("run", "--scenario", scn, "--seed", 1, "--out", tmp_path / "o") == 2
    assert "s.scn:2" in capsys.readouterr().err


def test_invariant_violation_exit_4(tmp_path, monkeypatch, capsys):
    from petes import cli
    from petes.chain_core import Violation

    monkeypatch.setattr(cli, "validate_chain", lambda led: Violation(1, "tx_root", "forced"))
    code = run("run", "--scenario", SCENARIOS / "mesh4.scn", "--seed", 1, "--out", tmp_path)
    assert code == 4
    assert "invariant violation" in capsys.readouterr().err


def test_crash_scenario_runs(tmp_path):
    assert run("run", "--scenario", SCENARIOS / "crash.scn", "--seed", 1, "--out", tmp_path) == 0


def test_report_empty(tmp_path, capsys):
    assert run("report", tmp_path) == 1
    assert "no runs found" in capsys.readouterr().out


def test_report_missing_dir(tmp_path):
    assert run("report", tmp_path / "absent") == 2


def test_report_two_arms_and_means(tmp_path, capsys):
    out = tmp_path / "out"
    seeds = [1, 2, 3]
    args = ["run", "--scenario", SCENARIOS / "mesh4.scn", "--mode", "ab_experiment", "--out", out]
    for s in seeds:
        args += ["--seed", s]
    assert run(*args) == 0
    capsys.readouterr()
    assert run("report", out) == 0
    table = capsys.readouterr().out.splitlines()
    header = table[0].split()
    assert "gor.score" in header and "direct.score" in header
    assert len(table) == 1 + len(seeds) + 1
    raw = [json.loads(l) for s in seeds for l in (out / str(s) / "metrics.ndjson").read_text().splitlines()]
    for arm in ("gor", "direct"):
        want = fmean(r["score"] for r in raw if r["record"] == "score" and r["arm"] == arm)
        col = header.index(f"{arm}.score")
        assert float(table[-1].split()[col]) == pytest.approx(want, abs=1e-4)
    _, _, means = summarize(load_records(str(out)))
    assert means["direct"]["score"] == 1.0


def test_python_m_entry(tmp_path):
    import subprocess
    import sys

    r = subprocess.run([sys.executable, "-m", "petes", "report", str(tmp_path)], capture_output=True, text=True)
    assert r.returncode == 1 and "no runs found" in r.stdout

