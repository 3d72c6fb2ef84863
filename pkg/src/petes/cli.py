"""``petes`` command line.

    petes run --scenario S [--policy P] --seed N [--seed M ...] --out DIR
              [--mode pipeline|ab_experiment|validate] [--ledger FILE ...]
    petes report DIR

Exit codes: 0 ok, 1 nothing to report, 2 bad config or missing file,
3 policy unsatisfiable, 4 invariant violation.
"""

from __future__ import annotations

import argparse
import glob
import json
import os
import sys
from dataclasses import dataclass, field
from statistics import fmean

from .adversary import VantageSet, dump_records, feedback, linkability, metrics_records
from .chain_core import Ledger, LedgerError, validate_chain
from .config import ConfigError, load_scenario
from .pam import Policy, PolicyError, PolicyUnsatisfiable, load_policy
from .relay_sim import ScenarioResult, run_direct, run_scenario
from .topology import TopologyError

EXIT_OK, EXIT_EMPTY, EXIT_CONFIG, EXIT_UNSAT, EXIT_INVARIANT = 0, 1, 2, 3, 4
MODES = ("pipeline", "ab_experiment", "validate")
VANTAGE = "entry_exit_links"


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


@dataclass
class RunSpec:
    scenario: str | None
    policy: str | None
    seeds: list[int]
    out: str
    mode: str = "pipeline"
    ledgers: list[str] = field(default_factory=list)

    def check(self) -> None:
        if self.mode == "validate":
            if not self.ledgers and not self.out:
                raise CliError(EXIT_CONFIG, "validate needs --ledger or --out")
            for p in self.ledgers:
                if not os.path.isfile(p):
                    raise CliError(EXIT_CONFIG, f"ledger file not found: {p}")
            return
        if self.scenario is None:
            raise CliError(EXIT_CONFIG, "--scenario is required")
        if not os.path.isfile(self.scenario):
            raise CliError(EXIT_CONFIG, f"scenario file not found: {self.scenario}")
        if self.policy is not None and not os.path.isfile(self.policy):
            raise CliError(EXIT_CONFIG, f"policy file not found: {self.policy}")
        if not self.seeds:
            raise CliError(EXIT_CONFIG, "at least one --seed is required")
        if not self.out:
            raise CliError(EXIT_CONFIG, "--out is required")


def _load(spec: RunSpec, seed: int):
    try:
        sf = load_scenario(spec.scenario, seed)
    except (ConfigError, TopologyError) as exc:
        raise CliError(EXIT_CONFIG, f"config error: {exc}") from None
    path = spec.policy or sf.policy_path
    if path is None:
        return sf.scenario, Policy()
    if not os.path.isfile(path):
        raise CliError(EXIT_CONFIG, f"policy file not found: {path}")
    try:
        return sf.scenario, load_policy(path)
    except PolicyError as exc:
        raise CliError(EXIT_CONFIG, f"config error: {exc}") from None


def _check_invariants(result: ScenarioResult, seed: int) -> None:
    for name, ledger in (("core", result.core), ("side", result.side)):
        verdict = validate_chain(ledger)
        if not verdict:
            raise CliError(EXIT_INVARIANT, f"invariant violation (seed {seed}, {name}): {verdict}")


def run_seed(spec: RunSpec, seed: int) -> dict[str, bytes]:
    """Run one seed and return its artifact files (name -> bytes)."""
    scenario, policy = _load(spec, seed)
    try:
        gor = run_scenario(scenario, policy)
    except PolicyUnsatisfiable as exc:
        raise CliError(EXIT_UNSAT, f"policy unsatisfiable (seed {seed}): {exc}") from None
    _check_invariants(gor, seed)
    vantage = VantageSet.entry_exit_links(gor.topology, gor.trace)
    records = [{"record": "run", "mode": spec.mode, **gor.metrics}]
    arms = [("gor", gor)]
    if spec.mode == "ab_experiment":
        arms.append(("direct", run_direct(scenario)))
    for arm, res in arms:
        rec = metrics_records(seed, arm, VANTAGE, linkability(res, vantage), res)
        records.append({"record": "score", **rec})
    updated = feedback(gor, vantage)
    records.append({"record": "policy", "seed": seed, "updated": updated.to_text()})
    files = gor.artifacts()
    files["metrics.ndjson"] = dump_records(records).encode()
    return files


def _write(out: str, seed: int, files: dict[str, bytes]) -> None:
    d = os.path.join(out, str(seed))
    os.makedirs(d, exist_ok=True)
    for name, data in sorted(files.items()):
        with open(os.path.join(d, name), "wb") as fh:
            fh.write(data)


def validate_files(paths: list[str]) -> list[str]:
    """One diagnostic per ledger file that fails to load or validate."""
    problems = []
    for p in paths:
        try:
            with open(p, encoding="utf-8") as fh:
                ledger = Ledger.from_export(fh.read())
        except (OSError, LedgerError, ValueError, KeyError) as exc:
            problems.append(f"{p}: unreadable ledger: {exc}")
            continue
        verdict = validate_chain(ledger)
        if not verdict:
            problems.append(f"{p}: {verdict}")
    return problems


def run(spec: RunSpec, out=None) -> int:
    out = out or sys.stdout
    spec.check()
    if spec.mode == "validate":
        paths = spec.ledgers or sorted(glob.glob(os.path.join(spec.out, "*", "*.ledger")))
        if not paths:
            raise CliError(EXIT_CONFIG, f"no ledger files under {spec.out}")
        problems = validate_files(paths)
        for msg in problems:
            print(f"invariant violation: {msg}", file=sys.stderr)
        print(f"validated {len(paths) - len(problems)}/{len(paths)} ledgers", file=out)
        return EXIT_INVARIANT if problems else EXIT_OK
    for seed in spec.seeds:
        files = run_seed(spec, seed)
        _write(spec.out, seed, files)
        print(f"seed {seed}: wrote {os.path.join(spec.out, str(seed))}", file=out)
    return EXIT_OK


# -- report ------------------------------------------------------------------


def load_records(directory: str) -> list[dict]:
    records = []
    for path in sorted(glob.glob(os.path.join(directory, "*", "metrics.ndjson"))):
        with open(path, encoding="utf-8") as fh:
            records += [json.loads(line) for line in fh if line.strip()]
    return records


def summarize(records: list[dict]) -> tuple[list[str], dict[int, dict[str, dict]], dict[str, dict[str, float]]]:
    """(arms, per-seed rows, per-arm means) from score records."""
    rows: dict[int, dict[str, dict]] = {}
    for r in records:
        if r.get("record") == "score":
            rows.setdefault(r["seed"], {})[r["arm"]] = r
    arms = sorted({arm for row in rows.values() for arm in row}, key=lambda a: (a != "gor", a))
    means = {}
    for arm in arms:
        got = [row[arm] for row in rows.values() if arm in row]
        means[arm] = {k: fmean(float(g[k]) for g in got) for k in ("score", "delivered", "drops")}
    return arms, rows, means


def report(directory: str, out=None) -> int:
    out = out or sys.stdout
    if not os.path.isdir(directory):
        raise CliError(EXIT_CONFIG, f"metrics directory not found: {directory}")
    arms, rows, means = summarize(load_records(directory))
    if not rows:
        print("no runs found", file=out)
        return EXIT_EMPTY
    cols = [f"{arm}.{k}" for arm in arms for k in ("score", "delivered", "drops")]
    width = max(12, *(len(c) + 2 for c in cols))
    print("seed".ljust(8) + "".join(c.rjust(width) for c in cols), file=out)

    def cell(v, fmt):
        return (fmt.format(v) if v is not None else "-").rjust(width)

    for seed in sorted(rows):
        line = str(seed).ljust(8)
        for arm in arms:
            r = rows[seed].get(arm)
            line += cell(r and r["score"], "{:.4f}")
            line += cell(r and r["delivered"], "{}")
            line += cell(r and r["drops"], "{}")
        print(line, file=out)
    line = "mean".ljust(8)
    for arm in arms:
        m = means[arm]
        line += cell(m["score"], "{:.4f}") + cell(m["delivered"], "{:.2f}") + cell(m["drops"], "{:.2f}")
    print(line, file=out)
    return EXIT_OK


# -- entry point ---------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        sys.exit(EXIT_CONFIG)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="petes", description="Privacy-enhancing transaction pipeline simulator.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    r = sub.add_parser("run", help="run scenarios and write artifacts")
    r.add_argument("--scenario")
    r.add_argument("--policy")
    r.add_argument("--seed", type=int, action="append", default=[], dest="seeds")
    r.add_argument("--out", default="")
    r.add_argument("--mode", choices=MODES, default="pipeline")
    r.add_argument("--ledger", action="append", default=[], dest="ledgers",
                   help="ledger export to check in validate mode (repeatable)")
    rep = sub.add_parser("report", help="summarize metrics under a run directory")
    rep.add_argument("directory")
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "report":
            return report(args.directory)
        spec = RunSpec(args.scenario, args.policy, args.seeds, args.out, args.mode, args.ledgers)
        return run(spec)
    except CliError as exc:
        print(f"petes: {exc}", file=sys.stderr)
        return exc.code
    except OSError as exc:
        print(f"petes: {exc.filename or ''}: {exc.strerror}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
