"""Command-line entry point (``ambient``)."""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path
from typing import Any, Sequence

from .audit import AuditLog, verify_file
from .config import CONFIG_ENV, bundled_scenario
from .initiative import ConfigError, Thresholds
from .memory import LongTermStore, MemoryStoreError
from .policy import lint_policy

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _scenario_path(arg: str) -> Path:
    p = Path(arg)
    if p.exists():
        return p
    try:
        return bundled_scenario(arg)
    except FileNotFoundError:
        raise UsageError(f"no such scenario file or bundled scenario: {arg}") from None


def _overrides(args: argparse.Namespace) -> dict[str, Any]:
    out: dict[str, Any] = {}
    if getattr(args, "dedup_window_ms", None) is not None:
        out["dedup_window_ms"] = args.dedup_window_ms
    if getattr(args, "initiative_thresholds", None):
        try:
            Thresholds.parse(args.initiative_thresholds)
        except (ConfigError, ValueError) as exc:
            raise UsageError(f"--initiative-thresholds: {exc}") from None
        out["initiative_thresholds"] = args.initiative_thresholds
    return out


def cmd_sim_run(args: argparse.Namespace) -> int:
    from .simulator import ScenarioError, emit_report, load_scenario, run_scenario

    try:
        scenario = load_scenario(_scenario_path(args.scenario))
    except ScenarioError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    report = run_scenario(scenario, seed=args.seed, overrides=_overrides(args), audit_path=args.audit)
    if args.report:
        Path(args.report).write_bytes(emit_report(report, "json"))
    sys.stdout.buffer.write(emit_report(report, args.format))
    return EXIT_OK if report.passed else EXIT_FAIL


def cmd_sim_validate(args: argparse.Namespace) -> int:
    from .simulator import ScenarioError, load_scenario

    try:
        scenario = load_scenario(_scenario_path(args.scenario))
    except ScenarioError as exc:
        print(f"invalid: {exc}")
        return EXIT_FAIL
    print(f"ok: {scenario.scenario_id}: {len(scenario.events)} events, {len(scenario.assertions)} assertions")
    return EXIT_OK


def cmd_sim_serve(args: argparse.Namespace) -> int:
    from .live import serve
    from .simulator import Scenario, build_engine, load_scenario

    wiring = load_scenario(_scenario_path(args.scenario)) if args.scenario else Scenario("live", ())
    engine = build_engine(wiring, seed=args.seed, overrides=_overrides(args), audit_path=args.audit)
    print(f"listening on {args.socket}", file=sys.stderr)
    try:
        serve(args.socket, engine, max_connections=args.max_connections)
    except KeyboardInterrupt:
        pass
    return EXIT_OK


def cmd_audit_verify(args: argparse.Namespace) -> int:
    try:
        result = verify_file(args.file)
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    if result.ok:
        print(f"ok: {result.entries} entries")
        return EXIT_OK
    print(f"FAIL at seq {result.failed_seq}: {result.reason}")
    return EXIT_FAIL


def cmd_policy_lint(args: argparse.Namespace) -> int:
    try:
        doc = json.loads(Path(args.table).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    problems = lint_policy(doc["entries"] if isinstance(doc, dict) and "entries" in doc else doc)
    for problem in problems:
        print(problem)
    if not problems:
        print("ok")
    return EXIT_FAIL if problems else EXIT_OK


def _default_store() -> str:
    root = os.environ.get(CONFIG_ENV)
    return str(Path(root) / "memory.jsonl") if root else "memory.jsonl"


def cmd_memory(args: argparse.Namespace) -> int:
    store_path = args.store or _default_store()
    audit = AuditLog.resume(args.audit or str(Path(store_path).with_suffix(".audit.jsonl")))
    store = LongTermStore.load(store_path, audit=audit.append)
    try:
        result = store.request(args.user, args.action, args.entry, args.body, now_ms=args.now_ms)
    except MemoryStoreError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL
    if args.action == "list":
        for entry in result:
            print(json.dumps(entry.to_dict(), sort_keys=True))
    else:
        store.save(store_path)
        print(f"{args.action}d {result.entry_id}" if args.action == "delete" else f"corrected {result.entry_id}")
    return EXIT_OK


def _run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=None, help="override the scenario seed")
    p.add_argument("--dedup-window-ms", type=int, default=None, help="dedup window for every source")
    p.add_argument("--initiative-thresholds", default=None, metavar="H,S,P,A", help="hint,suggest,prefill,act thresholds")
    p.add_argument("--audit", default=None, help="write the audit chain to this JSONL file")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ambient", description="Ambient-context orchestration engine tools.")
    top = parser.add_subparsers(dest="group", required=True)

    sim = top.add_parser("sim", help="scenario simulator").add_subparsers(dest="command", required=True)
    run = sim.add_parser("run", help="replay a scenario and check its assertions")
    run.add_argument("scenario", help="scenario file or bundled scenario name")
    run.add_argument("--report", default=None, help="write the canonical JSON report here")
    run.add_argument("--format", choices=("text", "json"), default="text")
    _run_flags(run)
    run.set_defaults(func=cmd_sim_run)

    val = sim.add_parser("validate", help="parse and validate a scenario")
    val.add_argument("scenario")
    val.set_defaults(func=cmd_sim_validate)

    srv = sim.add_parser("serve", help="live mode on a local socket")
    srv.add_argument("--socket", required=True)
    srv.add_argument("--scenario", default=None, help="take surfaces, fixtures and config from this scenario")
    srv.add_argument("--max-connections", type=int, default=None, help=argparse.SUPPRESS)
    _run_flags(srv)
    srv.set_defaults(func=cmd_sim_serve)

    audit = top.add_parser("audit", help="audit log tools").add_subparsers(dest="command", required=True)
    ver = audit.add_parser("verify", help="verify a hash-chained audit file")
    ver.add_argument("file")
    ver.set_defaults(func=cmd_audit_verify)

    policy = top.add_parser("policy", help="policy table tools").add_subparsers(dest="command", required=True)
    lint = policy.add_parser("lint", help="check a policy table")
    lint.add_argument("table")
    lint.set_defaults(func=cmd_policy_lint)

    mem = top.add_parser("memory", help="long-term memory transparency requests")
    mem.add_argument("action", choices=("list", "delete", "correct"))
    mem.add_argument("--user", required=True)
    mem.add_argument("--entry", default=None, help="entry id (delete, correct)")
    mem.add_argument("--body", default=None, help="replacement text (correct)")
    mem.add_argument("--store", default=None, help=f"memory JSONL (default: ${CONFIG_ENV}/memory.jsonl)")
    mem.add_argument("--audit", default=None, help="audit chain to extend (default: next to the store)")
    mem.add_argument("--now-ms", type=int, default=0)
    mem.set_defaults(func=cmd_memory)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    if args.group == "memory" and args.action in ("delete", "correct") and not args.entry:
        print("error: --entry is required for delete and correct", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
