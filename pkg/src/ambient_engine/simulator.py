"""Scenario files, deterministic replay, assertion checking and reports."""

from __future__ import annotations

import json
import re
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence

from jsonschema import Draft7Validator

from .audit import AuditLog, verify_lines
from .context import Surface, canonical_json
from .engine import EVENT_KINDS, Engine, EngineConfig
from .memory import MemoryEntry


class ScenarioError(ValueError):
    pass


_OBJ = {"type": "object"}
_STR = {"type": "string"}
_INT = {"type": "integer", "minimum": 0}

EVENT_SCHEMAS: dict[str, dict[str, Any]] = {
    "session_start": {"required": ["session_id", "surface_id"], "properties": {"session_id": _STR, "surface_id": _STR}},
    "session_end": {},
    "sensor": {"required": ["signal"], "properties": {"signal": _OBJ}},
    "utterance": {"required": ["text"], "properties": {"text": _STR}},
    "auth": {"required": ["user_id", "auth_level"], "properties": {"user_id": _STR, "auth_level": {"enum": ["anonymous", "authenticated", "step_up"]}, "greet": {"type": "boolean"}}},
    "confirmation": {"properties": {"call_id": _STR}},
    "step_up": {"properties": {"method": _STR}},
    "dual_control": {"required": ["staff_id"], "properties": {"staff_id": _STR}},
    "verification": {"required": ["staff_id"], "properties": {"staff_id": _STR}},
    "staff_status": {"required": ["staff_id", "availability"], "properties": {"staff_id": _STR, "availability": {"enum": ["free", "busy", "offline"]}, "workload": _INT, "free_at_ms": _INT, "specializations": {"type": "array", "items": _STR}}},
    "risk_score": {"required": ["score"], "properties": {"score": {"type": "number", "minimum": 0, "maximum": 1}}},
    "consent_grant": {"required": ["purpose"], "properties": {"purpose": _STR, "ttl_ms": _INT, "expires_at_ms": _INT}},
    "tick": {},
    "transfer": {"required": ["target"], "properties": {"target": _STR, "ttl_ms": {"type": "integer", "minimum": 1}, "scope": {"type": "array", "items": _STR}}},
    "token_redeem": {"properties": {"token_index": {"type": "integer"}, "mutate_byte": _INT, "xor": {"type": "integer", "minimum": 1, "maximum": 255}}},
    "handoff_request": {"properties": {"topic": _STR}},
}

ASSERTION_KINDS = ("state_equals", "initiative_level", "surface_routing", "action_status", "audit_property", "transcript_contains", "handoff_target")

ASSERTION_SCHEMAS: dict[str, dict[str, Any]] = {
    "state_equals": {"required": ["variable", "value"], "properties": {"variable": _STR, "min_confidence": {"type": "number"}}},
    "initiative_level": {"required": ["trigger_id", "level"], "properties": {"trigger_id": _STR, "level": {"enum": ["silent", "hint", "suggest", "prefill", "act"]}}},
    "surface_routing": {"required": ["item_id"], "anyOf": [{"required": ["surface_id"]}, {"required": ["privacy"]}],
                        "properties": {"item_id": _STR, "surface_id": _STR, "privacy": {"enum": ["shared", "personal", "authenticated"]}, "placeholder_on": _STR}},
    "action_status": {"required": ["op_name", "status"], "properties": {"op_name": _STR, "status": _STR, "occurrence": {"type": "integer"}}},
    "audit_property": {"required": ["property"], "properties": {"property": {"enum": ["chain_verifies", "has_entry", "no_entry"]}, "match": _OBJ},
                       "if": {"properties": {"property": {"enum": ["has_entry", "no_entry"]}}}, "then": {"required": ["match"]}},
    "transcript_contains": {"required": ["text"], "properties": {"text": {"type": ["string", "array"], "items": _STR}, "role": {"enum": ["user", "assistant"]}, "session_id": _STR}},
    "handoff_target": {"required": ["staff_id"], "properties": {"staff_id": _STR}},
}

_EVENT_VALIDATORS = {k: Draft7Validator({"type": "object", **v}) for k, v in EVENT_SCHEMAS.items()}
_ASSERTION_VALIDATORS = {k: Draft7Validator({"type": "object", **v}) for k, v in ASSERTION_SCHEMAS.items()}


@dataclass(frozen=True)
class Assertion:
    kind: str
    payload: Mapping[str, Any]
    at_ms: int | None = None

    def to_dict(self) -> dict[str, Any]:
        return {"kind": self.kind, "at_ms": self.at_ms, **dict(self.payload)}


@dataclass(frozen=True)
class Scenario:
    scenario_id: str
    events: tuple[Mapping[str, Any], ...]
    assertions: tuple[Assertion, ...] = ()
    seed: int = 0
    surfaces: tuple[Surface, ...] = ()
    fixtures: Mapping[str, Any] = field(default_factory=dict)
    memory: tuple[MemoryEntry, ...] = ()
    config: Mapping[str, Any] = field(default_factory=dict)
    description: str = ""
    epoch_note: str = ""


def _event_lines(text: str, count: int) -> list[int | None]:
    """1-based line of each element of the top-level ``events`` array."""
    m = re.search(r'"events"\s*:\s*\[', text)
    if m is None:
        return [None] * count
    decoder = json.JSONDecoder()
    pos, lines = m.end(), []
    while len(lines) < count:
        while pos < len(text) and text[pos] in " \t\r\n,":
            pos += 1
        try:
            _, end = decoder.raw_decode(text, pos)
        except json.JSONDecodeError:
            break
        lines.append(text.count("\n", 0, pos) + 1)
        pos = end
    return lines if len(lines) == count else [None] * count


def _where(lines: list[int | None], i: int) -> str:
    return f"line {lines[i]}" if lines[i] is not None else f"event {i + 1}"


def parse_scenario(text: str, *, source: str = "<scenario>") -> Scenario:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"{source}: invalid JSON at line {exc.lineno}: {exc.msg}") from exc
    if not isinstance(doc, dict):
        raise ScenarioError(f"{source}: scenario must be a JSON object")
    for key in ("scenario_id", "events"):
        if key not in doc:
            raise ScenarioError(f"{source}: missing field: {key}")
    events = doc["events"]
    if not isinstance(events, list):
        raise ScenarioError(f"{source}: events must be a list")
    lines = _event_lines(text, len(events))
    last = -1
    for i, ev in enumerate(events):
        if not isinstance(ev, dict) or not isinstance(ev.get("at_ms"), int) or isinstance(ev.get("at_ms"), bool) or ev["at_ms"] < 0:
            raise ScenarioError(f"{source}: event needs a non-negative integer at_ms at {_where(lines, i)}")
        kind = ev.get("kind")
        if kind not in EVENT_KINDS:
            raise ScenarioError(f"{source}: unknown event kind {kind!r} at {_where(lines, i)}")
        errors = sorted(_EVENT_VALIDATORS[kind].iter_errors(ev), key=lambda e: list(map(str, e.path)))
        if errors:
            raise ScenarioError(f"{source}: invalid {kind} event at {_where(lines, i)}: {errors[0].message}")
        if ev["at_ms"] < last:
            raise ScenarioError(f"events out of order at {_where(lines, i)}")
        last = ev["at_ms"]

    assertions = []
    for i, a in enumerate(doc.get("assertions", [])):
        kind = a.get("kind") if isinstance(a, dict) else None
        if kind not in ASSERTION_KINDS:
            raise ScenarioError(f"{source}: assertion {i + 1}: unknown kind {kind!r}")
        errors = list(_ASSERTION_VALIDATORS[kind].iter_errors(a))
        if errors:
            raise ScenarioError(f"{source}: assertion {i + 1} ({kind}): {errors[0].message}")
        payload = {k: v for k, v in a.items() if k not in ("kind", "at_ms")}
        assertions.append(Assertion(kind, payload, a.get("at_ms")))

    try:
        surfaces = tuple(Surface.from_dict(s) for s in doc.get("surfaces", []))
        memory = tuple(MemoryEntry.from_dict(m) for m in doc.get("memory", []))
    except (KeyError, ValueError, TypeError) as exc:
        raise ScenarioError(f"{source}: invalid surfaces or memory: {exc}") from exc
    seed = doc.get("seed", 0)
    if not isinstance(seed, int):
        raise ScenarioError(f"{source}: seed must be an integer")
    return Scenario(
        scenario_id=doc["scenario_id"], events=tuple(events), assertions=tuple(assertions), seed=seed,
        surfaces=surfaces, fixtures=doc.get("fixtures", {}), memory=memory, config=doc.get("config", {}),
        description=doc.get("description", ""), epoch_note=doc.get("epoch_note", ""),
    )


def load_scenario(path: str | Path) -> Scenario:
    p = Path(path)
    return parse_scenario(p.read_text(encoding="utf-8"), source=str(p.name))


@dataclass
class RunReport:
    scenario_id: str
    seed: int
    timeline: list[dict[str, Any]]
    transcript: list[dict[str, Any]]
    decisions: list[dict[str, Any]]
    renders: list[dict[str, Any]]
    handoffs: list[dict[str, Any]]
    tokens: list[dict[str, Any]]
    calls: list[dict[str, Any]]
    stub_calls: list[dict[str, Any]]
    backend_calls: list[dict[str, Any]]
    ingest_rejections: list[dict[str, Any]]
    audit_lines: list[str]
    assertions: list[dict[str, Any]] = field(default_factory=list)
    wall_time_ms: float = 0.0  # not part of the canonical form

    @property
    def passed(self) -> bool:
        return all(a["passed"] for a in self.assertions)

    @property
    def audit_head(self) -> str:
        return json.loads(self.audit_lines[-1])["entry_digest"] if self.audit_lines else "0" * 64

    def to_dict(self) -> dict[str, Any]:
        return {
            "scenario_id": self.scenario_id,
            "seed": self.seed,
            "passed": self.passed,
            "assertions": self.assertions,
            "timeline": self.timeline,
            "transcript": self.transcript,
            "decisions": self.decisions,
            "renders": self.renders,
            "handoffs": self.handoffs,
            "tokens": self.tokens,
            "calls": self.calls,
            "stub_calls": self.stub_calls,
            "backend_calls": self.backend_calls,
            "ingest_rejections": self.ingest_rejections,
            "audit": {"entries": len(self.audit_lines), "head": self.audit_head},
        }


def build_engine(scenario: Scenario, *, seed: int | None = None, overrides: Mapping[str, Any] | None = None,
                 audit_path: str | Path | None = None) -> Engine:
    config = EngineConfig.load({**scenario.config, **(overrides or {})})
    return Engine(
        config, surfaces=scenario.surfaces, fixtures=scenario.fixtures, memory=scenario.memory,
        seed=scenario.seed if seed is None else seed, scenario_id=scenario.scenario_id, audit=AuditLog(audit_path),
    )


def report_from_engine(engine: Engine, scenario_id: str, seed: int) -> RunReport:
    calls = [c.to_dict() for s in engine.sessions.values() for c in s.calls.values()]
    return RunReport(
        scenario_id=scenario_id, seed=seed,
        timeline=list(engine.timeline), transcript=list(engine.transcript), decisions=list(engine.decisions),
        renders=list(engine.renders), handoffs=list(engine.handoffs), tokens=list(engine.tokens), calls=calls,
        stub_calls=list(engine.stubs.log),
        backend_calls=[{"op_name": op, "args": args} for op, args in engine.backend.calls],
        ingest_rejections=[r.to_dict() for r in engine.ingest_report.rejections],
        audit_lines=engine.audit.lines(),
    )


def run_scenario(scenario: Scenario, *, seed: int | None = None, overrides: Mapping[str, Any] | None = None,
                 audit_path: str | Path | None = None) -> RunReport:
    """Replay ``scenario`` on a fresh engine and check its assertions."""
    started = time.perf_counter()
    seed = scenario.seed if seed is None else seed
    engine = build_engine(scenario, seed=seed, overrides=overrides, audit_path=audit_path)
    for event in scenario.events:
        engine.process(event)
    report = report_from_engine(engine, scenario.scenario_id, seed)
    report.assertions = check_assertions(report, scenario)
    report.wall_time_ms = (time.perf_counter() - started) * 1000.0
    return report


# ------------------------------------------------------------------ checks

def _before(records: Sequence[Mapping[str, Any]], at_ms: int | None) -> list[Mapping[str, Any]]:
    return [r for r in records if at_ms is None or r["at_ms"] <= at_ms]


def _matches(entry: Mapping[str, Any], pattern: Mapping[str, Any]) -> bool:
    return all(entry.get(k) == v for k, v in pattern.items())


def _check(report: RunReport, a: Assertion) -> tuple[bool, Any, Any]:
    p = a.payload
    if a.kind == "state_equals":
        timeline = [t for t in _before(report.timeline, a.at_ms) if t["state"]]
        entry = timeline[-1]["state"].get(p["variable"]) if timeline else None
        actual = entry["value"] if entry else None
        ok = entry is not None and actual == p["value"] and entry["confidence"] >= p.get("min_confidence", 0.0)
        return ok, {"value": p["value"], "min_confidence": p.get("min_confidence", 0.0)}, entry
    if a.kind == "initiative_level":
        hits = [d for d in _before(report.decisions, a.at_ms) if d["kind"] == "initiative" and d["trigger_id"] == p["trigger_id"]]
        actual = hits[-1]["level"] if hits else None
        return actual == p["level"], p["level"], actual
    if a.kind == "surface_routing":
        shown = [r for r in _before(report.renders, a.at_ms) if r["item_id"] == p["item_id"] and r["kind"] == "item"]
        actual = sorted({(r["surface_id"], r["privacy"]) for r in shown})
        ok = bool(shown) and all(
            ("surface_id" not in p or r["surface_id"] == p["surface_id"]) and ("privacy" not in p or r["privacy"] == p["privacy"])
            for r in shown
        )
        expected = {k: p[k] for k in ("surface_id", "privacy", "placeholder_on") if k in p}
        if "placeholder_on" in p:
            ph = [r for r in report.renders if r["item_id"] == p["item_id"] and r["kind"] == "placeholder" and r["surface_id"] == p["placeholder_on"]]
            ok = ok and bool(ph)
        return ok, expected, [list(x) for x in actual]
    if a.kind == "action_status":
        calls = [c for c in report.calls if c["op_name"] == p["op_name"] and (a.at_ms is None or c["requested_at_ms"] <= a.at_ms)]
        try:
            actual = calls[p.get("occurrence", -1)]["status"]
        except IndexError:
            actual = None
        return actual == p["status"], p["status"], actual
    if a.kind == "audit_property":
        if p["property"] == "chain_verifies":
            result = verify_lines(report.audit_lines)
            return result.ok, True, {"ok": result.ok, "failed_seq": result.failed_seq, "reason": result.reason}
        entries = [json.loads(line) for line in report.audit_lines]
        entries = [e for e in entries if a.at_ms is None or e.get("timestamp_ms", 0) <= a.at_ms]
        found = sum(1 for e in entries if _matches(e, p["match"]))
        want = p["property"] == "has_entry"
        return (found > 0) == want, {"property": p["property"], "match": p["match"]}, {"matching_entries": found}
    if a.kind == "transcript_contains":
        needles = [p["text"]] if isinstance(p["text"], str) else list(p["text"])
        role = p.get("role", "assistant")
        turns = [t for t in _before(report.transcript, a.at_ms) if t["role"] == role and ("session_id" not in p or t["session_id"] == p["session_id"])]
        ok = any(all(n.lower() in t["text"].lower() for n in needles) for t in turns)
        return ok, needles, [t["text"] for t in turns]
    if a.kind == "handoff_target":
        routed = _before(report.handoffs, a.at_ms)
        actual = routed[-1]["staff_id"] if routed else None
        delivered = bool(routed) and routed[-1]["surface_id"] is not None
        return actual == p["staff_id"] and delivered, p["staff_id"], actual
    raise ScenarioError(f"unknown assertion kind {a.kind!r}")


def check_assertions(report: RunReport, scenario: Scenario) -> list[dict[str, Any]]:
    results = []
    for i, a in enumerate(scenario.assertions):
        passed, expected, actual = _check(report, a)
        result = {"index": i, "kind": a.kind, "at_ms": a.at_ms, "passed": passed}
        if not passed:
            result["diff"] = {"expected": expected, "actual": actual}
        results.append(result)
    return results


def emit_report(report: RunReport, fmt: str = "json") -> bytes:
    if fmt == "json":
        return (canonical_json(report.to_dict()) + "\n").encode("utf-8")
    if fmt != "text":
        raise ValueError(f"unknown format {fmt!r}")
    doc = report.to_dict()
    out = [f"scenario {doc['scenario_id']} (seed {doc['seed']}): {'PASS' if doc['passed'] else 'FAIL'}"]
    out.append(f"events: {len(doc['timeline'])}, audit entries: {doc['audit']['entries']}, head {doc['audit']['head'][:16]}")
    out.append(f"wall time: {report.wall_time_ms:.1f} ms")
    out.append("transcript:")
    out.extend(f"  [{t['at_ms']:>7}] {t['role']}: {t['text']}" for t in doc["transcript"])
    problems = [t for t in doc["timeline"] if t["status"] != "processed"]
    if problems:
        out.append("event problems:")
        out.extend(f"  #{t['index']} {t['kind']} at {t['at_ms']}: {t['status']} ({t['reason']})" for t in problems)
    out.append("assertions:")
    for a in doc["assertions"]:
        line = f"  [{'pass' if a['passed'] else 'FAIL'}] #{a['index']} {a['kind']}"
        if not a["passed"]:
            line += f"  expected={canonical_json(a['diff']['expected'])} actual={canonical_json(a['diff']['actual'])}"
        out.append(line)
    return ("\n".join(out) + "\n").encode("utf-8")
