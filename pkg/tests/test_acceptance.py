"""Acceptance suite: one pass/FAIL line per criterion.

Run with ``pytest tests/test_acceptance.py -s`` or ``python tests/test_acceptance.py``.
Fuzz corpora are seeded so every run checks the same cases.
"""

from __future__ import annotations

import functools
import json
import math
import random
import sys
import time
from dataclasses import dataclass, replace
from pathlib import Path

import pytest

from ambient_engine.actuation import (
    BackendStubs,
    CallRejected,
    Confirmation,
    RiskAssessment,
    StaffApproval,
    Status,
    StepUp,
    Tier,
    default_registry,
    execute_call,
    validate_call,
)
from ambient_engine.audit import AuditLog, verify_file, verify_lines
from ambient_engine.config import bundled_scenarios
from ambient_engine.context import StateEntry, Surface, VariableName as V
from ambient_engine.continuity import SessionStore, TokenError, mint_continuity_token, redeem_continuity_token
from ambient_engine.dialogue import mock_generator
from ambient_engine.engine import Engine, EngineConfig
from ambient_engine.fusion import Candidate, FusionConfig, FusionEngine, decay_entry, resolve_conflict
from ambient_engine.initiative import (
    DialogueTail,
    InitiativeLevel,
    Thresholds,
    Trigger,
    TriggerConfig,
    TriggerKind,
    decide_level,
    evaluate_triggers,
)
from ambient_engine.config import load_default
from ambient_engine.context import SituationalState
from ambient_engine.memory import (
    LongTermStore,
    MemoryEntry,
    MemoryKind,
    RetentionClass,
    SessionDigest,
    distill_session,
    purge_expired,
    retrieve_memories,
    user_memory_request,
)
from ambient_engine.simulator import emit_report, load_scenario, run_scenario

sys.path.insert(0, str(Path(__file__).parent))
from conftest import make_signal  # noqa: E402

REGISTRY = default_registry()
SCENARIO_PATHS = {p.stem: p for p in bundled_scenarios()}


# ------------------------------------------------------------------ engine fuzz corpus

SURFACE_POOL = [
    {"surface_id": "kiosk-1", "kind": "kiosk_screen", "privacy": "shared", "capabilities": ["text", "visual", "audio"]},
    {"surface_id": "lobby-display", "kind": "shared_display", "capabilities": ["text", "visual"]},
    {"surface_id": "lobby-audio", "kind": "audio_public", "capabilities": ["audio"]},
    {"surface_id": "phone-u1", "kind": "personal_device", "capabilities": ["text", "visual"]},
    {"surface_id": "tablet-u1", "kind": "personal_device", "capabilities": ["text", "visual"]},
    {"surface_id": "cobrowse-u1", "kind": "cobrowse_panel", "capabilities": ["text", "visual"]},
    {"surface_id": "terminal-adv-1", "kind": "staff_terminal", "capabilities": ["text", "visual"]},
]
UTTERANCES = [
    "what's my loan balance", "show my recent transactions", "hello", "how long is the queue",
    "block my card ending 4242", "transfer 120 to ACC-9001", "I'd like to speak to a mortgage advisor",
    "and my loan payment history please", "where is the information desk", "blah blah",
]
ROGUE_OPS = ["drain_vault", "rm_rf", "transfer_funds", "block_card", "queue_status", "export_all_customers", "update_account"]


def _digits(rng: random.Random, n: int) -> str:
    return "".join(rng.choice("0123456789") for _ in range(n))


def leaky_generator(prompt_json: str) -> dict:
    # worst case: echoes every context body back as reply text
    return {"text": prompt_json, "proposed_calls": [], "emotion": "neutral"}


def rogue_generator_for(rng: random.Random):
    def gen(prompt_json: str) -> dict:
        base = mock_generator(prompt_json)
        extra = [{"op_name": rng.choice(ROGUE_OPS), "args": rng.choice([{}, {"amount": 5, "to_account": "X-1"}, {"card_id": "c"}])}
                 for _ in range(rng.randint(0, 2))]
        return {**base, "proposed_calls": base["proposed_calls"] + extra}
    return gen


@dataclass
class FuzzRun:
    engine: Engine
    secrets: list[str]


def _fuzz_events(rng: random.Random, primary: str, phones: list[str]) -> list[dict]:
    events = [{"at_ms": 0, "kind": "session_start", "session_id": "s", "surface_id": primary},
              {"at_ms": 0, "kind": "sensor", "signal": {"source_id": "overhead_cam", "channel": "presence", "present": True, "zone": "kiosk"}}]
    t = 0
    for _ in range(rng.randint(3, 14)):
        t += rng.randint(1, 3000)
        roll = rng.random()
        if roll < 0.2 and phones:
            events.append({"at_ms": t, "kind": "sensor", "signal": {"source_id": "mobile_app", "channel": "device_session",
                           "surface_id": rng.choice(phones), "active": rng.random() < 0.7, "in_use": rng.random() < 0.3}})
        elif roll < 0.3:
            events.append({"at_ms": t, "kind": "auth", "user_id": "u1", "auth_level": rng.choice(["authenticated", "step_up"]), "method": "qr"})
        elif roll < 0.45:
            events.append({"at_ms": t, "kind": "consent_grant", "purpose": rng.choice(["loan-details", "transaction-history", "service-history"]), "ttl_ms": rng.randint(1, 600_000)})
        elif roll < 0.5:
            events.append({"at_ms": t, "kind": "step_up", "method": "biometric"})
        elif roll < 0.55:
            events.append({"at_ms": t, "kind": rng.choice(["confirmation", "tick"])})
        elif roll < 0.6:
            events.append({"at_ms": t, "kind": "sensor", "signal": {"source_id": "overhead_cam", "channel": "occupancy", "count": rng.randint(0, 9)}})
        else:
            events.append({"at_ms": t, "kind": "utterance", "text": rng.choice(UTTERANCES)})
    events.append({"at_ms": t + 1, "kind": "session_end"})
    return events


def fuzz_engine_run(seed: int, config: EngineConfig) -> FuzzRun:
    rng = random.Random(seed)
    pool = rng.sample(SURFACE_POOL, rng.randint(1, len(SURFACE_POOL)))
    if not any(s["kind"] != "staff_terminal" for s in pool):
        pool.append(SURFACE_POOL[0])
    surfaces = [Surface.from_dict(s) for s in pool]
    primary = rng.choice([s["surface_id"] for s in pool if s["kind"] != "staff_terminal"])
    phones = [s["surface_id"] for s in pool if s["kind"] == "personal_device"]
    balance = {"outstanding": _digits(rng, 6) + ".00", "currency": "EUR", "account": "LN-" + _digits(rng, 5)}
    history = [{"date": f"2026-0{m}-01", "amount": _digits(rng, 4) + ".50"} for m in range(1, rng.randint(2, 5))]
    txns = [f"{_digits(rng, 3)}.{_digits(rng, 2)} merchant-{_digits(rng, 4)}" for _ in range(rng.randint(1, 4))]
    fixtures = {"crm": {"u1": {"loan_balance": balance, "payment_history": history, "transaction_history": txns}},
                "staff_roster": [{"staff_id": "adv-1", "specializations": ["mortgage"], "availability": rng.choice(["free", "busy"]), "workload": rng.randint(0, 3)}]}
    generator = rng.choice([mock_generator, leaky_generator, rogue_generator_for(rng)])
    engine = Engine(config, surfaces=surfaces, fixtures=fixtures, seed=seed, scenario_id=f"fuzz-{seed}", generator=generator)
    for event in _fuzz_events(rng, primary, phones):
        engine.process(event)
    secrets = [balance["outstanding"], balance["account"]] + [h["amount"] for h in history] + txns
    return FuzzRun(engine, secrets)


@functools.lru_cache(maxsize=1)
def engine_corpus() -> tuple[list[FuzzRun], float]:
    config = EngineConfig.load()
    started = time.perf_counter()
    runs = [fuzz_engine_run(seed, config) for seed in range(1000)]
    return runs, time.perf_counter() - started


@functools.lru_cache(maxsize=1)
def scenario_reports():
    return {name: run_scenario(load_scenario(path)) for name, path in sorted(SCENARIO_PATHS.items())}


def shared_leaks(renders, secrets) -> list[dict]:
    bad = []
    for r in renders:
        if r["privacy"] != "shared":
            continue
        text = json.dumps(r["body"])
        if r["pii"] or any(s in text for s in secrets):
            bad.append(r)
    return bad


# ------------------------------------------------------------------ 1

def test_criterion_01_selective_disclosure(acceptance):
    violations = 0
    for name, report in scenario_reports().items():
        scenario = load_scenario(SCENARIO_PATHS[name])
        secrets = [str(v) for user in scenario.fixtures.get("crm", {}).values() for v in _leaf_values(user) if len(str(v)) >= 6]
        violations += len(shared_leaks(report.renders, secrets))
    runs, elapsed = engine_corpus()
    for run in runs:
        violations += len(shared_leaks(run.engine.renders, run.secrets))
    pii_renders = sum(1 for run in runs for r in run.engine.renders if r["pii"])
    ok = violations == 0 and elapsed < 10 and pii_renders > 0
    acceptance(1, "no pii on shared surfaces", ok,
               f"7 scenarios + {len(runs)} fuzzed configs, {violations} violations, {pii_renders} private pii renders, {elapsed:.1f} s")
    assert ok


def _leaf_values(body):
    if isinstance(body, dict):
        return [v for x in body.values() for v in _leaf_values(x)]
    if isinstance(body, list):
        return [v for x in body for v in _leaf_values(x)]
    return [body]


# ------------------------------------------------------------------ 2

VALID_ARGS = {
    "queue_status": {}, "wayfinding": {"destination": "desk"}, "block_card": {"card_id": "c-1"},
    "schedule_appointment": {"topic": "mortgage"}, "generate_summary_document": {}, "submit_service_request": {"category": "card"},
    "prefill_form": {"form": "f"}, "transfer_funds": {"amount": 10, "to_account": "ACC-1"}, "update_account": {"field": "email", "value": "x"},
}


def fuzz_action_sequence(seed: int) -> tuple[list[dict], list, dict]:
    rng = random.Random(seed)
    op = rng.choice(sorted(VALID_ARGS))
    audit = AuditLog()
    backend = BackendStubs(failures={op: "unavailable"} if rng.random() < 0.1 else {})
    call = validate_call(op, VALID_ARGS[op], REGISTRY, call_id=f"c{seed}", session_id="s", now_ms=0)
    risk = rng.choice([None, RiskAssessment(call.call_id, round(rng.random(), 2))])
    granted: dict[str, int] = {}
    now = 0
    for _ in range(rng.randint(1, 8)):
        now += rng.randint(0, 50)
        gate = rng.choice(["confirmation", "step_up", "dual_control", "verification", None, None])
        if gate == "confirmation":
            call = replace(call, confirmation=Confirmation(now))
        elif gate == "step_up":
            call = replace(call, step_up=StepUp(now))
        elif gate == "dual_control":
            call = replace(call, dual_control=StaffApproval("sup", now))
        elif gate == "verification":
            call = replace(call, verification=StaffApproval("sup", now))
        if gate:
            granted[gate] = now
        _, call = execute_call(call, risk, REGISTRY, backend, audit, now_ms=now)
        if call.status in (Status.EXECUTED, Status.REJECTED):
            break
    return audit.entries, backend.calls, granted


def test_criterion_02_tier_gating(acceptance):
    started = time.perf_counter()
    violations = executed = 0
    for seed in range(1000):
        entries, calls, granted = fuzz_action_sequence(seed)
        for e in entries:
            if e["status"] != "executed":
                continue
            executed += 1
            tier = Tier(e["tier"])
            need = set()
            if tier is not Tier.LOW:
                need.add("confirmation")
            if tier is Tier.HIGH:
                need.add("step_up")
                if REGISTRY.get(e["op_name"]).dual_control:
                    need.add("dual_control")
            if not need <= set(granted) or any(not e[g] for g in need):
                violations += 1
        # every backend invocation is audited: executed, or rejected by the backend itself
        invoked = [e for e in entries if e["status"] == "executed" or e["reason"].startswith("backend:")]
        if len(calls) != len(invoked):
            violations += 1
    elapsed = time.perf_counter() - started
    ok = violations == 0 and elapsed < 10 and executed > 0
    acceptance(2, "tier gating", ok, f"1000 sequences, {executed} executed, {violations} violations, {elapsed:.1f} s")
    assert ok


# ------------------------------------------------------------------ 3

def test_criterion_03_whitelist_totality(acceptance):
    unregistered = rogue_attempts = 0
    for seed in range(1000):
        _, calls, _ = fuzz_action_sequence(seed)
        unregistered += sum(1 for op, _ in calls if op not in REGISTRY)
    runs, _ = engine_corpus()
    for run in runs:
        unregistered += sum(1 for op, _ in run.engine.backend.calls if op not in REGISTRY)
        rogue_attempts += sum(1 for d in run.engine.decisions if d.get("kind") == "action" and d.get("reason") == "not whitelisted")
    for report in scenario_reports().values():
        unregistered += sum(1 for c in report.backend_calls if c["op_name"] not in REGISTRY)
    backend = BackendStubs()
    for op in ROGUE_OPS:
        try:
            validate_call(op, {}, REGISTRY)
        except CallRejected:
            pass
    unregistered += len(backend.calls)
    ok = unregistered == 0 and rogue_attempts > 0
    acceptance(3, "whitelist totality", ok, f"{unregistered} unregistered invocations, {rogue_attempts} rogue proposals refused")
    assert ok


# ------------------------------------------------------------------ 4

def _ten_entry_log(path: Path) -> bytes:
    log = AuditLog(path)
    for i in range(10):
        log.append({"kind": "event", "i": i, "note": f"entry {i}", "ok": i % 2 == 0})
    return path.read_bytes()


def test_criterion_04_audit_integrity(acceptance, tmp_path):
    broken_runs = 0
    for report in scenario_reports().values():
        broken_runs += not verify_lines(report.audit_lines).ok
    runs, _ = engine_corpus()
    for run in runs:
        broken_runs += not run.engine.audit.verify().ok
    for seed in range(1000):
        entries, _, _ = fuzz_action_sequence(seed)
        log = AuditLog()
        for e in entries:
            log.append({k: v for k, v in e.items() if k not in ("seq", "prev_digest", "entry_digest")})
        broken_runs += not log.verify().ok

    path = tmp_path / "ten.jsonl"
    data = _ten_entry_log(path)
    owner, line = [], 1
    for byte in data:
        owner.append(line)
        if byte == 0x0A:
            line += 1
    masks = [1 << b for b in range(8)] + [0xFF]
    missed = mutations = 0
    for pos in range(len(data)):
        for mask in masks:
            mutated = bytearray(data)
            mutated[pos] ^= mask
            lines = bytes(mutated).split(b"\n")
            if lines[-1] == b"":
                lines.pop()
            result = verify_lines(lines)
            mutations += 1
            if result.ok or result.failed_seq != owner[pos]:
                missed += 1
    # the file entry point too, one flip per entry
    file_missed = 0
    starts = [0] + [i + 1 for i, b in enumerate(data) if b == 0x0A][:-1]
    for k, start in enumerate(starts, 1):
        mutated = bytearray(data)
        mutated[start + 3] ^= 0x01
        path.write_bytes(bytes(mutated))
        file_missed += verify_file(path).failed_seq != k
    ok = broken_runs == 0 and missed == 0 and file_missed == 0
    acceptance(4, "audit integrity", ok, f"{broken_runs} broken chains over {7 + len(runs) + 1000} runs, "
               f"{mutations} byte mutations, {missed + file_missed} not caught at their entry")
    assert ok


# ------------------------------------------------------------------ 5

def test_criterion_05_token_integrity(acceptance):
    secret = b"acceptance-secret"
    store = SessionStore()
    handle = store.open("sess", "kiosk-1", "u1")
    raw = mint_continuity_token(handle, "phone-u1", ["loan-details"], 60_000, secret, 1_000, store).encode()
    accepted = 0
    mutations = 0
    for pos in range(len(raw)):
        for xor in range(1, 256):
            mutated = bytearray(raw)
            mutated[pos] ^= xor
            mutations += 1
            try:
                redeem_continuity_token(bytes(mutated), secret, 2_000, store)
                accepted += 1
            except TokenError:
                pass
    redeemed = redeem_continuity_token(raw, secret, 2_000, store)
    round_trip = redeemed.surface_id == "phone-u1"
    try:
        redeem_continuity_token(raw, secret, 2_001, store)
        replay_rejected = False
    except TokenError as exc:
        replay_rejected = str(exc) == "already redeemed"
    ok = accepted == 0 and round_trip and replay_rejected
    acceptance(5, "continuity token integrity", ok,
               f"{mutations} mutations, {accepted} accepted, round trip {'ok' if round_trip else 'broken'}, replay {'rejected' if replay_rejected else 'ACCEPTED'}")
    assert ok


# ------------------------------------------------------------------ 6

def test_criterion_06_initiative_calibration(acceptance):
    defaults = Thresholds()
    levels = []
    for i in range(101):
        conf = i / 100
        trig = Trigger("t", TriggerKind.BEHAVIORAL_CUE, conf, ("e",), {}, None)
        levels.append(decide_level(trig, defaults).level)
    monotone = all(a <= b for a, b in zip(levels, levels[1:]))
    transitions = [i / 100 for i in range(1, 101) if levels[i] != levels[i - 1]]
    cfg = TriggerConfig.from_dict(load_default("triggers.json"))
    state = SituationalState("s", {V.USER_PRESENT: StateEntry(True, 0.9, 0, ("p",))})

    def fires(elapsed):
        return any(t.trigger_id == "silence_after_prompt" for t in evaluate_triggers(state, DialogueTail(10_000, None), 10_000 + elapsed, cfg))

    silence_ok = fires(2001) and fires(2500) and not fires(2000) and not fires(1500)
    ok = monotone and transitions == [0.4, 0.65, 0.8, 0.95] and silence_ok and levels[-1] is InitiativeLevel.ACT
    acceptance(6, "initiative calibration", ok, f"transitions at {transitions}, silence boundary {'ok' if silence_ok else 'wrong'}")
    assert ok


# ------------------------------------------------------------------ 7

STREAM_SOURCES = {
    "overhead_cam": ["presence", "camera_localization", "occupancy", "gaze"],
    "kiosk_cam": ["presence", "gaze"],
    "ble_gateway": ["ble_localization"],
    "mobile_app": ["device_session"],
    "door_counter": ["occupancy"],
    "queue_system": ["queue"],
}


def random_stream(rng: random.Random, agreeing: bool):
    zone, count, present = rng.choice(["counter", "lobby"]), rng.randint(0, 6), rng.random() < 0.8
    out, t = [], 0
    for i in range(rng.randint(3, 25)):
        t += rng.randint(0, 4000)
        src = rng.choice(sorted(STREAM_SOURCES))
        ch = rng.choice(STREAM_SOURCES[src])
        z = zone if agreeing else rng.choice(["counter", "lobby"])
        payload = {
            "presence": {"present": present if agreeing else rng.random() < 0.5},
            "camera_localization": {"zone": z}, "ble_localization": {"zone": z},
            "occupancy": {"count": count if agreeing else rng.randint(0, 6)},
            "gaze": {"target": "kiosk"},
            "device_session": {"surface_id": "p1", "active": True},
            "queue": {"tickets": count if agreeing else rng.randint(0, 6)},
        }[ch]
        out.append(make_signal(ch, payload, t=t, source=src, quality=round(rng.uniform(0.3, 1.0), 2), signal_id=f"x{i}"))
    return out


def confidence_trajectory(signals, times, cfg=FusionConfig()):
    eng = FusionEngine("s", cfg)
    out, i = [], 0
    for t in times:
        while i < len(signals) and signals[i].timestamp_ms <= t:
            eng.apply_signal(signals[i])
            i += 1
        out.append({v: e.confidence for v, e in eng.view(t).variables.items()})
    return out


def dropout_violations(streams, variables=None):
    found: dict[str, int] = {}
    for signals in streams:
        times = sorted({s.timestamp_ms for s in signals} | {s.timestamp_ms + 1500 for s in signals})
        full = confidence_trajectory(signals, times)
        for src in sorted({s.provenance.source_id for s in signals}):
            part = confidence_trajectory([s for s in signals if s.provenance.source_id != src], times)
            for f, p in zip(full, part):
                for v, c in p.items():
                    if (variables is None or v in variables) and c > f.get(v, 0.0):
                        found[v.value] = found.get(v.value, 0) + 1
    return found


def test_criterion_07_fusion_properties(acceptance):
    rng = random.Random(7)
    streams = [random_stream(rng, agreeing=rng.random() < 0.5) for _ in range(100)]
    violations = dropout_violations(streams)
    part_a = not violations

    worst = 0.0
    for _ in range(1000):
        conf, tau = rng.uniform(0.01, 1.0), rng.randint(1, 10**8)
        cfg = FusionConfig(decay_tau_ms={V.OCCUPANCY: tau}, ttl_ms={V.OCCUPANCY: 10**12})
        got = decay_entry(V.OCCUPANCY, StateEntry(3, conf, 0, ("x",)), tau, cfg).confidence
        worst = max(worst, abs(got - conf * math.exp(-1)) / (conf * math.exp(-1)))
    part_b = worst <= 1e-9

    entry = resolve_conflict(V.USER_POSITION, [Candidate("counter", 0.9, 0, "camera", "a"), Candidate("waiting_area", 0.6, 0, "ble", "b")], FusionConfig())
    part_c = entry.value == "counter" and entry.confidence == 0.6

    ok = part_a and part_b and part_c
    detail = (f"(a) {'ok' if part_a else 'dropout raised confidence: ' + ', '.join(f'{k} x{n}' for k, n in sorted(violations.items()))}; "
              f"(b) worst relative error {worst:.1e}; (c) conflict -> {entry.confidence!r}")
    acceptance(7, "fusion properties", ok, detail)
    assert ok


def test_dropout_counterexample_is_the_conflict_example():
    # the exact conflict example from criterion 7(c) is itself a dropout counterexample for 7(a)
    both = [make_signal("camera_localization", {"zone": "counter"}, source="camera", quality=0.9),
            make_signal("ble_localization", {"zone": "waiting_area"}, source="ble", quality=0.6)]
    with_ble = confidence_trajectory(both, [0])[0][V.USER_POSITION]
    without_ble = confidence_trajectory(both[:1], [0])[0][V.USER_POSITION]
    assert with_ble == 0.6 and without_ble == 0.9


def test_dropout_never_raises_directly_fused_confidence_on_agreeing_streams():
    rng = random.Random(70)
    streams = [random_stream(rng, agreeing=True) for _ in range(100)]
    direct = {V.USER_PRESENT, V.USER_POSITION, V.OCCUPANCY}
    assert dropout_violations(streams, direct) == {}


# ------------------------------------------------------------------ 8

def test_criterion_08_scenario_conformance(acceptance):
    failures, slow = [], []
    reports = {}
    for name, path in sorted(SCENARIO_PATHS.items()):
        started = time.perf_counter()
        report = run_scenario(load_scenario(path))
        elapsed = time.perf_counter() - started
        reports[name] = report
        if not report.passed:
            failures.append(name)
        if elapsed >= 1.0:
            slow.append(f"{name} {elapsed:.2f} s")

    greet = load_scenario(SCENARIO_PATHS["in_branch_greeting"])
    appt = greet.fixtures["appointments"]["u1"]
    said = " ".join(t["text"] for t in reports["in_branch_greeting"].transcript if t["role"] == "assistant")
    greeting_ok = appt["name"] in said and appt["purpose"] in said and "advisor will be free in approximately" in said

    handoff = load_scenario(SCENARIO_PATHS["advisor_handoff"])
    free = [m for m in handoff.fixtures["staff_roster"] if m["availability"] == "free" and "mortgage" in m["specializations"]]
    expected = min(free, key=lambda m: (m["workload"], m["staff_id"]))["staff_id"]
    routed = reports["advisor_handoff"].handoffs
    handoff_ok = bool(routed) and routed[-1]["staff_id"] == expected and routed[-1]["surface_id"] == f"terminal-{expected}"

    fraud = [json.loads(line) for line in reports["fraud_intervention"].audit_lines]
    transfers = [c for c in reports["fraud_intervention"].calls if c["op_name"] == "transfer_funds"]
    fraud_ok = (transfers[-1]["status"] == "suspended"
                and any(e.get("intervention") == "clarify" for e in fraud if e["kind"] == "action")
                and any(e.get("intervention") == "suspend" and e.get("risk_score") == 0.9 for e in fraud if e["kind"] == "action"))

    second = [t["text"] for t in reports["memory_continuity"].transcript if t["session_id"] == "s-b" and t["role"] == "assistant"]
    memory_ok = any("Last time we spoke" in t and "savings" in t for t in second)

    ok = not failures and not slow and greeting_ok and handoff_ok and fraud_ok and memory_ok
    acceptance(8, "scenario conformance", ok,
               f"{7 - len(failures)}/7 pass, greeting {greeting_ok}, handoff to {expected} {handoff_ok}, fraud {fraud_ok}, memory {memory_ok}"
               + (f", slow: {slow}" if slow else ""))
    assert ok


# ------------------------------------------------------------------ 9

def test_criterion_09_replay_determinism(acceptance, tmp_path):
    differing = []
    for name, path in sorted(SCENARIO_PATHS.items()):
        scenario = load_scenario(path)
        a = run_scenario(scenario, audit_path=tmp_path / f"{name}.a.jsonl")
        b = run_scenario(scenario, audit_path=tmp_path / f"{name}.b.jsonl")
        same_report = emit_report(a, "json") == emit_report(b, "json")
        same_audit = (tmp_path / f"{name}.a.jsonl").read_bytes() == (tmp_path / f"{name}.b.jsonl").read_bytes()
        if not (same_report and same_audit):
            differing.append(name)
    ok = not differing
    acceptance(9, "replay determinism", ok, f"7 scenarios twice, {len(differing)} differ" + (f": {differing}" if differing else ""))
    assert ok


# ------------------------------------------------------------------ 10

WORDS = ["savings", "loan", "card", "mortgage", "pension", "transfer"]
PURPOSES = ["service-history", "preferences", "transcripts", "loan-details"]


def _random_store(rng: random.Random) -> list[MemoryEntry]:
    entries = []
    for i in range(rng.randint(0, 15)):
        created = rng.randint(0, 10_000)
        revoked = rng.random() < 0.2
        entries.append(MemoryEntry(
            f"e{i}", rng.choice(["u1", "u2"]), rng.choice(list(MemoryKind)), " ".join(rng.sample(WORDS, rng.randint(1, 3))),
            frozenset(rng.sample(PURPOSES, rng.randint(1, 2))), created,
            RetentionClass.UNTIL_REVOKED if revoked else RetentionClass.DAYS_30,
            None if revoked else created + rng.randint(0, 10_000)))
    return entries


def test_criterion_10_memory_governance(acceptance):
    rng = random.Random(10)
    stale = resurfaced = over_consent = distilled = 0
    for _ in range(1000):
        entries = _random_store(rng)
        t = rng.randint(0, 20_000)
        store = purge_expired(LongTermStore(entries), t)
        for user in ("u1", "u2"):
            for e in retrieve_memories(user, WORDS + PURPOSES + ["summary", "preference", "fact"], 100, store, t):
                stale += e.expires_at_ms is not None and e.expires_at_ms <= t
        stale += sum(1 for e in store.entries.values() if e.expires_at_ms is not None and e.expires_at_ms <= t)

        victims = [e for e in entries if e.entry_id in store.entries and rng.random() < 0.5]
        for e in victims:
            user_memory_request(e.user_id, "delete", store, e.entry_id, now_ms=t)
        reloaded = LongTermStore(MemoryEntry.from_dict(json.loads(line)) for line in store.to_jsonl().splitlines())
        gone = {e.entry_id for e in victims}
        for user in ("u1", "u2"):
            hits = retrieve_memories(user, WORDS + PURPOSES, 100, reloaded, t)
            listed = user_memory_request(user, "list", reloaded, now_ms=t)
            resurfaced += sum(1 for e in hits + listed if e.entry_id in gone)

        consented = set(rng.sample(PURPOSES, rng.randint(0, len(PURPOSES))))
        digest = SessionDigest("s", "u1", t, rng.choice([None, "loan_inquiry", "savings_inquiry", "greeting", "unknown"]), None,
                               tuple(rng.sample(["please keep it brief", "I prefer Spanish", "don't interrupt me", "hello"], rng.randint(0, 3))))
        for e in distill_session(digest, consented):
            distilled += 1
            over_consent += not set(e.purpose_tags) <= consented

    for report in scenario_reports().values():
        for line in report.audit_lines:
            e = json.loads(line)
            if e.get("kind") == "memory" and e.get("action") == "distill":
                distilled += 1
                over_consent += not set(e["purposes"]) <= set(e["consented"])

    ok = stale == 0 and resurfaced == 0 and over_consent == 0 and distilled > 0
    acceptance(10, "memory governance", ok,
               f"1000 stores, {stale} stale retrievable, {resurfaced} resurfaced after delete, {over_consent} of {distilled} distilled entries outside consent")
    assert ok


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q", "-s", "-p", "no:cacheprovider"]))
