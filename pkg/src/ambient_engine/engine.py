"""Event-driven orchestration shared by scenario replay and live mode.

One :class:`Engine` owns the virtual clock, the audit chain, consent and
memory stores, and any number of sequential customer sessions. Every event
goes through :meth:`Engine.process`, which records exactly one timeline entry
for it whatever happens.
"""

from __future__ import annotations

import hashlib
import math
import random
from dataclasses import dataclass, field, replace
from typing import Any, Iterable, Mapping

from .actuation import (
    ActionCall,
    BackendStubs,
    CallRejected,
    Confirmation,
    InterventionThresholds,
    OperationSchema,
    Registry,
    RiskAssessment,
    StaffApproval,
    Status,
    StepUp,
    Tier,
    execute_call,
    validate_call,
)
from .audit import AuditLog
from .config import load_default
from .context import (
    ConsentRecord,
    Privacy,
    Sensitivity,
    Surface,
    SurfaceKind,
    VariableName as V,
    snapshot_hash,
)
from .continuity import (
    HandoffQueue,
    SessionHandle,
    SessionStore,
    StaffMember,
    TokenError,
    build_handoff_summary,
    mint_continuity_token,
    redeem_continuity_token,
    route_handoff,
)
from .dialogue import (
    Generator,
    Intent,
    ProposedCall,
    Reply,
    compose_prompt,
    content_from_memory,
    detect_intent,
    generate_reply,
    mock_generator,
)
from .fusion import FusionConfig, FusionEngine
from .ingestion import IngestReport, Ingestor, SourceRegistration, registrations_from_list
from .initiative import (
    DialogueTail,
    InitiativeLevel,
    RefractoryClock,
    Thresholds,
    TriggerConfig,
    apply_suppression,
    decide_level,
    evaluate_triggers,
    initiative_cap,
)
from .memory import (
    DAY_MS,
    LongTermStore,
    MemoryEntry,
    RetentionPolicy,
    Role,
    SessionDigest,
    ShortTermMemory,
    distill_session,
    preference_value,
    terms,
)
from .policy import (
    PLACEHOLDER,
    AuthLevel,
    ConsentStore,
    ContentItem,
    NoPrivateSurface,
    PolicyDecision,
    PolicyTable,
    access_for_item,
    redact_for_surface,
    select_surface,
)
from .stubs import EnterpriseStubs

EVENT_KINDS = (
    "session_start", "session_end", "sensor", "utterance", "auth", "confirmation", "step_up",
    "dual_control", "verification", "staff_status", "risk_score", "consent_grant", "tick",
    "transfer", "token_redeem", "handoff_request",
)

# intent -> catalogue of (item_id, sensitivity, pii, purpose); bodies come from the crm stub after the gate allows
DATA_CATALOG: dict[str, tuple[tuple[str, Sensitivity, bool, str], ...]] = {
    "loan_inquiry": (
        ("loan_balance", Sensitivity.CONFIDENTIAL, True, "loan-details"),
        ("payment_history", Sensitivity.CONFIDENTIAL, True, "loan-details"),
    ),
    "transaction_history": (("transaction_history", Sensitivity.RESTRICTED, True, "transaction-history"),),
}

# items shown on a surface (rather than only informing the reply)
DISPLAY_PURPOSES = {
    "loan_inquiry": {"loan-details"},
    "transaction_history": {"transaction-history"},
    "check_queue": {"queue-status"},
}

SUGGESTIONS = {
    "temporal_silence": "Take your time. Would you like me to go over the options again?",
    "behavioral_cue": "While you wait, I'm happy to help with any quick questions.",
    "situational_event": "Your appointment is coming up shortly. I can get a few details ready in advance.",
}

DEEP_LINK = "Please open your banking app to view these details privately."
BUSY_TEXT = "All of our colleagues are busy right now. You're next in line, and I've noted everything we've covered."
DONE_TEXT = "That's done."
PREFILL_TEXT = "I've prepared the paperwork in advance. Shall I go ahead?"


@dataclass
class EngineConfig:
    registrations: dict[str, SourceRegistration]
    fusion: FusionConfig
    triggers: TriggerConfig
    policy: PolicyTable
    registry: Registry
    retention: RetentionPolicy
    intervention: InterventionThresholds = InterventionThresholds()
    dedup_window_ms: int | None = None
    token_ttl_ms: int = 120_000
    consent_ttl_ms: int = 365 * DAY_MS
    memory_k: int = 3

    @classmethod
    def load(cls, overrides: Mapping[str, Any] | None = None) -> EngineConfig:
        """Defaults (bundled or ``$SIM_CONFIG_DIR``) with per-scenario overrides on top."""
        o = dict(overrides or {})
        triggers = TriggerConfig.from_dict(o.get("triggers") or load_default("triggers.json"))
        th = o.get("initiative_thresholds")
        if isinstance(th, str):
            triggers = replace(triggers, thresholds=Thresholds.parse(th))
        elif isinstance(th, Mapping):
            triggers = replace(triggers, thresholds=Thresholds(**th))
        policy_doc = o.get("policy") or load_default("policy.json")
        registry_doc = o.get("registry") or load_default("registry.json")
        return cls(
            registrations=registrations_from_list(o.get("registrations") or load_default("registrations.json")["sources"]),
            fusion=FusionConfig.from_dict(o.get("fusion") or load_default("fusion.json")),
            triggers=triggers,
            policy=PolicyTable.from_list(policy_doc["entries"] if isinstance(policy_doc, Mapping) else policy_doc),
            registry=Registry(OperationSchema.from_dict(d) for d in (registry_doc["operations"] if isinstance(registry_doc, Mapping) else registry_doc)),
            retention=RetentionPolicy.from_dict(o.get("retention") or load_default("retention.json")),
            intervention=InterventionThresholds(**o["intervention_thresholds"]) if "intervention_thresholds" in o else InterventionThresholds(),
            dedup_window_ms=o.get("dedup_window_ms"),
            token_ttl_ms=int(o.get("token_ttl_ms", 120_000)),
            consent_ttl_ms=int(o.get("consent_ttl_ms", 365 * DAY_MS)),
            memory_k=int(o.get("memory_k", 3)),
        )


@dataclass
class Session:
    session_id: str
    primary_surface: str
    fusion: FusionEngine
    stm: ShortTermMemory
    handle: SessionHandle
    user_id: str | None = None
    auth_level: AuthLevel = AuthLevel.ANONYMOUS
    auth_source: str = "kiosk_auth"
    intents: list[str] = field(default_factory=list)
    topic: str | None = None
    allowed_refs: list[str] = field(default_factory=list)
    calls: dict[str, ActionCall] = field(default_factory=dict)
    risks: dict[str, RiskAssessment] = field(default_factory=dict)
    pending_request: tuple[Intent, str] | None = None
    last_prompt_ms: int | None = None
    last_user_ms: int | None = None
    refractory: RefractoryClock = field(default_factory=RefractoryClock)
    acted: set[str] = field(default_factory=set)
    active: bool = True


class EventError(ValueError):
    """An event that the engine declines; recorded as a rejection, not raised."""


class Engine:
    def __init__(
        self,
        config: EngineConfig | None = None,
        *,
        surfaces: Iterable[Surface] = (),
        fixtures: Mapping[str, Any] | None = None,
        memory: Iterable[MemoryEntry] = (),
        seed: int = 0,
        scenario_id: str = "live",
        audit: AuditLog | None = None,
        generator: Generator = mock_generator,
    ):
        self.config = config or EngineConfig.load()
        fixtures = dict(fixtures or {})
        self.fixtures = fixtures
        self.rng = random.Random(seed)  # the only stochastic source; unused by the defaults
        self.secret = hashlib.sha256(f"{scenario_id}:{seed}".encode("utf-8")).digest()
        self.audit = audit if audit is not None else AuditLog()
        self.ingestor = Ingestor(self.config.registrations, self.config.dedup_window_ms)
        self.ingest_report = IngestReport()
        self.stubs = EnterpriseStubs(fixtures)
        self.backend = BackendStubs(dict(fixtures.get("backend_results", {})), dict(fixtures.get("backend_failures", {})))
        self.consents = ConsentStore()
        self.memory = LongTermStore(memory, audit=self.audit.append)
        self.store = SessionStore()
        self.surfaces = {s.surface_id: s for s in surfaces}
        self.staff_updates: dict[str, StaffMember] = {}
        self.handoff_queue = HandoffQueue()
        self.generator = generator
        self.sessions: dict[str, Session] = {}
        self.current: str | None = None
        self.now = 0

        self.timeline: list[dict[str, Any]] = []
        self.transcript: list[dict[str, Any]] = []
        self.decisions: list[dict[str, Any]] = []
        self.renders: list[dict[str, Any]] = []
        self.handoffs: list[dict[str, Any]] = []
        self.tokens: list[dict[str, Any]] = []
        self.minted: list[bytes] = []

    # ------------------------------------------------------------------ loop

    def process(self, event: Mapping[str, Any]) -> dict[str, Any]:
        """Apply one event at its virtual time; returns its timeline entry."""
        kind = event.get("kind")
        at = event.get("at_ms")
        status, reason = "processed", ""
        if not isinstance(at, int) or isinstance(at, bool) or at < 0:
            status, reason = "rejected", "at_ms must be a non-negative integer"
        elif at < self.now:
            status, reason = "rejected", "events out of order"
        elif kind not in EVENT_KINDS:
            status, reason = "rejected", f"unknown event kind {kind!r}"
        else:
            self.now = at
            try:
                getattr(self, f"_on_{kind}")(event)
            except EventError as exc:
                status, reason = "rejected", str(exc)
            except Exception as exc:  # noqa: BLE001 - engine faults become report entries
                status, reason = "error", f"{type(exc).__name__}: {exc}"
            session = self._session_or_none()
            if session is not None and status != "error":
                try:
                    self._run_initiative(session)
                except Exception as exc:  # noqa: BLE001
                    status, reason = "error", f"initiative: {type(exc).__name__}: {exc}"
        entry = {
            "index": len(self.timeline),
            "at_ms": at,
            "kind": kind,
            "status": status,
            "reason": reason,
            "session_id": self.current,
            **self._snapshot(),
        }
        self.timeline.append(entry)
        return entry

    def _snapshot(self) -> dict[str, Any]:
        session = self._session_or_none()
        if session is None:
            return {"state": {}, "snapshot": None}
        view = session.fusion.view(self.now)
        compact = {name.value: {"value": e.value, "confidence": e.confidence} for name, e in sorted(view.variables.items(), key=lambda kv: kv[0].value)}
        return {"state": compact, "snapshot": snapshot_hash(view)}

    def _session_or_none(self) -> Session | None:
        if self.current is None:
            return None
        s = self.sessions.get(self.current)
        return s if s is not None and s.active else None

    def _session(self, event: Mapping[str, Any] | None = None) -> Session:
        sid = (event or {}).get("session_id") or self.current
        s = self.sessions.get(sid) if sid else None
        if s is None or not s.active:
            raise EventError("no active session")
        return s

    def _ingest(self, raw: dict[str, Any]):
        raw.setdefault("timestamp_ms", self.now)
        signal = self.ingestor.feed(raw, self.ingest_report)
        if signal is None:
            raise EventError(f"ingestion: {self.ingest_report.rejections[-1].reason}")
        return signal

    def _fuse(self, session: Session, raw: dict[str, Any]) -> None:
        session.fusion.apply_signal(self._ingest(raw), self.now)

    def _audit(self, body: Mapping[str, Any]) -> None:
        self.audit.append({"timestamp_ms": self.now, **body})

    # -------------------------------------------------------------- handlers

    def _on_session_start(self, e: Mapping[str, Any]) -> None:
        sid, surface = e.get("session_id"), e.get("surface_id")
        if not sid or surface not in self.surfaces:
            raise EventError("session_start needs session_id and a known surface_id")
        if sid in self.sessions:
            raise EventError(f"session {sid} already exists")
        handle = self.store.open(sid, surface)
        self.sessions[sid] = Session(sid, surface, FusionEngine(sid, self.config.fusion), ShortTermMemory(sid), handle,
                                     refractory=RefractoryClock(self.config.triggers.refractory_ms))
        self.current = sid
        self._audit({"kind": "session", "action": "start", "session_id": sid, "surface_id": surface})

    def _on_session_end(self, e: Mapping[str, Any]) -> None:
        s = self._session(e)
        s.stm.ended_at_ms = self.now
        if s.user_id is not None:
            utterances = tuple(t.text for t in s.stm.turns if t.role is Role.USER)
            intent = next((i for i in reversed(s.intents) if i not in ("unknown", "greeting")), None)
            consented = self.consents.active_purposes(s.user_id, self.now)
            entries = distill_session(SessionDigest(s.session_id, s.user_id, self.now, intent, s.topic, utterances), consented, self.config.retention)
            self.memory.add(entries)
            for entry in entries:
                self._audit({"kind": "memory", "action": "distill", "user_id": s.user_id, "entry_id": entry.entry_id, "purposes": sorted(entry.purpose_tags), "consented": consented})
        self.memory.purge_expired(self.now)
        self.store.close(s.session_id)
        s.active = False
        self._audit({"kind": "session", "action": "end", "session_id": s.session_id})
        if self.current == s.session_id:
            self.current = None

    def _on_sensor(self, e: Mapping[str, Any]) -> None:
        signal = e.get("signal")
        if not isinstance(signal, Mapping):
            raise EventError("sensor event needs a signal object")
        self._fuse(self._session(e), dict(signal))

    def _on_auth(self, e: Mapping[str, Any]) -> None:
        s = self._session(e)
        level = AuthLevel(e["auth_level"])
        s.auth_source = e.get("source_id", "kiosk_auth")
        self._fuse(s, {"source_id": s.auth_source, "channel": "auth", "user_id": e["user_id"],
                       "auth_level": level.value, "method": e.get("method", "qr")})
        s.user_id = e["user_id"]
        s.handle.user_id = s.user_id
        s.auth_level = level
        self._audit({"kind": "auth", "session_id": s.session_id, "user_id": s.user_id, "auth_level": level.value})
        appt = self.stubs.query("appointments", {"user_id": s.user_id}, self.now)
        if appt.found:
            payload = {k: v for k, v in appt.record.items() if k in ("purpose", "at_ms", "name", "advisor_id", "reference")}
            self._fuse(s, {"source_id": "branch_mgmt", "channel": "appointment", "user_id": s.user_id, **payload})
        if e.get("greet", True):
            self._respond(s, Intent("greeting", {}, 1.0), "")

    def _on_utterance(self, e: Mapping[str, Any]) -> None:
        s = self._session(e)
        text = str(e["text"])
        s.stm.add(Role.USER, text, self.now)
        self.transcript.append({"at_ms": self.now, "session_id": s.session_id, "role": "user", "text": text})
        s.last_user_ms = self.now
        intent = detect_intent(text)
        s.intents.append(intent.name)
        self.decisions.append({"at_ms": self.now, "kind": "intent", "session_id": s.session_id, **intent.to_dict()})
        if intent.slots.get("topic") and intent.name not in ("request_advisor", "schedule_appointment"):
            s.topic = intent.slots["topic"]
        self._respond(s, intent, text)
        if intent.name == "request_advisor":
            self._handoff(s, intent.slots.get("topic"))

    def _on_consent_grant(self, e: Mapping[str, Any]) -> None:
        s = self._session(e)
        if s.user_id is None:
            raise EventError("consent needs an identified user")
        expires = int(e.get("expires_at_ms", self.now + int(e.get("ttl_ms", self.config.consent_ttl_ms))))
        record = ConsentRecord(s.user_id, e["purpose"], self.now, expires, e.get("channel", "kiosk"))
        self._fuse(s, {"source_id": "consent_service", "channel": "consent", **record.to_dict()})
        self.consents.grant(record)
        self._audit({"kind": "consent", "action": "grant", **record.to_dict()})
        self._retry_pending_request(s)

    def _on_step_up(self, e: Mapping[str, Any]) -> None:
        s = self._session(e)
        if s.user_id is None:
            raise EventError("step-up needs an identified user")
        # same source as the original auth so the newer reading supersedes it
        self._fuse(s, {"source_id": e.get("source_id", s.auth_source), "channel": "auth", "user_id": s.user_id,
                       "auth_level": "step_up", "method": e.get("method", "biometric")})
        s.auth_level = AuthLevel.STEP_UP
        self._audit({"kind": "auth", "session_id": s.session_id, "user_id": s.user_id, "auth_level": "step_up"})
        call = self._pending_call(s, e, required=False)
        if call is not None and call.tier is Tier.HIGH:
            self._attempt(s, replace(call, step_up=StepUp(self.now, e.get("method", "biometric"))))
        self._retry_pending_request(s)

    def _on_confirmation(self, e: Mapping[str, Any]) -> None:
        s = self._session(e)
        call = self._pending_call(s, e)
        self._attempt(s, replace(call, confirmation=Confirmation(self.now, e.get("channel", "voice"))))

    def _on_dual_control(self, e: Mapping[str, Any]) -> None:
        s = self._session(e)
        call = self._pending_call(s, e)
        self._attempt(s, replace(call, dual_control=StaffApproval(e["staff_id"], self.now)))

    def _on_verification(self, e: Mapping[str, Any]) -> None:
        s = self._session(e)
        call = self._pending_call(s, e)
        self._attempt(s, replace(call, verification=StaffApproval(e["staff_id"], self.now)))

    def _on_risk_score(self, e: Mapping[str, Any]) -> None:
        s = self._session(e)
        call = self._pending_call(s, e)
        self._fuse(s, {"source_id": "risk_engine", "channel": "risk_score", "score": e["score"], "call_ref": call.call_id})
        s.risks[call.call_id] = RiskAssessment(call.call_id, float(e["score"]), tuple(e.get("indicators", ())), "risk-event")
        self._attempt(s, call)

    def _on_staff_status(self, e: Mapping[str, Any]) -> None:
        member = StaffMember.from_dict(e)
        s = self._session_or_none()
        raw = {"source_id": "branch_mgmt", "channel": "staff_status", **member.to_dict()}
        if "free_at_ms" in e:
            raw["free_at_ms"] = e["free_at_ms"]
        if s is not None:
            self._fuse(s, raw)
        self.staff_updates[member.staff_id] = member
        for session_id, topic, routed in self.handoff_queue.drain(self._roster()):
            waiting = self.sessions.get(session_id)
            if waiting is not None and waiting.active:
                self._deliver_handoff(waiting, topic, routed)

    def _on_tick(self, e: Mapping[str, Any]) -> None:
        self._session(e)

    def _on_handoff_request(self, e: Mapping[str, Any]) -> None:
        self._handoff(self._session(e), e.get("topic"))

    def _on_transfer(self, e: Mapping[str, Any]) -> None:
        s = self._session(e)
        target = e.get("target")
        if target not in self.surfaces:
            raise EventError("transfer target must be a known surface")
        token = mint_continuity_token(s.handle, target, e.get("scope", ["conversation"]), int(e.get("ttl_ms", self.config.token_ttl_ms)), self.secret, self.now, self.store)
        self.minted.append(token.encode())
        record = {"at_ms": self.now, "action": "minted", "token_id": token.token_id, "session_id": s.session_id,
                  "target": target, "expires_at_ms": token.expires_at_ms}
        self.tokens.append(record)
        self._audit({"kind": "token", **record})

    def _on_token_redeem(self, e: Mapping[str, Any]) -> None:
        if not self.minted:
            raise EventError("no token has been minted")
        raw = bytearray(self.minted[int(e.get("token_index", -1))])
        if "mutate_byte" in e:
            i = int(e["mutate_byte"]) % len(raw)
            raw[i] ^= int(e.get("xor", 1)) or 1
        record: dict[str, Any] = {"at_ms": self.now, "action": "redeem", "mutated": "mutate_byte" in e}
        try:
            handle = redeem_continuity_token(bytes(raw), self.secret, self.now, self.store)
        except TokenError as exc:
            record.update(outcome="rejected", reason=str(exc))
        else:
            record.update(outcome="accepted", reason="", session_id=handle.session_id, target=handle.surface_id)
            self.sessions[handle.session_id].primary_surface = handle.surface_id
        self.tokens.append(record)
        self._audit({"kind": "token", **record})

    # ------------------------------------------------------------- dialogue

    def _gate(self, s: Session):
        return lambda item: access_for_item(item, s.user_id, s.auth_level, self.consents, self.config.policy, self.now)

    def _context_items(self, s: Session, greeting: bool) -> list[ContentItem]:
        view = s.fusion.view(self.now)
        items: list[ContentItem] = []
        appt = view.get(V.APPOINTMENT)
        if greeting and appt.known and appt.value.get("user_id") == s.user_id:
            body = {k: appt.value[k] for k in ("name", "purpose", "at_ms") if k in appt.value}
            items.append(ContentItem("appointment", body, False, Sensitivity.INTERNAL, "appointment", "appointment-lookup"))
        staff = view.get(V.ADVISOR_AVAILABILITY)
        advisor = appt.value.get("advisor_id") if appt.known else None
        if advisor and staff.known and advisor in staff.value:
            status = staff.value[advisor]
            free_at = status.get("free_at_ms")
            minutes = 0 if status.get("availability") == "free" or free_at is None else max(0, math.ceil((free_at - self.now) / 60_000))
            items.append(ContentItem("advisor_wait", {"advisor_id": advisor, "minutes": minutes}, False, Sensitivity.INTERNAL, "branch_status", "advisor-availability"))
        queue = view.get(V.QUEUE_LENGTH)
        if queue.known:
            q = queue.value
            items.append(ContentItem("queue_status", {"length": q["length"], "wait_minutes": math.ceil(q["est_wait_ms"] / 60_000)}, False, Sensitivity.PUBLIC, "environment", "queue-status"))
        if greeting and s.user_id is not None:
            items.extend(self._fetch_gated(s, (("account_activity", Sensitivity.CONFIDENTIAL, False, "account-activity"),), source="account_activity"))
        return items

    def _fetch_gated(self, s: Session, catalog, source: str = "crm") -> list[ContentItem]:
        """Gate on metadata first; only allowed items are fetched from the crm stub."""
        gate = self._gate(s)
        out = []
        for item_id, sensitivity, pii, purpose in catalog:
            meta = ContentItem(item_id, None, pii, sensitivity, source, purpose)
            if gate(meta).allowed:
                hit = self.stubs.query("crm", {"user_id": s.user_id, "item": item_id}, self.now)
                if not hit.found:
                    continue
                meta = replace(meta, body=hit.record)
            out.append(meta)
        return out

    def _respond(self, s: Session, intent: Intent, text: str) -> Reply:
        greeting = intent.name == "greeting"
        candidates = self._context_items(s, greeting)
        candidates += self._fetch_gated(s, DATA_CATALOG.get(intent.name, ()))
        hits: list[MemoryEntry] = []
        if s.user_id is not None:
            query = (["service-history", "summary"] if greeting else []) + sorted(terms(text))
            hits = self.memory.retrieve(s.user_id, query, self.config.memory_k, self.now)
        history = [f"{t.role.value}: {t.text}" for t in s.stm.turns[:-1]] if text else [f"{t.role.value}: {t.text}" for t in s.stm.turns]
        prompt = compose_prompt(
            user_message=text, intent=intent, candidates=candidates, memory_hits=content_from_memory(hits),
            gate=self._gate(s), history=history, now_ms=self.now,
        )
        blocked = None
        for item_id, decision in sorted(prompt.authorization_trace.items()):
            self._record_policy(s, item_id, decision)
            if decision.allowed:
                if item_id not in s.allowed_refs:
                    s.allowed_refs.append(item_id)
            elif decision.required_step is not None and any(item_id == c[0] for c in DATA_CATALOG.get(intent.name, ())):
                blocked = decision
        s.pending_request = (intent, text) if blocked is not None else None

        reply = generate_reply(prompt, self.generator)
        included = [i["item_id"] for i in prompt.context_items()]
        self._say(s, self._guard_reply(reply.text, prompt), reply.emotion, included)
        if reply.fallback:
            self.decisions.append({"at_ms": self.now, "kind": "generator_fallback", "session_id": s.session_id})
        show = DISPLAY_PURPOSES.get(intent.name, set())
        for item in prompt.context_items():
            if item["purpose"] in show:
                self._render_item(s, ContentItem(item["item_id"], item["body"], item["pii"], Sensitivity(item["sensitivity"]), item["source"], item["purpose"]))
        for proposed in reply.proposed_calls:
            self._propose(s, proposed)
        return reply

    def _guard_reply(self, text: str, prompt) -> str:
        # a plugged-in generator might echo pii; the primary surface may be shared
        leaks = []
        for item in prompt.context_items():
            if item["pii"]:
                leaks.extend(_leaves(item["body"]))
        if any(len(v) >= 4 and v in text for v in leaks):
            return "I've prepared those details for a private screen."
        return text

    def _retry_pending_request(self, s: Session) -> None:
        if s.pending_request is not None:
            intent, text = s.pending_request
            self._respond(s, intent, text)

    def _record_policy(self, s: Session, item_id: str, decision: PolicyDecision) -> None:
        body = {"kind": "policy", "session_id": s.session_id, "item_id": item_id, **decision.to_dict()}
        self.decisions.append({"at_ms": self.now, **body})
        self._audit(body)

    def _say(self, s: Session, text: str, emotion: str = "neutral", context: Iterable[str] = ()) -> None:
        s.stm.add(Role.ASSISTANT, text, self.now, context)
        self.transcript.append({"at_ms": self.now, "session_id": s.session_id, "role": "assistant", "text": text, "emotion": emotion})
        self._render(s, s.primary_surface, "text", text, None, False)
        s.last_prompt_ms = self.now

    # ------------------------------------------------------------ rendering

    def _available_surfaces(self, s: Session) -> list[Surface]:
        active = s.fusion.view(self.now).value(V.ACTIVE_SURFACES) or []
        out = []
        for surface in self.surfaces.values():
            if surface.kind is SurfaceKind.STAFF_TERMINAL:
                continue
            if surface.kind is SurfaceKind.PERSONAL_DEVICE and surface.surface_id not in active and surface.surface_id != s.primary_surface:
                continue
            out.append(surface)
        return out

    def _render(self, s: Session, surface_id: str, kind: str, body: Any, item_id: str | None, pii: bool) -> None:
        surface = self.surfaces[surface_id]
        record = {"at_ms": self.now, "session_id": s.session_id, "kind": kind, "item_id": item_id,
                  "surface_id": surface_id, "privacy": surface.privacy.value, "pii": pii, "body": body}
        self.renders.append(record)
        if item_id is not None:
            self._audit({"kind": "render", "session_id": s.session_id, "item_id": item_id, "surface_id": surface_id,
                         "privacy": surface.privacy.value, "pii": pii, "render": kind})

    def _render_item(self, s: Session, item: ContentItem) -> None:
        try:
            surface = select_surface(item, self._available_surfaces(s))
        except NoPrivateSurface:
            self._render(s, s.primary_surface, "deep_link", DEEP_LINK, item.item_id, False)
            return
        shown = redact_for_surface(item, surface)
        self._render(s, surface.surface_id, "item", shown.body, item.item_id, shown.pii)
        primary = self.surfaces[s.primary_surface]
        if item.pii and primary.surface_id != surface.surface_id and primary.privacy is Privacy.SHARED:
            self._render(s, primary.surface_id, "placeholder", PLACEHOLDER, item.item_id, False)

    # ------------------------------------------------------------ actuation

    def _pending_call(self, s: Session, e: Mapping[str, Any], required: bool = True) -> ActionCall | None:
        call_id = e.get("call_id")
        if call_id is not None:
            call = s.calls.get(call_id)
        else:
            open_calls = [c for c in s.calls.values() if c.status not in (Status.EXECUTED, Status.REJECTED)]
            call = open_calls[-1] if open_calls else None
        if call is None and required:
            raise EventError("no pending call")
        return call

    def _propose(self, s: Session, proposed: ProposedCall) -> None:
        call_id = f"{s.session_id}-c{len(s.calls) + 1}"
        args = {**self.fixtures.get("call_defaults", {}).get(proposed.op_name, {}), **proposed.args}
        try:
            call = validate_call(proposed.op_name, args, self.config.registry, call_id=call_id, session_id=s.session_id, now_ms=self.now)
        except CallRejected as exc:
            body = {"kind": "action", "call_id": call_id, "session_id": s.session_id, "op_name": proposed.op_name, "status": Status.REJECTED.value, "reason": str(exc)}
            self.decisions.append({"at_ms": self.now, **body})
            self._audit(body)
            return
        if call.tier is not Tier.LOW:
            risk = self.stubs.query("risk", {"op_name": call.op_name, "args": dict(call.args)}, self.now)
            if risk.found:
                s.risks[call_id] = RiskAssessment(call_id, float(risk.record["score"]), tuple(risk.record["indicators"]))
        self._attempt(s, call)

    def _attempt(self, s: Session, call: ActionCall) -> None:
        if call.status in (Status.EXECUTED, Status.REJECTED):
            raise EventError(f"call {call.call_id} already {call.status.value}")
        previous = call.intervention
        result, call = execute_call(
            call, s.risks.get(call.call_id), self.config.registry, self.backend, self.audit, now_ms=self.now,
            context_digest=snapshot_hash(s.fusion.view(self.now)),
            consent_state=self.consents.active_purposes(s.user_id, self.now), thresholds=self.config.intervention,
        )
        s.calls[call.call_id] = call
        self.decisions.append({"at_ms": self.now, "kind": "action", "session_id": s.session_id, "call_id": call.call_id,
                               "op_name": call.op_name, "status": call.status.value, "intervention": result.intervention.value, "reason": call.reason})
        if result.prompt is not None and result.intervention is not previous:
            self._say(s, result.prompt, "concerned")
        if result.executed and call.tier is not Tier.LOW:
            self._say(s, DONE_TEXT, "warm")

    # ------------------------------------------------------------ handoff

    def _roster(self) -> list[StaffMember]:
        listed = self.stubs.query("staff_roster", {}, self.now)
        members = {m["staff_id"]: StaffMember.from_dict(m) for m in (listed.record or [])} if listed.found else {}
        members.update(self.staff_updates)
        return [members[k] for k in sorted(members)]

    def _topic_for(self, s: Session, requested: str | None, roster: list[StaffMember]) -> str:
        if requested:
            return requested
        specs = sorted({sp for m in roster for sp in m.specializations})
        appt = s.fusion.view(self.now).get(V.APPOINTMENT)
        words = terms(appt.value.get("purpose", "")) if appt.known else set()
        words |= terms(s.topic or "")
        return next((sp for sp in specs if sp in words), "general")

    def _handoff(self, s: Session, requested: str | None) -> None:
        roster = self._roster()
        topic = self._topic_for(s, requested, roster)
        member = route_handoff(topic, roster)
        if member is None:
            self.handoff_queue.push(s.session_id, topic)
            self.decisions.append({"at_ms": self.now, "kind": "handoff", "session_id": s.session_id, "topic": topic, "outcome": "queued"})
            self._audit({"kind": "handoff", "session_id": s.session_id, "topic": topic, "outcome": "queued"})
            self._say(s, BUSY_TEXT, "warm")
            return
        self._deliver_handoff(s, topic, member)

    def _deliver_handoff(self, s: Session, topic: str, member: StaffMember) -> None:
        terminals = sorted(sid for sid, surf in self.surfaces.items() if surf.kind is SurfaceKind.STAFF_TERMINAL)
        terminal = f"terminal-{member.staff_id}" if f"terminal-{member.staff_id}" in self.surfaces else (terminals[0] if terminals else None)
        open_q = [f"pending {c.op_name} ({c.status.value})" for c in s.calls.values() if c.status not in (Status.EXECUTED, Status.REJECTED)]
        if s.pending_request is not None:
            open_q.append(f"awaiting authorization for {s.pending_request[0].name}")
        summary = build_handoff_summary(s.session_id, s.stm.turns, s.intents, self.audit.entries, s.allowed_refs, open_q, [topic])
        token_id = None
        if terminal is not None:
            token = mint_continuity_token(s.handle, terminal, ["handoff"], self.config.token_ttl_ms, self.secret, self.now, self.store)
            token_id = token.token_id
            minted = {"at_ms": self.now, "action": "minted", "token_id": token_id, "session_id": s.session_id, "target": terminal, "expires_at_ms": token.expires_at_ms}
            self.tokens.append(minted)
            self._audit({"kind": "token", **minted})
            self._render(s, terminal, "handoff_summary", summary.to_dict(), f"handoff:{s.session_id}", False)
        record = {"at_ms": self.now, "session_id": s.session_id, "staff_id": member.staff_id, "topic": topic,
                  "surface_id": terminal, "token_id": token_id, "summary": summary.to_dict()}
        self.handoffs.append(record)
        self.decisions.append({"at_ms": self.now, "kind": "handoff", "session_id": s.session_id, "topic": topic, "outcome": "routed", "staff_id": member.staff_id})
        self._audit({"kind": "handoff", "session_id": s.session_id, "topic": topic, "outcome": "routed", "staff_id": member.staff_id, "token_id": token_id})
        self.staff_updates[member.staff_id] = replace(member, availability="busy", workload=member.workload + 1)

    # ----------------------------------------------------------- initiative

    def _run_initiative(self, s: Session) -> None:
        cfg = self.config.triggers
        view = s.fusion.view(self.now)
        signals = {}
        qs = s.fusion.queue_signal
        if qs is not None:
            signals["queue_position"] = (qs.payload.get("position"), qs.quality, qs.signal_id)
        fired = evaluate_triggers(view, DialogueTail(s.last_prompt_ms, s.last_user_ms), self.now, cfg, signals)
        if not fired:
            return
        proactive = s.user_id is not None and self.consents.lookup(s.user_id, cfg.proactive_purpose, self.now) is not None
        ceiling = None
        if s.user_id is not None:
            prefs = [e for e in self.memory.entries.values() if e.user_id == s.user_id and e.live_at(self.now)]
            if preference_value(prefs, "initiative_ceiling") is not None:
                ceiling = InitiativeLevel.HINT
        for trig in fired:
            if not s.refractory.ready(trig.trigger_id, self.now):
                continue
            s.refractory.mark(trig.trigger_id, self.now)
            cap = initiative_cap(proactive_consent=proactive, has_action=trig.action in self.config.registry, preference_ceiling=ceiling)
            decision = apply_suppression(decide_level(trig, cfg.thresholds, cap, self.now), view.get(V.ACTIVITY_STATE), cfg.suppression_floor)
            body = {"kind": "initiative", "session_id": s.session_id, **decision.to_dict(), "confidence": trig.confidence}
            self.decisions.append({"at_ms": self.now, **body})
            self._audit(body)
            if decision.level is InitiativeLevel.HINT:
                self._render(s, s.primary_surface, "hint", f"hint:{trig.trigger_id}", None, False)
            elif decision.level is InitiativeLevel.SUGGEST:
                self._say(s, SUGGESTIONS[trig.kind.value])
            elif decision.level >= InitiativeLevel.PREFILL:
                if trig.action is not None and trig.trigger_id not in s.acted:
                    s.acted.add(trig.trigger_id)
                    self._propose(s, ProposedCall(trig.action, {}))
                    if any(c.op_name == trig.action and c.status is Status.PENDING_CONFIRMATION for c in s.calls.values()):
                        self._say(s, PREFILL_TEXT)
                else:
                    self._say(s, SUGGESTIONS[trig.kind.value])

    # --------------------------------------------------------------- report

    def outputs_since(self, marks: Mapping[str, int]) -> dict[str, list[Any]]:
        return {name: getattr(self, name)[marks.get(name, 0):] for name in REPORT_STREAMS}

    def marks(self) -> dict[str, int]:
        return {name: len(getattr(self, name)) for name in REPORT_STREAMS}


REPORT_STREAMS = ("timeline", "transcript", "decisions", "renders", "handoffs", "tokens")


def _leaves(body: Any) -> list[str]:
    if isinstance(body, Mapping):
        return [v for x in body.values() for v in _leaves(x)]
    if isinstance(body, (list, tuple)):
        return [v for x in body for v in _leaves(x)]
    if isinstance(body, bool) or body is None:
        return []
    return [str(body)]
