"""Whitelisted operations, the three-tier risk model, interventions and audit.

Calls move through ``pending_*`` states as prerequisites arrive; every
execution attempt leaves exactly one audit entry.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Any, Iterable, Mapping

import jsonschema
from jsonschema import Draft7Validator

from .audit import AuditLog


class Tier(str, Enum):
    LOW = "low"
    MEDIUM = "medium"
    HIGH = "high"


class Status(str, Enum):
    READY = "ready"
    PENDING_CONFIRMATION = "pending_confirmation"
    PENDING_STEP_UP = "pending_step_up"
    PENDING_DUAL_CONTROL = "pending_dual_control"
    EXECUTED = "executed"
    REJECTED = "rejected"
    SUSPENDED = "suspended"


class Intervention(str, Enum):
    PROCEED = "proceed"
    CLARIFY = "clarify"
    RECOMMEND_STAFF = "recommend_staff"
    SUSPEND = "suspend"


CLARIFY_PROMPT = "This transaction is larger than your typical activity. Can you confirm this is intentional?"
STAFF_PROMPT = "Because of unusual activity on this request, I'd like a member of staff to review it with you."
SUSPEND_PROMPT = "I've paused this operation until we can verify it. A member of staff will help you complete it."


class RegistryError(ValueError):
    pass


class CallRejected(ValueError):
    """Validation failure; nothing was executed."""


@dataclass(frozen=True)
class OperationSchema:
    op_name: str
    params: Mapping[str, Any]
    tier: Tier
    dual_control: bool = False
    description: str = ""

    @classmethod
    def from_dict(cls, doc: Mapping[str, Any]) -> OperationSchema:
        return cls(
            op_name=doc["op_name"],
            params=doc.get("params", {"type": "object"}),
            tier=Tier(doc["tier"]),
            dual_control=bool(doc.get("dual_control", False)),
            description=doc.get("description", ""),
        )


def _error_path(err: jsonschema.exceptions.SchemaError | jsonschema.exceptions.ValidationError) -> str:
    return "/".join(str(p) for p in err.absolute_path) or "<root>"


class Registry:
    """Whitelist of callable operations keyed by name."""

    def __init__(self, schemas: Iterable[OperationSchema] = ()):
        self._ops: dict[str, OperationSchema] = {}
        self._validators: dict[str, Draft7Validator] = {}
        for schema in schemas:
            self.register(schema)

    def register(self, schema: OperationSchema) -> Registry:
        if schema.op_name in self._ops:
            raise RegistryError(f"duplicate operation: {schema.op_name}")
        if schema.dual_control and schema.tier is not Tier.HIGH:
            raise RegistryError("dual control requires high tier")
        try:
            Draft7Validator.check_schema(schema.params)
        except jsonschema.exceptions.SchemaError as exc:
            raise RegistryError(f"invalid schema at params/{'/'.join(str(p) for p in exc.absolute_schema_path)}: {exc.message}") from exc
        if schema.params.get("type") != "object":
            raise RegistryError("invalid schema at params/type: parameters must be an object schema")
        self._ops[schema.op_name] = schema
        self._validators[schema.op_name] = Draft7Validator(schema.params)
        return self

    def __contains__(self, op_name: object) -> bool:
        return op_name in self._ops

    def __iter__(self):
        return iter(sorted(self._ops))

    def __len__(self) -> int:
        return len(self._ops)

    def get(self, op_name: str) -> OperationSchema:
        try:
            return self._ops[op_name]
        except KeyError:
            raise RegistryError(f"unknown operation: {op_name}") from None

    def validator(self, op_name: str) -> Draft7Validator:
        return self._validators[op_name]


def register_operation(schema: OperationSchema, registry: Registry) -> Registry:
    return registry.register(schema)


def classify_tier(op_name: str, registry: Registry) -> Tier:
    return registry.get(op_name).tier


def load_registry(path: str | Path) -> Registry:
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    ops = doc["operations"] if isinstance(doc, dict) else doc
    return Registry(OperationSchema.from_dict(d) for d in ops)


@dataclass(frozen=True)
class Confirmation:
    confirmed_at_ms: int
    channel: str = "voice"


@dataclass(frozen=True)
class StepUp:
    verified_at_ms: int
    method: str = "biometric"


@dataclass(frozen=True)
class StaffApproval:
    staff_id: str
    approved_at_ms: int


@dataclass(frozen=True)
class ActionCall:
    call_id: str
    op_name: str
    args: Mapping[str, Any]
    session_id: str
    requested_at_ms: int
    status: Status
    tier: Tier
    confirmation: Confirmation | None = None
    step_up: StepUp | None = None
    dual_control: StaffApproval | None = None
    verification: StaffApproval | None = None
    intervention: Intervention | None = None
    intervention_at_ms: int | None = None
    reason: str = ""

    def to_dict(self) -> dict[str, Any]:
        return {
            "call_id": self.call_id,
            "op_name": self.op_name,
            "args": dict(self.args),
            "session_id": self.session_id,
            "requested_at_ms": self.requested_at_ms,
            "status": self.status.value,
            "tier": self.tier.value,
            "confirmation": self.confirmation.confirmed_at_ms if self.confirmation else None,
            "step_up": self.step_up.verified_at_ms if self.step_up else None,
            "dual_control": self.dual_control.staff_id if self.dual_control else None,
            "verification": self.verification.staff_id if self.verification else None,
            "intervention": self.intervention.value if self.intervention else None,
            "reason": self.reason,
        }


def validate_call(
    op_name: str,
    args: Mapping[str, Any],
    registry: Registry,
    *,
    call_id: str = "call-1",
    session_id: str = "s1",
    now_ms: int = 0,
) -> ActionCall:
    """Check whitelist and argument schema; raise :class:`CallRejected` on failure."""
    if op_name not in registry:
        raise CallRejected("not whitelisted")
    if not isinstance(args, Mapping):
        raise CallRejected("invalid field: <root>: arguments must be an object")
    errors = sorted(registry.validator(op_name).iter_errors(dict(args)), key=lambda e: ([str(p) for p in e.absolute_path], e.message))
    if errors:
        err = errors[0]
        if err.validator == "required":
            missing = [f for f in err.validator_value if f not in err.instance]
            prefix = _error_path(err)
            name = missing[0] if prefix == "<root>" else f"{prefix}/{missing[0]}"
            raise CallRejected(f"missing field: {name}")
        raise CallRejected(f"invalid field: {_error_path(err)}: {err.message}")
    tier = classify_tier(op_name, registry)
    status = Status.READY if tier is Tier.LOW else Status.PENDING_CONFIRMATION
    return ActionCall(call_id, op_name, dict(args), session_id, now_ms, status, tier)


@dataclass(frozen=True)
class RiskAssessment:
    call_id: str
    score: float = 0.0
    indicators: tuple[str, ...] = ()
    source: str = "risk-stub"

    def __post_init__(self) -> None:
        if not 0.0 <= self.score <= 1.0:
            raise ValueError("risk score must be in [0, 1]")


@dataclass(frozen=True)
class InterventionThresholds:
    clarify: float = 0.25
    staff: float = 0.6
    suspend: float = 0.85

    def __post_init__(self) -> None:
        if not 0.0 <= self.clarify <= self.staff <= self.suspend <= 1.0:
            raise ValueError("intervention thresholds must be ordered within [0, 1]")


def evaluate_intervention(risk: RiskAssessment, thresholds: InterventionThresholds = InterventionThresholds()) -> Intervention:
    if risk.score >= thresholds.suspend:
        return Intervention.SUSPEND
    if risk.score >= thresholds.staff:
        return Intervention.RECOMMEND_STAFF
    if risk.score >= thresholds.clarify:
        return Intervention.CLARIFY
    return Intervention.PROCEED


INTERVENTION_PROMPTS = {
    Intervention.CLARIFY: CLARIFY_PROMPT,
    Intervention.RECOMMEND_STAFF: STAFF_PROMPT,
    Intervention.SUSPEND: SUSPEND_PROMPT,
}


class BackendError(RuntimeError):
    pass


@dataclass
class BackendStubs:
    """Scripted banking backend; logs every invocation it receives."""

    results: dict[str, Any] = field(default_factory=dict)
    failures: dict[str, str] = field(default_factory=dict)
    calls: list[tuple[str, dict[str, Any]]] = field(default_factory=list)

    def invoke(self, op_name: str, args: Mapping[str, Any]) -> Any:
        self.calls.append((op_name, dict(args)))
        if op_name in self.failures:
            raise BackendError(self.failures[op_name])
        return self.results.get(op_name, {"ok": True, "op": op_name})


@dataclass(frozen=True)
class ExecutionResult:
    executed: bool
    output: Any = None
    prompt: str | None = None
    intervention: Intervention = Intervention.PROCEED


def _missing_prerequisite(call: ActionCall, schema: OperationSchema) -> Status | None:
    if call.tier is Tier.LOW:
        return None
    if call.confirmation is None:
        return Status.PENDING_CONFIRMATION
    if call.tier is Tier.HIGH:
        if call.step_up is None:
            return Status.PENDING_STEP_UP
        if schema.dual_control and call.dual_control is None:
            return Status.PENDING_DUAL_CONTROL
    return None


def execute_call(
    call: ActionCall,
    risk: RiskAssessment | None,
    registry: Registry,
    backend: BackendStubs,
    audit: AuditLog,
    *,
    now_ms: int,
    context_digest: str = "",
    consent_state: Iterable[str] = (),
    thresholds: InterventionThresholds = InterventionThresholds(),
) -> tuple[ExecutionResult, ActionCall]:
    """Attempt to execute ``call``; returns the outcome and the updated call.

    The risk intervention runs first. Staff verification lifts a suspension;
    a clarify outcome needs a confirmation given after the clarifying prompt.
    """
    if call.status in (Status.EXECUTED, Status.REJECTED):
        raise ValueError(f"call {call.call_id} already {call.status.value}")
    if call.op_name not in registry:
        raise CallRejected("not whitelisted")
    schema = registry.get(call.op_name)
    risk = risk or RiskAssessment(call.call_id)

    outcome = Intervention.PROCEED if call.verification is not None else evaluate_intervention(risk, thresholds)
    prompt = INTERVENTION_PROMPTS.get(outcome)
    if outcome is not call.intervention:
        call = replace(call, intervention=outcome, intervention_at_ms=now_ms)

    status: Status | None
    reason = ""
    if outcome is Intervention.SUSPEND:
        status, reason = Status.SUSPENDED, "suspended pending verification"
    else:
        status = _missing_prerequisite(call, schema)
        if status is None and outcome is Intervention.CLARIFY:
            conf = call.confirmation
            if conf is None or call.intervention_at_ms is None or conf.confirmed_at_ms < call.intervention_at_ms:
                status, reason = Status.PENDING_CONFIRMATION, "clarification requested"
        if status is None and outcome is Intervention.RECOMMEND_STAFF and call.dual_control is None:
            status, reason = Status.PENDING_DUAL_CONTROL, "staff review recommended"

    output = None
    if status is None:
        try:
            output = backend.invoke(call.op_name, call.args)
            status = Status.EXECUTED
        except BackendError as exc:
            status, reason = Status.REJECTED, f"backend: {exc}"
    call = replace(call, status=status, reason=reason)

    audit.append({
        "timestamp_ms": now_ms,
        "kind": "action",
        "call_id": call.call_id,
        "session_id": call.session_id,
        "op_name": call.op_name,
        "tier": call.tier.value,
        "status": status.value,
        "reason": reason,
        "context_digest": context_digest,
        "consent_state": sorted(consent_state),
        "risk_score": risk.score,
        "intervention": outcome.value,
        "confirmation": call.confirmation is not None,
        "step_up": call.step_up is not None,
        "dual_control": call.dual_control is not None,
        "verification": call.verification is not None,
    })
    return ExecutionResult(status is Status.EXECUTED, output, prompt, outcome), call


def default_registry_doc() -> list[dict[str, Any]]:
    from .config import load_default

    return load_default("registry.json")["operations"]


def default_registry() -> Registry:
    return Registry(OperationSchema.from_dict(d) for d in default_registry_doc())

