"""Shared domain vocabulary: signals, provenance, sensitivity, surfaces, state.

Every other module speaks in these types. They are frozen dataclasses; the
``payload`` and ``value`` members hold plain JSON-compatible data and are
treated as read-only by convention.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Mapping


def canonical_json(obj: Any) -> str:
    """Serialize ``obj`` with sorted keys and no insignificant whitespace."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=True, allow_nan=False)


def digest(text: str | bytes) -> str:
    if isinstance(text, str):
        text = text.encode("utf-8")
    return hashlib.sha256(text).hexdigest()


class Layer(str, Enum):
    PHYSICAL = "physical"
    DEVICE = "device"
    ENTERPRISE = "enterprise"


class Acquisition(str, Enum):
    AMBIENT = "ambient"
    CONSENTED = "consented"
    DERIVED = "derived"


_SENSITIVITY_RANK = {"public": 0, "internal": 1, "confidential": 2, "restricted": 3}


class Sensitivity(str, Enum):
    PUBLIC = "public"
    INTERNAL = "internal"
    CONFIDENTIAL = "confidential"
    RESTRICTED = "restricted"

    @property
    def rank(self) -> int:
        return _SENSITIVITY_RANK[self.value]

    def __lt__(self, other: object) -> bool:
        if not isinstance(other, Sensitivity):
            return NotImplemented
        return self.rank < other.rank

    # str comparison methods would otherwise compare lexically
    def __le__(self, other: object) -> bool:
        if not isinstance(other, Sensitivity):
            return NotImplemented
        return self.rank <= other.rank

    def __gt__(self, other: object) -> bool:
        if not isinstance(other, Sensitivity):
            return NotImplemented
        return self.rank > other.rank

    def __ge__(self, other: object) -> bool:
        if not isinstance(other, Sensitivity):
            return NotImplemented
        return self.rank >= other.rank


class SurfaceKind(str, Enum):
    SHARED_DISPLAY = "shared_display"
    KIOSK_SCREEN = "kiosk_screen"
    PERSONAL_DEVICE = "personal_device"
    AUDIO_PUBLIC = "audio_public"
    AUDIO_PRIVATE = "audio_private"
    STAFF_TERMINAL = "staff_terminal"
    COBROWSE_PANEL = "cobrowse_panel"


class Privacy(str, Enum):
    SHARED = "shared"
    PERSONAL = "personal"
    AUTHENTICATED = "authenticated"


# kinds whose privacy class is fixed; others are declared per surface
FIXED_PRIVACY = {
    SurfaceKind.SHARED_DISPLAY: Privacy.SHARED,
    SurfaceKind.AUDIO_PUBLIC: Privacy.SHARED,
    SurfaceKind.PERSONAL_DEVICE: Privacy.PERSONAL,
    SurfaceKind.STAFF_TERMINAL: Privacy.AUTHENTICATED,
    SurfaceKind.COBROWSE_PANEL: Privacy.AUTHENTICATED,
}

CAPABILITIES = ("text", "visual", "audio")


class VariableName(str, Enum):
    USER_PRESENT = "user_present"
    USER_POSITION = "user_position"
    ACTIVITY_STATE = "activity_state"
    QUEUE_LENGTH = "queue_length"
    OCCUPANCY = "occupancy"
    NOISE_LEVEL = "noise_level"
    APPOINTMENT = "appointment"
    WORKFLOW_STAGE = "workflow_stage"
    ADVISOR_AVAILABILITY = "advisor_availability"
    CONSENT_SCOPES = "consent_scopes"
    ACTIVE_SURFACES = "active_surfaces"


UNKNOWN = None
"""Sentinel state value for variables with no usable evidence."""


@dataclass(frozen=True)
class Provenance:
    source_id: str
    sensitivity: Sensitivity = Sensitivity.INTERNAL
    acquisition: Acquisition = Acquisition.AMBIENT
    note: str | None = None

    def to_dict(self) -> dict[str, Any]:
        return {
            "source_id": self.source_id,
            "sensitivity": self.sensitivity.value,
            "acquisition": self.acquisition.value,
            "note": self.note,
        }


# Payload schemas: payload_type -> {field: (accepted types, required)}
_NUM = (int, float)
PAYLOAD_SCHEMAS: dict[str, dict[str, tuple[tuple[type, ...], bool]]] = {
    "vad": {"speech": ((bool,), True)},
    "presence": {"present": ((bool,), True), "zone": ((str,), False)},
    "position": {"zone": ((str,), True), "x_m": (_NUM, False), "y_m": (_NUM, False)},
    "occupancy": {"count": ((int,), True)},
    "noise": {"noise_db": (_NUM, True)},
    "gaze": {"target": ((str,), True)},
    "diarization": {"speakers": ((int,), True), "other_speaker": ((bool,), True)},
    "transcript": {"role": ((str,), True), "text": ((str,), True)},
    "device_session": {
        "surface_id": ((str,), True),
        "active": ((bool,), True),
        "in_use": ((bool,), False),
    },
    "auth": {"user_id": ((str,), True), "auth_level": ((str,), True), "method": ((str,), False)},
    "workflow": {"stage": ((str,), True)},
    "appointment": {
        "user_id": ((str,), True),
        "purpose": ((str,), True),
        "at_ms": ((int,), True),
        "name": ((str,), False),
        "advisor_id": ((str,), False),
        "reference": ((str,), False),
    },
    "queue": {"tickets": ((int,), True), "position": ((int,), False)},
    "risk": {"score": (_NUM, True), "call_ref": ((str,), False), "indicators": ((list,), False)},
    "staff_status": {
        "staff_id": ((str,), True),
        "availability": ((str,), True),
        "workload": ((int,), False),
        "free_at_ms": ((int,), False),
        "specializations": ((list,), False),
    },
    "consent": {
        "user_id": ((str,), True),
        "purpose": ((str,), True),
        "granted_at_ms": ((int,), True),
        "expires_at_ms": ((int,), True),
        "channel": ((str,), False),
    },
    "generic": {},
}

CHANNEL_PAYLOAD: dict[str, str] = {
    "vad": "vad",
    "presence": "presence",
    "camera_localization": "position",
    "ble_localization": "position",
    "uwb_localization": "position",
    "occupancy": "occupancy",
    "noise_db": "noise",
    "gaze": "gaze",
    "diarization": "diarization",
    "transcript": "transcript",
    "device_session": "device_session",
    "auth": "auth",
    "workflow": "workflow",
    "appointment": "appointment",
    "queue": "queue",
    "risk_score": "risk",
    "staff_status": "staff_status",
    "consent": "consent",
}


def payload_type_for(channel: str) -> str:
    """Known channels have a fixed payload variant; anything else is ``generic``."""
    return CHANNEL_PAYLOAD.get(channel, "generic")


@dataclass(frozen=True)
class ContextSignal:
    signal_id: str
    layer: Layer
    channel: str
    timestamp_ms: int
    payload_type: str
    payload: Mapping[str, Any]
    quality: float
    provenance: Provenance

    def to_dict(self) -> dict[str, Any]:
        return {
            "signal_id": self.signal_id,
            "layer": self.layer.value,
            "channel": self.channel,
            "timestamp_ms": self.timestamp_ms,
            "payload_type": self.payload_type,
            "payload": dict(self.payload),
            "quality": self.quality,
            "provenance": self.provenance.to_dict(),
        }

    def to_json(self) -> str:
        return canonical_json(self.to_dict())


class SignalFormatError(ValueError):
    """A JSONL signal record could not be decoded into a valid signal."""


def signal_from_dict(doc: Mapping[str, Any]) -> ContextSignal:
    try:
        prov = doc["provenance"]
        signal = ContextSignal(
            signal_id=doc["signal_id"],
            layer=Layer(doc["layer"]),
            channel=doc["channel"],
            timestamp_ms=doc["timestamp_ms"],
            payload_type=doc["payload_type"],
            payload=dict(doc["payload"]),
            quality=doc["quality"],
            provenance=Provenance(
                source_id=prov["source_id"],
                sensitivity=Sensitivity(prov["sensitivity"]),
                acquisition=Acquisition(prov["acquisition"]),
                note=prov.get("note"),
            ),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise SignalFormatError(f"malformed signal record: {exc}") from exc
    violations = validate_signal(signal)
    if violations:
        raise SignalFormatError("; ".join(violations))
    return signal


def signal_from_json(line: str) -> ContextSignal:
    try:
        doc = json.loads(line)
    except json.JSONDecodeError as exc:
        raise SignalFormatError(f"invalid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise SignalFormatError("signal record must be a JSON object")
    return signal_from_dict(doc)


def _is_number(value: Any) -> bool:
    return isinstance(value, (int, float)) and not isinstance(value, bool)


def validate_signal(signal: ContextSignal) -> list[str]:
    """Return the list of invariant violations; an empty list means valid.

    ``signal_id`` uniqueness is a property of a run and is enforced by the
    ingestion pipeline, not here.
    """
    problems: list[str] = []
    if not isinstance(signal.signal_id, str) or not signal.signal_id:
        problems.append("signal_id: must be a non-empty string")
    if not isinstance(signal.layer, Layer):
        problems.append("layer: unknown layer")
    if not isinstance(signal.channel, str) or not signal.channel:
        problems.append("channel: must be a non-empty string")
    if not isinstance(signal.timestamp_ms, int) or isinstance(signal.timestamp_ms, bool):
        problems.append("timestamp_ms: must be an integer")
    elif signal.timestamp_ms < 0:
        problems.append("timestamp_ms: negative timestamp")
    if not _is_number(signal.quality):
        problems.append("quality: must be a number")
    elif not 0.0 <= signal.quality <= 1.0:
        problems.append("quality out of range")
    if not isinstance(signal.provenance, Provenance):
        problems.append("provenance: missing")
    else:
        if not signal.provenance.source_id:
            problems.append("provenance.source_id: empty")
        if signal.provenance.acquisition is Acquisition.DERIVED and not signal.provenance.note:
            problems.append("provenance.note: derived signal must reference a parent signal")

    if isinstance(signal.channel, str):
        expected = payload_type_for(signal.channel)
        if signal.payload_type != expected:
            problems.append("payload/channel mismatch")
        elif not isinstance(signal.payload, Mapping):
            problems.append("payload: must be an object")
        else:
            problems.extend(_payload_violations(signal.payload_type, signal.payload))
    return problems


def _payload_violations(payload_type: str, payload: Mapping[str, Any]) -> list[str]:
    schema = PAYLOAD_SCHEMAS[payload_type]
    problems = []
    for name, (types, required) in schema.items():
        if name not in payload or payload[name] is None:
            if required:
                problems.append(f"payload.{name}: missing field")
            continue
        value = payload[name]
        if bool not in types and isinstance(value, bool):
            problems.append(f"payload.{name}: wrong type")
        elif not isinstance(value, types):
            problems.append(f"payload.{name}: wrong type")
    if payload_type == "occupancy" and isinstance(payload.get("count"), int) and payload["count"] < 0:
        problems.append("payload.count: negative")
    if payload_type == "risk" and _is_number(payload.get("score")) and not 0 <= payload["score"] <= 1:
        problems.append("payload.score: out of range")
    return problems


@dataclass(frozen=True)
class Surface:
    surface_id: str
    kind: SurfaceKind
    privacy: Privacy
    capabilities: frozenset[str] = frozenset({"text", "visual"})

    def __post_init__(self) -> None:
        fixed = FIXED_PRIVACY.get(self.kind)
        if fixed is not None and self.privacy is not fixed:
            raise ValueError(f"{self.kind.value} surfaces must have privacy={fixed.value}")
        unknown = set(self.capabilities) - set(CAPABILITIES)
        if unknown:
            raise ValueError(f"unknown capabilities: {sorted(unknown)}")

    @classmethod
    def from_dict(cls, doc: Mapping[str, Any]) -> Surface:
        kind = SurfaceKind(doc["kind"])
        privacy = Privacy(doc["privacy"]) if "privacy" in doc else FIXED_PRIVACY.get(kind, Privacy.SHARED)
        return cls(doc["surface_id"], kind, privacy, frozenset(doc.get("capabilities", ("text", "visual"))))

    def to_dict(self) -> dict[str, Any]:
        return {
            "surface_id": self.surface_id,
            "kind": self.kind.value,
            "privacy": self.privacy.value,
            "capabilities": sorted(self.capabilities),
        }


@dataclass(frozen=True)
class StateEntry:
    value: Any
    confidence: float
    updated_at_ms: int
    contributors: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence out of range: {self.confidence}")
        if self.value is UNKNOWN and self.confidence != 0:
            raise ValueError("unknown value must carry zero confidence")

    @property
    def known(self) -> bool:
        return self.value is not UNKNOWN

    def to_dict(self) -> dict[str, Any]:
        return {
            "value": self.value,
            "confidence": self.confidence,
            "updated_at_ms": self.updated_at_ms,
            "contributors": list(self.contributors),
        }


UNKNOWN_ENTRY = StateEntry(UNKNOWN, 0.0, 0, ())


@dataclass(frozen=True)
class SituationalState:
    session_id: str
    variables: Mapping[VariableName, StateEntry] = field(default_factory=dict)

    def get(self, name: VariableName) -> StateEntry:
        return self.variables.get(name, UNKNOWN_ENTRY)

    def value(self, name: VariableName) -> Any:
        return self.get(name).value

    def to_dict(self) -> dict[str, Any]:
        return {
            "session_id": self.session_id,
            "variables": {name.value: entry.to_dict() for name, entry in self.variables.items()},
        }


def snapshot_hash(state: SituationalState) -> str:
    """Digest over the canonical form; independent of map insertion order."""
    return digest(canonical_json(state.to_dict()))


@dataclass(frozen=True)
class ConsentRecord:
    user_id: str
    purpose: str
    granted_at_ms: int
    expires_at_ms: int
    channel: str = "kiosk"

    def __post_init__(self) -> None:
        if self.expires_at_ms <= self.granted_at_ms:
            raise ValueError("consent must expire after it is granted")

    def active_at(self, now_ms: int) -> bool:
        # expiry is exclusive: expires_at == now means expired
        return self.granted_at_ms <= now_ms < self.expires_at_ms

    def to_dict(self) -> dict[str, Any]:
        return {
            "user_id": self.user_id,
            "purpose": self.purpose,
            "granted_at_ms": self.granted_at_ms,
            "expires_at_ms": self.expires_at_ms,
            "channel": self.channel,
        }
