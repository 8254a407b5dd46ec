"""Cross-surface session transfer and structured human handoff.

Token wire form (ASCII)::

    base64url(canonical JSON body, no padding) "." hex(HMAC-SHA256(secret, encoded body))

The MAC covers the encoded body exactly as transmitted, so every byte of the
token is covered by the integrity check.
"""

from __future__ import annotations

import base64
import binascii
import hashlib
import hmac
import json
from collections import deque
from dataclasses import dataclass, field, replace
from typing import Any, Iterable, Mapping, Sequence

from .context import canonical_json, digest


class TokenError(ValueError):
    pass


class HandoffError(ValueError):
    pass


@dataclass(frozen=True)
class ContinuityToken:
    token_id: str
    session_id: str
    issued_for: str
    issued_at_ms: int
    expires_at_ms: int
    scope: tuple[str, ...]
    signature: str = ""

    def body(self) -> dict[str, Any]:
        return {
            "token_id": self.token_id,
            "session_id": self.session_id,
            "issued_for": self.issued_for,
            "issued_at_ms": self.issued_at_ms,
            "expires_at_ms": self.expires_at_ms,
            "scope": list(self.scope),
        }

    def encode(self) -> bytes:
        return _encode_body(self.body()) + b"." + self.signature.encode("ascii")


def _encode_body(body: Mapping[str, Any]) -> bytes:
    return base64.urlsafe_b64encode(canonical_json(body).encode("utf-8")).rstrip(b"=")


def _sign(encoded_body: bytes, secret: bytes) -> str:
    return hmac.new(secret, encoded_body, hashlib.sha256).hexdigest()


@dataclass
class SessionHandle:
    session_id: str
    surface_id: str
    user_id: str | None = None
    active: bool = True


@dataclass
class SessionStore:
    sessions: dict[str, SessionHandle] = field(default_factory=dict)
    redeemed: set[str] = field(default_factory=set)
    issued: dict[str, str] = field(default_factory=dict)  # token_id -> session_id

    def open(self, session_id: str, surface_id: str, user_id: str | None = None) -> SessionHandle:
        handle = SessionHandle(session_id, surface_id, user_id)
        self.sessions[session_id] = handle
        return handle

    def close(self, session_id: str) -> None:
        handle = self.sessions.get(session_id)
        if handle is not None:
            handle.active = False
        # tokens die with the session
        for token_id, sid in list(self.issued.items()):
            if sid == session_id:
                self.redeemed.add(token_id)


def mint_continuity_token(
    session: SessionHandle,
    target: str,
    scope: Iterable[str],
    ttl_ms: int,
    secret: bytes,
    now_ms: int,
    store: SessionStore | None = None,
) -> ContinuityToken:
    if not session.active:
        raise TokenError("inactive session")
    if ttl_ms <= 0:
        raise TokenError("ttl must be positive")
    scope_t = tuple(sorted(set(scope)))
    seed = canonical_json([session.session_id, target, now_ms, ttl_ms, list(scope_t)])
    token_id = "tok-" + digest(seed)[:16]
    unsigned = ContinuityToken(token_id, session.session_id, target, now_ms, now_ms + ttl_ms, scope_t)
    token = replace(unsigned, signature=_sign(_encode_body(unsigned.body()), secret))
    if store is not None:
        store.issued[token_id] = session.session_id
    return token


def decode_token(raw: bytes | str, secret: bytes) -> ContinuityToken:
    """Parse and authenticate a token; any defect is reported as a bad signature."""
    try:
        data = raw.encode("ascii") if isinstance(raw, str) else bytes(raw)
        encoded, sig = data.split(b".")
        expected = _sign(encoded, secret).encode("ascii")
        if not hmac.compare_digest(expected, sig):
            raise TokenError("invalid signature")
        pad = b"=" * (-len(encoded) % 4)
        body = json.loads(base64.urlsafe_b64decode(encoded + pad).decode("utf-8"))
        token = ContinuityToken(
            body["token_id"], body["session_id"], body["issued_for"],
            body["issued_at_ms"], body["expires_at_ms"], tuple(body["scope"]), sig.decode("ascii"),
        )
    except TokenError:
        raise
    except (ValueError, KeyError, TypeError, UnicodeError, binascii.Error) as exc:
        raise TokenError("invalid signature") from exc
    return token


def redeem_continuity_token(raw: bytes | str, secret: bytes, now_ms: int, store: SessionStore) -> SessionHandle:
    token = decode_token(raw, secret)
    if now_ms >= token.expires_at_ms:
        raise TokenError("expired")
    if token.token_id in store.redeemed:
        raise TokenError("already redeemed")
    handle = store.sessions.get(token.session_id)
    if handle is None or not handle.active:
        raise TokenError("unknown session")
    store.redeemed.add(token.token_id)
    handle.surface_id = token.issued_for
    return handle


@dataclass(frozen=True)
class StaffMember:
    staff_id: str
    specializations: frozenset[str] = frozenset()
    availability: str = "free"
    workload: int = 0

    def __post_init__(self) -> None:
        if self.workload < 0:
            raise ValueError("workload must be non-negative")
        if self.availability not in ("free", "busy", "offline"):
            raise ValueError(f"unknown availability {self.availability!r}")

    @property
    def generalist(self) -> bool:
        return "general" in self.specializations or not self.specializations

    @classmethod
    def from_dict(cls, doc: Mapping[str, Any]) -> StaffMember:
        return cls(doc["staff_id"], frozenset(doc.get("specializations", ())), doc.get("availability", "free"), int(doc.get("workload", 0)))

    def to_dict(self) -> dict[str, Any]:
        return {
            "staff_id": self.staff_id,
            "specializations": sorted(self.specializations),
            "availability": self.availability,
            "workload": self.workload,
        }


def route_handoff(topic: str, roster: Sequence[StaffMember]) -> StaffMember | None:
    """Free specialist with least workload, else free generalist, else None."""
    free = [m for m in roster if m.availability == "free"]
    for pool in ([m for m in free if topic in m.specializations], [m for m in free if m.generalist]):
        if pool:
            return min(pool, key=lambda m: (m.workload, m.staff_id))
    return None


@dataclass
class HandoffQueue:
    """FIFO of handoffs waiting for a free staff member."""

    pending: deque = field(default_factory=deque)

    def push(self, session_id: str, topic: str) -> None:
        self.pending.append((session_id, topic))

    def drain(self, roster: Sequence[StaffMember]) -> list[tuple[str, str, StaffMember]]:
        routed = []
        taken: set[str] = set()
        while self.pending:
            session_id, topic = self.pending[0]
            member = route_handoff(topic, [m for m in roster if m.staff_id not in taken])
            if member is None:
                break
            self.pending.popleft()
            taken.add(member.staff_id)
            routed.append((session_id, topic, member))
        return routed


@dataclass(frozen=True)
class HandoffSummary:
    session_id: str
    stated_intent: str
    completed_steps: tuple[str, ...]
    retrieved_data_refs: tuple[str, ...]
    open_questions: tuple[str, ...]
    transcript_ref: str
    goals: tuple[str, ...] = ()

    def to_dict(self) -> dict[str, Any]:
        return {
            "session_id": self.session_id,
            "stated_intent": self.stated_intent,
            "goals": list(self.goals),
            "completed_steps": list(self.completed_steps),
            "retrieved_data_refs": list(self.retrieved_data_refs),
            "open_questions": list(self.open_questions),
            "transcript_ref": self.transcript_ref,
        }

    def to_json(self) -> str:
        return canonical_json(self.to_dict())


# conversational moves rather than customer goals
_META_INTENTS = frozenset({"unknown", "greeting", "request_advisor"})


def build_handoff_summary(
    session_id: str,
    turns: Sequence[Any],
    intents: Sequence[str],
    audit_entries: Iterable[Mapping[str, Any]],
    allowed_refs: Iterable[str],
    open_questions: Iterable[str] = (),
    goals: Iterable[str] = (),
) -> HandoffSummary:
    """Assemble what staff need so the customer does not start over.

    Only item ids travel; bodies stay behind the receiving terminal's own
    authenticated lookup.
    """
    if not turns:
        raise HandoffError("empty session")
    intent = next((i for i in reversed(intents) if i not in _META_INTENTS), "unknown")
    steps = tuple(
        f"{e['op_name']}:{e['call_id']}"
        for e in audit_entries
        if e.get("kind") == "action" and e.get("status") == "executed" and e.get("session_id") == session_id
    )
    return HandoffSummary(
        session_id=session_id,
        stated_intent=intent,
        completed_steps=steps,
        retrieved_data_refs=tuple(dict.fromkeys(allowed_refs)),
        open_questions=tuple(open_questions),
        transcript_ref=f"transcript:{session_id}:{len(turns)}",
        goals=tuple(goals),
    )
