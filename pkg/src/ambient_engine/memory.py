"""Two-tier memory: the session transcript and a purpose-scoped long-term store."""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping, Sequence

from .context import canonical_json

DAY_MS = 86_400_000

_WORD = re.compile(r"[a-z0-9]+")


def terms(text: str) -> set[str]:
    return set(_WORD.findall(text.lower()))


class Role(str, Enum):
    USER = "user"
    ASSISTANT = "assistant"
    SYSTEM_EVENT = "system_event"


@dataclass(frozen=True)
class DialogueTurn:
    turn_id: int
    role: Role
    text: str
    timestamp_ms: int
    active_context: tuple[str, ...] = ()

    def to_dict(self) -> dict[str, Any]:
        return {
            "turn_id": self.turn_id,
            "role": self.role.value,
            "text": self.text,
            "timestamp_ms": self.timestamp_ms,
            "active_context": list(self.active_context),
        }


class MemoryStoreError(ValueError):
    """Raised for out-of-order turns and missing memory entries."""


@dataclass
class ShortTermMemory:
    session_id: str
    turns: list[DialogueTurn] = field(default_factory=list)
    ended_at_ms: int | None = None

    @property
    def next_turn_id(self) -> int:
        return self.turns[-1].turn_id + 1 if self.turns else 1

    def append_turn(self, turn: DialogueTurn) -> ShortTermMemory:
        if turn.turn_id != self.next_turn_id:
            raise MemoryStoreError(f"turn_id {turn.turn_id} out of sequence (expected {self.next_turn_id})")
        self.turns.append(turn)
        return self

    def add(self, role: Role, text: str, timestamp_ms: int, active_context: Iterable[str] = ()) -> DialogueTurn:
        turn = DialogueTurn(self.next_turn_id, role, text, timestamp_ms, tuple(active_context))
        self.append_turn(turn)
        return turn


def append_turn(session: ShortTermMemory, turn: DialogueTurn) -> ShortTermMemory:
    return session.append_turn(turn)


class RetentionClass(str, Enum):
    SESSION_ONLY = "session_only"
    DAYS_30 = "days_30"
    DAYS_365 = "days_365"
    UNTIL_REVOKED = "until_revoked"


_RETENTION_MS = {RetentionClass.DAYS_30: 30 * DAY_MS, RetentionClass.DAYS_365: 365 * DAY_MS}


class MemoryKind(str, Enum):
    SUMMARY = "summary"
    PREFERENCE = "preference"
    FACT = "fact"


@dataclass(frozen=True)
class MemoryEntry:
    entry_id: str
    user_id: str
    kind: MemoryKind
    body: str
    purpose_tags: frozenset[str]
    created_at_ms: int
    retention_class: RetentionClass
    expires_at_ms: int | None
    pii: bool = False
    corrected_at_ms: int | None = None
    attributes: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.pii and not self.purpose_tags:
            raise ValueError("pii-bearing memory needs a purpose tag")

    def live_at(self, now_ms: int) -> bool:
        return self.expires_at_ms is None or now_ms < self.expires_at_ms

    def term_set(self) -> set[str]:
        return terms(self.body) | {self.kind.value} | {t for tag in self.purpose_tags for t in terms(tag)} | set(self.attributes.get("terms", ()))

    def to_dict(self) -> dict[str, Any]:
        return {
            "entry_id": self.entry_id,
            "user_id": self.user_id,
            "kind": self.kind.value,
            "body": self.body,
            "purpose_tags": sorted(self.purpose_tags),
            "created_at_ms": self.created_at_ms,
            "retention_class": self.retention_class.value,
            "expires_at_ms": self.expires_at_ms,
            "pii": self.pii,
            "corrected_at_ms": self.corrected_at_ms,
            "attributes": dict(self.attributes),
        }

    @classmethod
    def from_dict(cls, doc: Mapping[str, Any]) -> MemoryEntry:
        return cls(
            entry_id=doc["entry_id"],
            user_id=doc["user_id"],
            kind=MemoryKind(doc["kind"]),
            body=doc["body"],
            purpose_tags=frozenset(doc["purpose_tags"]),
            created_at_ms=doc["created_at_ms"],
            retention_class=RetentionClass(doc["retention_class"]),
            expires_at_ms=doc["expires_at_ms"],
            pii=doc.get("pii", False),
            corrected_at_ms=doc.get("corrected_at_ms"),
            attributes=doc.get("attributes", {}),
        )


@dataclass(frozen=True)
class RetentionPolicy:
    purpose_classes: Mapping[str, RetentionClass]
    default_class: RetentionClass = RetentionClass.DAYS_30

    @classmethod
    def from_dict(cls, doc: Mapping[str, Any]) -> RetentionPolicy:
        return cls(
            {k: RetentionClass(v) for k, v in doc.get("purpose_classes", {}).items()},
            RetentionClass(doc.get("default_class", "days_30")),
        )

    def class_for(self, purpose: str) -> RetentionClass:
        return self.purpose_classes.get(purpose, self.default_class)

    def expiry(self, cls_: RetentionClass, created_at_ms: int, session_end_ms: int) -> int | None:
        if cls_ is RetentionClass.UNTIL_REVOKED:
            return None
        if cls_ is RetentionClass.SESSION_ONLY:
            return session_end_ms
        return created_at_ms + _RETENTION_MS[cls_]


DEFAULT_RETENTION = RetentionPolicy({
    "service-history": RetentionClass.DAYS_365,
    "preferences": RetentionClass.UNTIL_REVOKED,
    "transcripts": RetentionClass.SESSION_ONLY,
})


# (pattern, preference key); first capture group, if any, is the value
PREFERENCE_RULES: tuple[tuple[re.Pattern[str], str], ...] = (
    (re.compile(r"\bprefer (?:to speak |speaking |to talk )?(?:in )?(english|spanish|french|german|mandarin|arabic|hindi|portuguese)\b", re.I), "language"),
    (re.compile(r"\b(?:please )?keep it (brief|short)\b", re.I), "verbosity"),
    (re.compile(r"\b(?:please )?(?:don't|do not) interrupt me\b", re.I), "initiative_ceiling"),
    (re.compile(r"\bprefer (formal|informal|casual)\b", re.I), "formality"),
)


@dataclass(frozen=True)
class SessionDigest:
    """What distillation needs from a finished session."""

    session_id: str
    user_id: str
    ended_at_ms: int
    intent: str | None
    topic: str | None
    user_utterances: tuple[str, ...]


def distill_session(
    digest: SessionDigest,
    consented_purposes: Iterable[str],
    retention: RetentionPolicy = DEFAULT_RETENTION,
) -> list[MemoryEntry]:
    """Rule-based extraction of long-term memories from an ended session.

    Entries whose purpose lacks consent are dropped; session-only entries are
    never returned since they must not outlive the session.
    """
    consented = set(consented_purposes)
    out: list[MemoryEntry] = []
    now = digest.ended_at_ms

    def emit(kind: MemoryKind, body: str, purpose: str, attributes: Mapping[str, Any]) -> None:
        if purpose not in consented:
            return
        cls_ = retention.class_for(purpose)
        if cls_ is RetentionClass.SESSION_ONLY:
            return
        entry_id = f"{digest.session_id}-m{len(out) + 1}"
        out.append(MemoryEntry(entry_id, digest.user_id, kind, body, frozenset({purpose}), now, cls_, retention.expiry(cls_, now, now), False, None, dict(attributes)))

    if digest.intent and digest.intent not in ("unknown", "greeting"):
        topic = digest.topic or digest.intent.replace("_", " ")
        emit(MemoryKind.SUMMARY, f"interest in {topic}", "service-history", {"intent": digest.intent, "terms": sorted(terms(digest.intent))})
    seen: set[str] = set()
    for utterance in digest.user_utterances:
        for pattern, key in PREFERENCE_RULES:
            match = pattern.search(utterance)
            if match is None or key in seen:
                continue
            seen.add(key)
            value = match.group(1).lower() if match.groups() else "true"
            body = {"language": f"prefers {value}", "verbosity": "prefers brief answers",
                    "initiative_ceiling": "prefers not to be interrupted", "formality": f"prefers {value} tone"}[key]
            emit(MemoryKind.PREFERENCE, body, "preferences", {"preference": key, "value": value})
    return out


AuditHook = Callable[[Mapping[str, Any]], Any]


class LongTermStore:
    """Long-term entries; single writer, optional JSONL persistence."""

    def __init__(self, entries: Iterable[MemoryEntry] = (), audit: AuditHook | None = None):
        self.entries: dict[str, MemoryEntry] = {}
        self.audit = audit
        for entry in entries:
            self.entries[entry.entry_id] = entry

    def add(self, entries: Iterable[MemoryEntry]) -> None:
        for entry in entries:
            self.entries[entry.entry_id] = entry

    def __len__(self) -> int:
        return len(self.entries)

    def _audit(self, action: str, user_id: str, entry_id: str | None, now_ms: int) -> None:
        if self.audit is not None:
            self.audit({"kind": "memory", "action": action, "user_id": user_id, "entry_id": entry_id, "timestamp_ms": now_ms})

    def retrieve(self, user_id: str, query: Iterable[str], k: int, now_ms: int) -> list[MemoryEntry]:
        return retrieve_memories(user_id, query, k, self, now_ms)

    def purge_expired(self, now_ms: int) -> LongTermStore:
        self.entries = {eid: e for eid, e in self.entries.items() if e.live_at(now_ms)}
        return self

    def request(self, user_id: str, action: str, entry_id: str | None = None, body: str | None = None, *, now_ms: int = 0) -> Any:
        """Operator/user transparency requests: ``list``, ``delete`` or ``correct``."""
        if action == "list":
            self._audit("list", user_id, None, now_ms)
            return [e for _, e in sorted(self.entries.items()) if e.user_id == user_id and e.live_at(now_ms)]
        entry = self.entries.get(entry_id or "")
        if entry is None or entry.user_id != user_id:
            raise MemoryStoreError("not found")
        if action == "delete":
            del self.entries[entry.entry_id]
            self._audit("delete", user_id, entry.entry_id, now_ms)
            return entry
        if action == "correct":
            if body is None:
                raise MemoryStoreError("correct needs a new body")
            fixed = replace(entry, body=body, corrected_at_ms=now_ms)
            self.entries[entry.entry_id] = fixed
            self._audit("correct", user_id, entry.entry_id, now_ms)
            return fixed
        raise MemoryStoreError(f"unknown request {action!r}")

    def to_jsonl(self) -> str:
        return "".join(canonical_json(e.to_dict()) + "\n" for _, e in sorted(self.entries.items()))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_jsonl(), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path, audit: AuditHook | None = None) -> LongTermStore:
        p = Path(path)
        entries = []
        if p.exists():
            for line in p.read_text(encoding="utf-8").splitlines():
                if line.strip():
                    entries.append(MemoryEntry.from_dict(json.loads(line)))
        return cls(entries, audit)


def retrieve_memories(user_id: str, query: Iterable[str], k: int, store: LongTermStore, now_ms: int) -> list[MemoryEntry]:
    """Term-overlap retrieval; ties go to newer entries, then entry_id."""
    if k < 0:
        raise ValueError("k must be non-negative")
    if k == 0:
        return []
    q = {t for term in query for t in terms(term)}
    scored = []
    for entry in store.entries.values():
        if entry.user_id != user_id or not entry.live_at(now_ms):
            continue
        overlap = len(q & entry.term_set())
        if overlap:
            scored.append((-overlap, -entry.created_at_ms, entry.entry_id, entry))
    scored.sort(key=lambda t: t[:3])
    return [t[3] for t in scored[:k]]


def purge_expired(store: LongTermStore, now_ms: int) -> LongTermStore:
    return store.purge_expired(now_ms)


def user_memory_request(user_id: str, action: str, store: LongTermStore, entry_id: str | None = None, body: str | None = None, now_ms: int = 0) -> Any:
    return store.request(user_id, action, entry_id, body, now_ms=now_ms)


def preference_value(entries: Sequence[MemoryEntry], key: str) -> str | None:
    for entry in entries:
        if entry.kind is MemoryKind.PREFERENCE and entry.attributes.get("preference") == key:
            return entry.attributes.get("value")
    return None
