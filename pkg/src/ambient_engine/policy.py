"""Consent, sensitivity and surface-privacy gating for data access and output."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

from .context import ConsentRecord, Privacy, Sensitivity, Surface, SurfaceKind


class AuthLevel(str, Enum):
    ANONYMOUS = "anonymous"
    AUTHENTICATED = "authenticated"
    STEP_UP = "step_up"

    @property
    def rank(self) -> int:
        return ("anonymous", "authenticated", "step_up").index(self.value)


class Outcome(str, Enum):
    ALLOW = "allow"
    DENY = "deny"
    REQUIRE = "require"


class RequiredStep(str, Enum):
    CONSENT = "consent"
    STEP_UP_AUTH = "step_up_auth"
    HUMAN_DUAL_CONTROL = "human_dual_control"


@dataclass(frozen=True)
class PolicyDecision:
    outcome: Outcome
    reason: str = ""
    required_step: RequiredStep | None = None

    def __post_init__(self) -> None:
        if (self.outcome is Outcome.REQUIRE) != (self.required_step is not None):
            raise ValueError("required_step is present exactly when outcome is require")

    @property
    def allowed(self) -> bool:
        return self.outcome is Outcome.ALLOW

    def to_dict(self) -> dict[str, Any]:
        return {
            "outcome": self.outcome.value,
            "reason": self.reason,
            "required_step": self.required_step.value if self.required_step else None,
        }


def allow(reason: str = "policy satisfied") -> PolicyDecision:
    return PolicyDecision(Outcome.ALLOW, reason)


def deny(reason: str) -> PolicyDecision:
    return PolicyDecision(Outcome.DENY, reason)


def require(step: RequiredStep, reason: str) -> PolicyDecision:
    return PolicyDecision(Outcome.REQUIRE, reason, step)


@dataclass(frozen=True)
class AccessRequest:
    user_id: str | None
    data_class: Sensitivity
    purpose: str
    auth_level: AuthLevel
    now_ms: int
    consent: ConsentRecord | None = None


@dataclass(frozen=True)
class PolicyEntry:
    data_class: Sensitivity
    min_auth: AuthLevel
    consent_required: bool
    purposes: frozenset[str]

    def to_dict(self) -> dict[str, Any]:
        return {
            "data_class": self.data_class.value,
            "min_auth": self.min_auth.value,
            "consent_required": self.consent_required,
            "purposes": sorted(self.purposes),
        }


class PolicyTableError(ValueError):
    pass


@dataclass(frozen=True)
class PolicyTable:
    entries: Mapping[Sensitivity, PolicyEntry]

    @classmethod
    def from_list(cls, docs: Iterable[Mapping[str, Any]]) -> PolicyTable:
        docs = list(docs)
        problems = lint_policy(docs)
        if problems:
            raise PolicyTableError("; ".join(problems))
        entries = {}
        for doc in docs:
            entry = PolicyEntry(
                Sensitivity(doc["data_class"]),
                AuthLevel(doc["min_auth"]),
                bool(doc["consent_required"]),
                frozenset(doc["purposes"]),
            )
            entries[entry.data_class] = entry
        return cls(entries)

    def to_list(self) -> list[dict[str, Any]]:
        return [self.entries[k].to_dict() for k in sorted(self.entries)]


def lint_policy(docs: Sequence[Any]) -> list[str]:
    """Validate a policy table document; returns problems, empty when clean."""
    problems = []
    if not isinstance(docs, Sequence) or isinstance(docs, (str, bytes)):
        return ["policy table must be a list of entries"]
    seen: set[str] = set()
    for i, doc in enumerate(docs):
        where = f"entries[{i}]"
        if not isinstance(doc, Mapping):
            problems.append(f"{where}: must be an object")
            continue
        for key in ("data_class", "min_auth", "consent_required", "purposes"):
            if key not in doc:
                problems.append(f"{where}: missing field: {key}")
        dc = doc.get("data_class")
        if dc is not None:
            if dc not in Sensitivity._value2member_map_:
                problems.append(f"{where}.data_class: unknown class {dc!r}")
            elif dc in seen:
                problems.append(f"{where}.data_class: duplicate class {dc!r}")
            seen.add(dc)
        if "min_auth" in doc and doc["min_auth"] not in AuthLevel._value2member_map_:
            problems.append(f"{where}.min_auth: unknown level {doc['min_auth']!r}")
        if "consent_required" in doc and not isinstance(doc["consent_required"], bool):
            problems.append(f"{where}.consent_required: must be boolean")
        purposes = doc.get("purposes")
        if purposes is not None and (not isinstance(purposes, list) or not all(isinstance(p, str) and p for p in purposes)):
            problems.append(f"{where}.purposes: must be a list of non-empty strings")
    return problems


def load_policy_table(path: str | Path) -> PolicyTable:
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    return PolicyTable.from_list(doc["entries"] if isinstance(doc, dict) else doc)


def evaluate_access(request: AccessRequest, table: PolicyTable) -> PolicyDecision:
    """Decide one data access.

    Unknown purposes are denied outright. When both consent and authentication
    are short, consent is requested first.
    """
    if not isinstance(request.data_class, Sensitivity) or not isinstance(request.auth_level, AuthLevel) or not request.purpose:
        return deny("invalid request")
    consent = request.consent
    if consent is not None and (consent.user_id != request.user_id or consent.purpose != request.purpose):
        return deny("invalid request")
    entry = table.entries.get(request.data_class)
    if entry is None or request.purpose not in entry.purposes:
        return deny("purpose limitation")

    auth_ok = request.auth_level.rank >= entry.min_auth.rank
    consent_ok = not entry.consent_required or (consent is not None and consent.active_at(request.now_ms))
    if auth_ok and consent_ok:
        return allow()
    if not consent_ok:
        return require(RequiredStep.CONSENT, f"active consent required for {request.purpose}")
    return require(RequiredStep.STEP_UP_AUTH, f"authentication level {entry.min_auth.value} required")


def evaluate_consent(user_id: str | None, purpose: str, store: Iterable[ConsentRecord], now_ms: int) -> ConsentRecord | None:
    """Most recent unexpired record for (user, purpose); expiry is exclusive."""
    live = [r for r in store if r.user_id == user_id and r.purpose == purpose and r.active_at(now_ms)]
    if not live:
        return None
    return max(live, key=lambda r: (r.granted_at_ms, r.expires_at_ms))


@dataclass(frozen=True)
class ContentItem:
    item_id: str
    body: Any
    pii: bool = False
    sensitivity: Sensitivity = Sensitivity.PUBLIC
    source: str = "system"
    purpose: str = "general-info"

    def __post_init__(self) -> None:
        if self.pii and self.sensitivity < Sensitivity.CONFIDENTIAL:
            raise ValueError("pii items must be at least confidential")

    def to_dict(self) -> dict[str, Any]:
        return {
            "item_id": self.item_id,
            "body": self.body,
            "pii": self.pii,
            "sensitivity": self.sensitivity.value,
            "source": self.source,
            "purpose": self.purpose,
        }


class NoPrivateSurface(LookupError):
    """A pii item has nowhere private to go; fall back to a deep-link handoff."""

    def __init__(self) -> None:
        super().__init__("no private surface")


PLACEHOLDER = "details sent to your device"

# tie-break among equally capable surfaces for non-pii content
DEFAULT_KIND_PREFERENCE = (
    SurfaceKind.SHARED_DISPLAY,
    SurfaceKind.KIOSK_SCREEN,
    SurfaceKind.COBROWSE_PANEL,
    SurfaceKind.PERSONAL_DEVICE,
    SurfaceKind.STAFF_TERMINAL,
    SurfaceKind.AUDIO_PUBLIC,
    SurfaceKind.AUDIO_PRIVATE,
)


def _richness(surface: Surface) -> tuple[int, int, int]:
    caps = surface.capabilities
    return ("visual" in caps, "audio" in caps, "text" in caps)


def select_surface(
    item: ContentItem,
    available: Iterable[Surface],
    preference: Sequence[SurfaceKind] = DEFAULT_KIND_PREFERENCE,
) -> Surface:
    surfaces = sorted(available, key=lambda s: s.surface_id)
    if not surfaces:
        raise ValueError("no surfaces available")
    if item.pii:
        for privacy in (Privacy.PERSONAL, Privacy.AUTHENTICATED):
            matches = [s for s in surfaces if s.privacy is privacy]
            if matches:
                return min(matches, key=lambda s: (tuple(-x for x in _richness(s)), s.surface_id))
        raise NoPrivateSurface()

    def rank(s: Surface) -> tuple:
        pref = preference.index(s.kind) if s.kind in preference else len(preference)
        return (tuple(-x for x in _richness(s)), pref, s.surface_id)

    return min(surfaces, key=rank)


def redact_for_surface(item: ContentItem, surface: Surface) -> ContentItem:
    if surface.privacy is Privacy.SHARED and item.pii:
        return replace(item, body=PLACEHOLDER, pii=False, sensitivity=Sensitivity.PUBLIC)
    return item


@dataclass
class ConsentStore:
    records: list[ConsentRecord] = field(default_factory=list)

    def grant(self, record: ConsentRecord) -> None:
        self.records.append(record)

    def lookup(self, user_id: str | None, purpose: str, now_ms: int) -> ConsentRecord | None:
        return evaluate_consent(user_id, purpose, self.records, now_ms)

    def active_purposes(self, user_id: str | None, now_ms: int) -> list[str]:
        return sorted({r.purpose for r in self.records if r.user_id == user_id and r.active_at(now_ms)})


def access_for_item(
    item: ContentItem,
    user_id: str | None,
    auth_level: AuthLevel,
    consents: ConsentStore,
    table: PolicyTable,
    now_ms: int,
) -> PolicyDecision:
    """Gate a content item by its own sensitivity and purpose."""
    request = AccessRequest(
        user_id=user_id,
        data_class=item.sensitivity,
        purpose=item.purpose,
        auth_level=auth_level,
        now_ms=now_ms,
        consent=consents.lookup(user_id, item.purpose, now_ms),
    )
    return evaluate_access(request, table)

