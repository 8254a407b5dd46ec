"""Late fusion of context signals into a per-session situational state.

Each variable keeps the latest candidate per source. At resolution time the
candidates are aged to "now" with the variable's exponential decay, so a
stale high-quality reading cannot outrank a fresh one indefinitely.
"""

from __future__ import annotations

import json
import math
from fractions import Fraction
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping

from .context import (
    UNKNOWN,
    ContextSignal,
    SituationalState,
    StateEntry,
    VariableName as V,
)

# channel -> variables it feeds directly
CHANNEL_VARIABLES: dict[str, tuple[V, ...]] = {
    "presence": (V.USER_PRESENT,),
    "camera_localization": (V.USER_POSITION,),
    "ble_localization": (V.USER_POSITION,),
    "uwb_localization": (V.USER_POSITION,),
    "occupancy": (V.OCCUPANCY,),
    "noise_db": (V.NOISE_LEVEL,),
    "appointment": (V.APPOINTMENT,),
    "auth": (V.WORKFLOW_STAGE,),
    "workflow": (V.WORKFLOW_STAGE,),
    "staff_status": (V.ADVISOR_AVAILABILITY,),
    "consent": (V.CONSENT_SCOPES,),
    "device_session": (V.ACTIVE_SURFACES,),
}

# consumed elsewhere (activity/queue derivation, dialogue, risk); not "unused"
CONSUMED_CHANNELS = frozenset({"vad", "gaze", "diarization", "transcript", "queue", "risk_score"})

# variables whose value is a union over sub-keys rather than a contested scalar
AGGREGATE_KEY = {
    V.ACTIVE_SURFACES: "surface_id",
    V.CONSENT_SCOPES: "purpose",
    V.ADVISOR_AVAILABILITY: "staff_id",
}

DEFAULT_TAU_MS = {
    V.USER_PRESENT: 30_000,
    V.USER_POSITION: 15_000,
    V.ACTIVITY_STATE: 10_000,
    V.QUEUE_LENGTH: 120_000,
    V.OCCUPANCY: 60_000,
    V.NOISE_LEVEL: 60_000,
    V.APPOINTMENT: 3_600_000,
    V.WORKFLOW_STAGE: 3_600_000,
    V.ADVISOR_AVAILABILITY: 600_000,
    V.CONSENT_SCOPES: 3_600_000,
    V.ACTIVE_SURFACES: 600_000,
}

DEFAULT_TTL_MS = {
    V.USER_PRESENT: 60_000,
    V.USER_POSITION: 30_000,
    V.ACTIVITY_STATE: 15_000,
    V.QUEUE_LENGTH: 300_000,
    V.OCCUPANCY: 120_000,
    V.NOISE_LEVEL: 120_000,
    V.APPOINTMENT: 7_200_000,
    V.WORKFLOW_STAGE: 7_200_000,
    V.ADVISOR_AVAILABILITY: 1_800_000,
    V.CONSENT_SCOPES: 7_200_000,
    V.ACTIVE_SURFACES: 1_800_000,
}


@dataclass(frozen=True)
class FusionConfig:
    weights: Mapping[tuple[V, str], float] = field(default_factory=dict)
    decay_tau_ms: Mapping[V, int] = field(default_factory=lambda: dict(DEFAULT_TAU_MS))
    ttl_ms: Mapping[V, int] = field(default_factory=lambda: dict(DEFAULT_TTL_MS))
    disagreement_penalty: float = 0.5
    default_weight: float = 1.0
    activity_window_ms: int = 3000
    per_customer_service_ms: int = 180_000
    staff_plus_served: int = 0
    kiosk_targets: frozenset[str] = frozenset({"kiosk"})

    def __post_init__(self) -> None:
        for key, w in self.weights.items():
            if not 0.0 <= w <= 1.0:
                raise ValueError(f"weight for {key} out of range: {w}")
        if not 0.0 <= self.default_weight <= 1.0:
            raise ValueError("default_weight out of range")
        if not 0.0 <= self.disagreement_penalty <= 1.0:
            raise ValueError("disagreement_penalty out of range")
        for name, table in (("decay_tau_ms", self.decay_tau_ms), ("ttl_ms", self.ttl_ms)):
            for var, value in table.items():
                if value <= 0:
                    raise ValueError(f"{name}[{var.value}] must be positive")

    def weight(self, variable: V, source_id: str) -> float:
        return self.weights.get((variable, source_id), self.default_weight)

    def tau(self, variable: V) -> int:
        return self.decay_tau_ms.get(variable, DEFAULT_TAU_MS[variable])

    def ttl(self, variable: V) -> int:
        return self.ttl_ms.get(variable, DEFAULT_TTL_MS[variable])

    @classmethod
    def from_dict(cls, doc: Mapping[str, Any]) -> FusionConfig:
        weights = {}
        for entry in doc.get("weights", []):
            weights[(V(entry["variable"]), entry["source_id"])] = float(entry["weight"])
        tau = dict(DEFAULT_TAU_MS)
        tau.update({V(k): int(v) for k, v in doc.get("decay_tau_ms", {}).items()})
        ttl = dict(DEFAULT_TTL_MS)
        ttl.update({V(k): int(v) for k, v in doc.get("ttl_ms", {}).items()})
        kwargs: dict[str, Any] = {}
        for key in ("disagreement_penalty", "default_weight"):
            if key in doc:
                kwargs[key] = float(doc[key])
        for key in ("activity_window_ms", "per_customer_service_ms", "staff_plus_served"):
            if key in doc:
                kwargs[key] = int(doc[key])
        if "kiosk_targets" in doc:
            kwargs["kiosk_targets"] = frozenset(doc["kiosk_targets"])
        return cls(weights=weights, decay_tau_ms=tau, ttl_ms=ttl, **kwargs)


def load_fusion_config(path: str | Path) -> FusionConfig:
    with open(path, encoding="utf-8") as fh:
        return FusionConfig.from_dict(json.load(fh))


@dataclass(frozen=True)
class Candidate:
    value: Any
    score: float
    timestamp_ms: int
    source_id: str
    signal_id: str


def _candidate_value(variable: V, signal: ContextSignal) -> Any:
    p = signal.payload
    if variable is V.USER_PRESENT:
        return bool(p["present"])
    if variable is V.USER_POSITION:
        return p["zone"]
    if variable is V.OCCUPANCY:
        return p["count"]
    if variable is V.NOISE_LEVEL:
        return round(float(p["noise_db"]), 6)
    if variable is V.APPOINTMENT:
        return dict(p)
    if variable is V.WORKFLOW_STAGE:
        if signal.channel == "auth":
            return "step_up" if p["auth_level"] == "step_up" else "authenticated"
        return p["stage"]
    if variable is V.ADVISOR_AVAILABILITY:
        return {k: v for k, v in p.items() if k != "staff_id"}
    if variable is V.CONSENT_SCOPES:
        return {"user_id": p["user_id"], "expires_at_ms": p["expires_at_ms"]}
    if variable is V.ACTIVE_SURFACES:
        return bool(p["active"])
    raise KeyError(variable)


def _agreement_key(value: Any) -> str:
    return json.dumps(value, sort_keys=True, default=str)


def resolve_conflict(variable: V, candidates: Iterable[Candidate], config: FusionConfig, now_ms: int | None = None) -> StateEntry:
    """Pick the winning candidate and discount its score by disagreement.

    Winner: max score, then most recent timestamp, then smallest source_id.
    confidence = winner.score * agreement, with agreement 1 when every
    candidate agrees, else 1 - penalty * (best dissenting score / winner score).
    """
    cands = list(candidates)
    if not cands:
        return StateEntry(UNKNOWN, 0.0, now_ms or 0, ())
    winner = min(cands, key=lambda c: (-c.score, -c.timestamp_ms, c.source_id))
    win_key = _agreement_key(winner.value)
    dissent = [c.score for c in cands if _agreement_key(c.value) != win_key]
    if not dissent or winner.score == 0:
        confidence = winner.score
    else:
        w = _decimal(winner.score)
        agreement = 1 - _decimal(config.disagreement_penalty) * _decimal(max(dissent)) / w
        confidence = float(w * agreement)
    confidence = min(1.0, max(0.0, confidence))
    contributors = tuple(sorted(c.signal_id for c in cands))
    updated = now_ms if now_ms is not None else max(c.timestamp_ms for c in cands)
    if winner.value is UNKNOWN:
        return StateEntry(UNKNOWN, 0.0, updated, ())
    return StateEntry(winner.value, confidence, updated, contributors)


def _decimal(x: float) -> Fraction:
    # evaluate on the shortest decimal spelling, so 0.9 and 0.6 fuse to exactly 0.6
    return Fraction(repr(float(x)))


def decay_factor(elapsed_ms: int, tau_ms: int) -> float:
    return math.exp(-elapsed_ms / tau_ms)


def decay_entry(variable: V, entry: StateEntry, now_ms: int, config: FusionConfig) -> StateEntry:
    if not entry.known:
        return entry
    elapsed = now_ms - entry.updated_at_ms
    if elapsed > config.ttl(variable):
        return StateEntry(UNKNOWN, 0.0, entry.updated_at_ms, ())
    if elapsed <= 0:
        return entry
    return StateEntry(entry.value, entry.confidence * decay_factor(elapsed, config.tau(variable)), entry.updated_at_ms, entry.contributors)


def decay_confidence(state: SituationalState, now_ms: int, config: FusionConfig) -> SituationalState:
    """Decayed view of ``state`` at ``now_ms``; stored entries are untouched."""
    return SituationalState(
        state.session_id,
        {var: decay_entry(var, entry, now_ms, config) for var, entry in state.variables.items()},
    )


def derive_queue_state(
    ticket_count: int | None,
    ticket_confidence: float,
    occupancy: StateEntry | None,
    config: FusionConfig,
    now_ms: int,
    contributors: Iterable[str] = (),
) -> StateEntry:
    """queue_length from tickets when present, else occupancy minus staff and served."""
    confidences = []
    contrib = list(contributors)
    if ticket_count is not None:
        length = ticket_count
        confidences.append(ticket_confidence)
        if occupancy is not None and occupancy.known:
            confidences.append(occupancy.confidence)
            contrib.extend(occupancy.contributors)
    elif occupancy is not None and occupancy.known:
        length = max(int(occupancy.value) - config.staff_plus_served, 0)
        confidences.append(occupancy.confidence)
        contrib.extend(occupancy.contributors)
    else:
        return StateEntry(UNKNOWN, 0.0, now_ms, ())
    value = {"length": length, "est_wait_ms": length * config.per_customer_service_ms}
    return StateEntry(value, min(confidences), now_ms, tuple(sorted(set(contrib))))


ACTIVITY_STATES = ("engaged", "on_phone", "talking_to_other", "waiting", "unknown")


def derive_activity_state(signals: Iterable[ContextSignal], now_ms: int, config: FusionConfig) -> StateEntry:
    """Rule table over signals in the activity window, in priority order:
    gaze at the kiosk, phone in use, another speaker, bare presence."""
    window = [s for s in signals if now_ms - config.activity_window_ms <= s.timestamp_ms <= now_ms]

    def best(pred) -> ContextSignal | None:
        hits = [s for s in window if pred(s)]
        if not hits:
            return None
        return max(hits, key=lambda s: (_score(s, config), s.timestamp_ms, s.signal_id))

    rules = (
        ("engaged", lambda s: s.channel == "gaze" and s.payload["target"] in config.kiosk_targets),
        ("on_phone", lambda s: s.channel == "device_session" and s.payload["active"] and s.payload.get("in_use", False)),
        ("talking_to_other", lambda s: s.channel == "diarization" and s.payload["other_speaker"]),
        ("waiting", lambda s: s.channel == "presence" and s.payload["present"]),
    )
    for label, pred in rules:
        hit = best(pred)
        if hit is not None:
            return StateEntry(label, _score(hit, config), now_ms, (hit.signal_id,))
    return StateEntry(UNKNOWN, 0.0, now_ms, ())


def _score(signal: ContextSignal, config: FusionConfig) -> float:
    return config.weight(V.ACTIVITY_STATE, signal.provenance.source_id) * signal.quality


@dataclass
class ApplyResult:
    affected: tuple[V, ...]
    unused: bool = False


class FusionEngine:
    """Mutable per-session fusion state, driven by that session's event loop."""

    def __init__(self, session_id: str, config: FusionConfig | None = None):
        self.session_id = session_id
        self.config = config or FusionConfig()
        self.candidates: dict[V, dict[tuple[str, str], Candidate]] = {}
        self.entries: dict[V, StateEntry] = {}
        self.recent: list[ContextSignal] = []
        self.queue_signal: ContextSignal | None = None
        self.unused: list[str] = []
        self.now_ms = 0

    def apply_signal(self, signal: ContextSignal, now_ms: int | None = None) -> ApplyResult:
        now = signal.timestamp_ms if now_ms is None else now_ms
        self.now_ms = max(self.now_ms, now)
        channel = signal.channel
        variables = CHANNEL_VARIABLES.get(channel, ())
        if not variables and channel not in CONSUMED_CHANNELS:
            self.unused.append(signal.signal_id)
            return ApplyResult((), unused=True)

        affected: list[V] = []
        for var in variables:
            sub = str(signal.payload[AGGREGATE_KEY[var]]) if var in AGGREGATE_KEY else ""
            score = self.config.weight(var, signal.provenance.source_id) * signal.quality
            cand = Candidate(_candidate_value(var, signal), score, signal.timestamp_ms, signal.provenance.source_id, signal.signal_id)
            slot = self.candidates.setdefault(var, {})
            key = (signal.provenance.source_id, sub)
            previous = slot.get(key)
            # a source's newer reading supersedes its older one
            if previous is None or previous.timestamp_ms <= cand.timestamp_ms:
                slot[key] = cand
            self.entries[var] = self._resolve(var, self.now_ms)
            affected.append(var)

        if channel in ("gaze", "device_session", "diarization", "presence"):
            self.recent.append(signal)
            horizon = self.now_ms - self.config.activity_window_ms
            self.recent = [s for s in self.recent if s.timestamp_ms >= horizon]
            self.entries[V.ACTIVITY_STATE] = derive_activity_state(self.recent, self.now_ms, self.config)
            affected.append(V.ACTIVITY_STATE)
        if channel == "queue":
            self.queue_signal = signal
        if channel in ("queue", "occupancy"):
            self.entries[V.QUEUE_LENGTH] = self._queue_entry(self.now_ms)
            affected.append(V.QUEUE_LENGTH)
        return ApplyResult(tuple(affected))

    def _aged(self, var: V, now_ms: int) -> list[Candidate]:
        out = []
        ttl, tau = self.config.ttl(var), self.config.tau(var)
        for cand in self.candidates.get(var, {}).values():
            age = now_ms - cand.timestamp_ms
            if age > ttl:
                continue
            score = cand.score * decay_factor(age, tau) if age > 0 else cand.score
            out.append(Candidate(cand.value, score, cand.timestamp_ms, cand.source_id, cand.signal_id))
        return out

    def _resolve(self, var: V, now_ms: int) -> StateEntry:
        cands = self._aged(var, now_ms)
        if var not in AGGREGATE_KEY:
            return resolve_conflict(var, cands, self.config, now_ms)
        if not cands:
            return StateEntry(UNKNOWN, 0.0, now_ms, ())
        by_key: dict[str, Candidate] = {}
        slot = self.candidates[var]
        for (source, sub), raw in sorted(slot.items()):
            aged = next((c for c in cands if c.signal_id == raw.signal_id), None)
            if aged is None:
                continue
            held = by_key.get(sub)
            if held is None or (aged.timestamp_ms, aged.score) > (held.timestamp_ms, held.score):
                by_key[sub] = aged
        if var is V.ADVISOR_AVAILABILITY:
            value: Any = {sub: c.value for sub, c in sorted(by_key.items())}
        elif var is V.CONSENT_SCOPES:
            value = sorted(sub for sub, c in by_key.items() if c.value["expires_at_ms"] > now_ms)
        else:
            value = sorted(sub for sub, c in by_key.items() if c.value)
        confidence = max(c.score for c in cands)
        return StateEntry(value, min(1.0, confidence), now_ms, tuple(sorted(c.signal_id for c in cands)))

    def _queue_entry(self, now_ms: int) -> StateEntry:
        occ = self._resolve(V.OCCUPANCY, now_ms) if V.OCCUPANCY in self.candidates else None
        qs = self.queue_signal
        if qs is not None and now_ms - qs.timestamp_ms <= self.config.ttl(V.QUEUE_LENGTH):
            conf = self.config.weight(V.QUEUE_LENGTH, qs.provenance.source_id) * qs.quality
            return derive_queue_state(qs.payload["tickets"], conf, occ, self.config, now_ms, (qs.signal_id,))
        return derive_queue_state(None, 0.0, occ, self.config, now_ms)

    def set_entry(self, var: V, entry: StateEntry) -> None:
        self.entries[var] = entry

    def state(self) -> SituationalState:
        return SituationalState(self.session_id, dict(self.entries))

    def view(self, now_ms: int) -> SituationalState:
        """Decayed snapshot at ``now_ms`` for decision making.

        Candidate-backed variables are re-resolved from their candidates, each
        aged once from its own timestamp, so the view does not depend on when
        a variable was last touched.
        """
        now = max(now_ms, self.now_ms)
        variables = dict(decay_confidence(self.state(), now, self.config).variables)
        for var in self.candidates:
            variables[var] = self._resolve(var, now)
        if V.QUEUE_LENGTH in self.entries:
            variables[V.QUEUE_LENGTH] = self._queue_entry(now)
        return SituationalState(self.session_id, variables)

    def queue_position(self) -> int | None:
        if self.queue_signal is None:
            return None
        return self.queue_signal.payload.get("position")
