"""Proactive triggers and graduated initiative levels."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from enum import Enum, IntEnum
from pathlib import Path
from typing import Any, Mapping

from .context import SituationalState, VariableName as V


class InitiativeLevel(IntEnum):
    SILENT = 0
    HINT = 1
    SUGGEST = 2
    PREFILL = 3
    ACT = 4

    @property
    def label(self) -> str:
        return self.name.lower()

    @classmethod
    def parse(cls, name: str | int | InitiativeLevel) -> InitiativeLevel:
        if isinstance(name, int):
            return cls(name)
        return cls[str(name).upper()]


class TriggerKind(str, Enum):
    TEMPORAL_SILENCE = "temporal_silence"
    BEHAVIORAL_CUE = "behavioral_cue"
    SITUATIONAL_EVENT = "situational_event"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Thresholds:
    hint: float = 0.4
    suggest: float = 0.65
    prefill: float = 0.8
    act: float = 0.95

    def __post_init__(self) -> None:
        seq = (self.hint, self.suggest, self.prefill, self.act)
        if any(not 0.0 <= t <= 1.0 for t in seq):
            raise ConfigError("initiative thresholds must lie in [0, 1]")
        if any(a > b for a, b in zip(seq, seq[1:])):
            raise ConfigError("initiative thresholds must be non-decreasing")

    @classmethod
    def parse(cls, text: str) -> Thresholds:
        parts = [float(p) for p in text.split(",")]
        if len(parts) != 4:
            raise ConfigError("expected four comma-separated thresholds")
        return cls(*parts)

    def level_for(self, confidence: float) -> InitiativeLevel:
        level = InitiativeLevel.SILENT
        for lvl, t in ((InitiativeLevel.HINT, self.hint), (InitiativeLevel.SUGGEST, self.suggest),
                       (InitiativeLevel.PREFILL, self.prefill), (InitiativeLevel.ACT, self.act)):
            if t <= confidence:
                level = lvl
        return level


@dataclass(frozen=True)
class TriggerSpec:
    """Configured trigger; ``params`` depend on the kind."""

    trigger_id: str
    kind: TriggerKind
    params: Mapping[str, Any] = field(default_factory=dict)
    action: str | None = None

    @classmethod
    def from_dict(cls, doc: Mapping[str, Any]) -> TriggerSpec:
        return cls(doc["trigger_id"], TriggerKind(doc["kind"]), dict(doc.get("params", {})), doc.get("action"))


@dataclass(frozen=True)
class TriggerConfig:
    triggers: tuple[TriggerSpec, ...]
    thresholds: Thresholds = Thresholds()
    suppression_floor: float = 0.5
    refractory_ms: int = 10_000
    proactive_purpose: str = "proactive-assistance"

    @classmethod
    def from_dict(cls, doc: Mapping[str, Any]) -> TriggerConfig:
        th = doc.get("thresholds")
        thresholds = Thresholds(**th) if isinstance(th, Mapping) else Thresholds()
        return cls(
            triggers=tuple(TriggerSpec.from_dict(t) for t in doc.get("triggers", [])),
            thresholds=thresholds,
            suppression_floor=float(doc.get("suppression_floor", 0.5)),
            refractory_ms=int(doc.get("refractory_ms", 10_000)),
            proactive_purpose=doc.get("proactive_purpose", "proactive-assistance"),
        )


def load_trigger_config(path: str | Path) -> TriggerConfig:
    with open(path, encoding="utf-8") as fh:
        return TriggerConfig.from_dict(json.load(fh))


@dataclass(frozen=True)
class Trigger:
    trigger_id: str
    kind: TriggerKind
    confidence: float
    evidence: tuple[str, ...]
    params: Mapping[str, Any] = field(default_factory=dict)
    action: str | None = None


@dataclass(frozen=True)
class DialogueTail:
    last_system_prompt_ms: int | None = None
    last_user_utterance_ms: int | None = None


@dataclass(frozen=True)
class InitiativeDecision:
    trigger_id: str
    level: InitiativeLevel
    rationale: tuple[str, ...]
    decided_at_ms: int
    note: str = ""

    def to_dict(self) -> dict[str, Any]:
        return {
            "trigger_id": self.trigger_id,
            "level": self.level.label,
            "rationale": list(self.rationale),
            "decided_at_ms": self.decided_at_ms,
            "note": self.note,
        }


def evaluate_triggers(
    state: SituationalState,
    tail: DialogueTail,
    now_ms: int,
    config: TriggerConfig,
    signals: Mapping[str, Any] | None = None,
) -> list[Trigger]:
    """Return the triggers that fire against the (decayed) state at ``now_ms``.

    ``signals`` optionally carries the latest enterprise readings that are not
    state variables, currently ``queue_position`` as ``(position, quality,
    signal_id)``.
    """
    fired = []
    signals = signals or {}
    for spec in config.triggers:
        trig = _evaluate_one(spec, state, tail, now_ms, signals)
        if trig is not None:
            fired.append(trig)
    return fired


def _evaluate_one(spec: TriggerSpec, state: SituationalState, tail: DialogueTail, now_ms: int, signals) -> Trigger | None:
    p = spec.params
    if spec.kind is TriggerKind.TEMPORAL_SILENCE:
        prompt = tail.last_system_prompt_ms
        if prompt is None:
            return None
        if tail.last_user_utterance_ms is not None and tail.last_user_utterance_ms >= prompt:
            return None
        if now_ms - prompt <= p.get("silence_threshold_ms", 2000):
            return None
        present = state.get(V.USER_PRESENT)
        if not present.known or present.value is not True:
            return None
        return Trigger(spec.trigger_id, spec.kind, present.confidence, present.contributors, p, spec.action)

    if spec.kind is TriggerKind.BEHAVIORAL_CUE:
        activity = state.get(V.ACTIVITY_STATE)
        if activity.known and activity.value in p.get("activity_values", ("waiting",)):
            return Trigger(spec.trigger_id, spec.kind, activity.confidence, activity.contributors, p, spec.action)
        return None

    # situational events
    channel = p.get("channel")
    if channel == "appointment":
        appt = state.get(V.APPOINTMENT)
        if not appt.known:
            return None
        remaining = appt.value["at_ms"] - now_ms
        if 0 <= remaining <= p.get("horizon_ms", 300_000):
            return Trigger(spec.trigger_id, spec.kind, appt.confidence, appt.contributors, p, spec.action)
        return None
    if channel == "queue":
        reading = signals.get("queue_position")
        if reading is None:
            return None
        position, quality, signal_id = reading
        if position is not None and position <= p.get("position_at_most", 1):
            return Trigger(spec.trigger_id, spec.kind, quality, (signal_id,), p, spec.action)
        return None
    return None


def decide_level(
    trigger: Trigger,
    thresholds: Thresholds,
    cap: InitiativeLevel = InitiativeLevel.ACT,
    now_ms: int = 0,
) -> InitiativeDecision:
    raw = thresholds.level_for(trigger.confidence)
    level = min(raw, cap)
    note = f"capped from {raw.label}" if level < raw else ""
    rationale = trigger.evidence if level > InitiativeLevel.SILENT else ()
    return InitiativeDecision(trigger.trigger_id, level, tuple(rationale), now_ms, note)


def initiative_cap(
    *,
    proactive_consent: bool,
    has_action: bool,
    preference_ceiling: InitiativeLevel | None = None,
) -> InitiativeLevel:
    """Combine consent scope, actuation mapping and user ceiling into one cap."""
    cap = InitiativeLevel.ACT if proactive_consent else InitiativeLevel.HINT
    if not has_action:
        # prefill and act need a mapped operation to hand to actuation
        cap = min(cap, InitiativeLevel.SUGGEST)
    if preference_ceiling is not None:
        cap = min(cap, preference_ceiling)
    return cap


def apply_suppression(decision: InitiativeDecision, activity, floor: float = 0.5) -> InitiativeDecision:
    """Go quiet while the user is visibly busy with something else."""
    if activity is None or not activity.known:
        return decision
    if activity.value in ("on_phone", "talking_to_other") and activity.confidence >= floor and decision.level > InitiativeLevel.SILENT:
        return replace(decision, level=InitiativeLevel.SILENT, note=f"suppressed: user {activity.value}")
    return decision


@dataclass
class RefractoryClock:
    period_ms: int = 10_000
    last_fired: dict[str, int] = field(default_factory=dict)

    def ready(self, trigger_id: str, now_ms: int) -> bool:
        last = self.last_fired.get(trigger_id)
        return last is None or now_ms - last >= self.period_ms

    def mark(self, trigger_id: str, now_ms: int) -> None:
        self.last_fired[trigger_id] = now_ms

