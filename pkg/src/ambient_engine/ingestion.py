"""Context adapters: normalize raw events, align clocks, drop duplicates."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Iterable, Mapping

from .context import (
    Acquisition,
    ContextSignal,
    Layer,
    Provenance,
    Sensitivity,
    canonical_json,
    digest,
    payload_type_for,
    validate_signal,
)


class IngestionError(ValueError):
    """Raised for a single event that cannot become a signal."""


@dataclass(frozen=True)
class SourceRegistration:
    source_id: str
    layer: Layer
    clock_skew_ms: int = 0
    dedup_window_ms: int = 500
    default_quality: float = 1.0

    def __post_init__(self) -> None:
        if self.dedup_window_ms < 0:
            raise ValueError("dedup_window_ms must be non-negative")
        if not 0.0 <= self.default_quality <= 1.0:
            raise ValueError("default_quality must be in [0, 1]")

    @classmethod
    def from_dict(cls, doc: Mapping[str, Any]) -> SourceRegistration:
        return cls(
            source_id=doc["source_id"],
            layer=Layer(doc["layer"]),
            clock_skew_ms=int(doc.get("clock_skew_ms", 0)),
            dedup_window_ms=int(doc.get("dedup_window_ms", 500)),
            default_quality=float(doc.get("default_quality", 1.0)),
        )


def load_registrations(path: str | Path) -> dict[str, SourceRegistration]:
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    entries = doc["sources"] if isinstance(doc, dict) else doc
    return registrations_from_list(entries)


def registrations_from_list(entries: Iterable[Mapping[str, Any]]) -> dict[str, SourceRegistration]:
    regs = {}
    for entry in entries:
        reg = SourceRegistration.from_dict(entry)
        regs[reg.source_id] = reg
    return regs


# Provenance defaults by channel: (sensitivity, acquisition)
_CHANNEL_PROVENANCE: dict[str, tuple[Sensitivity, Acquisition]] = {
    "transcript": (Sensitivity.CONFIDENTIAL, Acquisition.AMBIENT),
    "auth": (Sensitivity.CONFIDENTIAL, Acquisition.CONSENTED),
    "appointment": (Sensitivity.INTERNAL, Acquisition.CONSENTED),
    "consent": (Sensitivity.INTERNAL, Acquisition.CONSENTED),
    "risk_score": (Sensitivity.CONFIDENTIAL, Acquisition.DERIVED),
    "workflow": (Sensitivity.INTERNAL, Acquisition.DERIVED),
    "occupancy": (Sensitivity.PUBLIC, Acquisition.AMBIENT),
    "noise_db": (Sensitivity.PUBLIC, Acquisition.AMBIENT),
    "queue": (Sensitivity.PUBLIC, Acquisition.AMBIENT),
}

_ENVELOPE = {"signal_id", "source_id", "channel", "timestamp_ms", "quality", "payload", "sensitivity", "note", "acquisition"}


def _normalize_units(channel: str, payload: dict[str, Any]) -> dict[str, Any]:
    out = dict(payload)
    if channel == "noise_db" and "noise_db" not in out:
        if "amplitude" in out:
            amplitude = out.pop("amplitude")
            if not isinstance(amplitude, (int, float)) or amplitude <= 0:
                raise IngestionError("payload.amplitude: must be a positive number")
            out["noise_db"] = 20.0 * math.log10(amplitude)
    if channel.endswith("_localization"):
        for axis in ("x", "y"):
            cm = out.pop(f"{axis}_cm", None)
            if cm is not None and f"{axis}_m" not in out:
                out[f"{axis}_m"] = cm / 100.0
    return out


def normalize_event(raw: str | bytes | Mapping[str, Any], registrations: Mapping[str, SourceRegistration], *, seq: int = 0) -> ContextSignal:
    """Turn one adapter record into a validated :class:`ContextSignal`.

    ``raw`` may be a JSON document (text or bytes) or an already-parsed mapping.
    Channel fields are read from ``payload`` when present, otherwise from the
    top-level keys that are not part of the envelope.
    """
    if isinstance(raw, (str, bytes)):
        try:
            raw = json.loads(raw)
        except json.JSONDecodeError as exc:
            raise IngestionError(f"invalid JSON: {exc.msg}") from exc
    if not isinstance(raw, Mapping):
        raise IngestionError("event must be a JSON object")
    for required in ("source_id", "channel", "timestamp_ms"):
        if required not in raw:
            raise IngestionError(f"missing field: {required}")
    registration = registrations.get(raw["source_id"])
    if registration is None:
        raise IngestionError("unregistered source")

    channel = raw["channel"]
    if "payload" in raw:
        payload = raw["payload"]
        if not isinstance(payload, Mapping):
            raise IngestionError("payload: must be an object")
    else:
        payload = {k: v for k, v in raw.items() if k not in _ENVELOPE}
    payload = _normalize_units(channel, dict(payload))

    sensitivity, acquisition = _CHANNEL_PROVENANCE.get(channel, (Sensitivity.INTERNAL, Acquisition.AMBIENT))
    if "sensitivity" in raw:
        sensitivity = Sensitivity(raw["sensitivity"])
    if "acquisition" in raw:
        acquisition = Acquisition(raw["acquisition"])
    note = raw.get("note")
    if acquisition is Acquisition.DERIVED and not note:
        note = f"derived by {registration.source_id}"

    signal = ContextSignal(
        signal_id=raw.get("signal_id") or f"{registration.source_id}-{seq:06d}",
        layer=registration.layer,
        channel=channel,
        timestamp_ms=raw["timestamp_ms"],
        payload_type=raw.get("payload_type", payload_type_for(channel)),
        payload=payload,
        quality=raw.get("quality", registration.default_quality),
        provenance=Provenance(registration.source_id, sensitivity, acquisition, note),
    )
    violations = validate_signal(signal)
    if violations:
        raise IngestionError("; ".join(violations))
    return signal


def align_timestamp(signal: ContextSignal, registration: SourceRegistration) -> ContextSignal:
    corrected = signal.timestamp_ms - registration.clock_skew_ms
    if corrected < 0:
        raise IngestionError("pre-epoch timestamp")
    if corrected == signal.timestamp_ms:
        return signal
    return replace(signal, timestamp_ms=corrected)


def payload_digest(signal: ContextSignal) -> str:
    return digest(canonical_json(signal.payload))


@dataclass
class DedupWindow:
    """Per-(source, channel, payload) memory of the last kept timestamp."""

    kept: dict[tuple[str, str, str], int] = field(default_factory=dict)

    def check(self, signal: ContextSignal, window_ms: int) -> bool:
        """Return True to keep ``signal``; records it when kept."""
        key = (signal.provenance.source_id, signal.channel, payload_digest(signal))
        previous = self.kept.get(key)
        if previous is not None and abs(signal.timestamp_ms - previous) <= window_ms:
            return False
        self.kept[key] = signal.timestamp_ms
        return True


def deduplicate(signal: ContextSignal, window: DedupWindow, window_ms: int) -> str:
    return "keep" if window.check(signal, window_ms) else "drop"


@dataclass(frozen=True)
class Rejection:
    index: int
    reason: str
    source_id: str | None = None

    def to_dict(self) -> dict[str, Any]:
        return {"index": self.index, "reason": self.reason, "source_id": self.source_id}


@dataclass
class IngestReport:
    signals: list[ContextSignal] = field(default_factory=list)
    rejections: list[Rejection] = field(default_factory=list)
    out_of_order: list[int] = field(default_factory=list)


class Ingestor:
    """Sequential ingestion pipeline shared by file replay and live mode."""

    def __init__(self, registrations: Mapping[str, SourceRegistration], dedup_window_ms: int | None = None):
        self.registrations = dict(registrations)
        self.dedup_window_ms = dedup_window_ms
        self._window = DedupWindow()
        self._seen_ids: set[str] = set()
        self._last_ts: dict[str, int] = {}
        self._seq = 0
        self._index = 0

    def window_for(self, source_id: str) -> int:
        if self.dedup_window_ms is not None:
            return self.dedup_window_ms
        return self.registrations[source_id].dedup_window_ms

    def feed(self, raw: Any, report: IngestReport) -> ContextSignal | None:
        index = self._index
        self._index += 1
        self._seq += 1
        source_id = raw.get("source_id") if isinstance(raw, Mapping) else None
        try:
            signal = normalize_event(raw, self.registrations, seq=self._seq)
            registration = self.registrations[signal.provenance.source_id]
            signal = align_timestamp(signal, registration)
        except (IngestionError, ValueError) as exc:
            report.rejections.append(Rejection(index, str(exc), source_id))
            return None
        source_id = signal.provenance.source_id
        if not self._window.check(signal, self.window_for(source_id)):
            report.rejections.append(Rejection(index, "duplicate", source_id))
            return None
        if signal.signal_id in self._seen_ids:
            report.rejections.append(Rejection(index, "duplicate signal_id", source_id))
            return None
        last = self._last_ts.get(source_id)
        if last is not None and signal.timestamp_ms < last:
            report.out_of_order.append(index)
        self._last_ts[source_id] = max(signal.timestamp_ms, last if last is not None else signal.timestamp_ms)
        self._seen_ids.add(signal.signal_id)
        report.signals.append(signal)
        return signal


def ingest_stream(
    events: Iterable[Any],
    registrations: Mapping[str, SourceRegistration],
    dedup_window_ms: int | None = None,
) -> IngestReport:
    """Run the normalize, align, dedup pipeline over events in arrival order.

    A bad event is reported and skipped; the stream never aborts.
    """
    ingestor = Ingestor(registrations, dedup_window_ms)
    report = IngestReport()
    for raw in events:
        ingestor.feed(raw, report)
    return report


def read_jsonl(lines: Iterable[str]) -> list[Any]:
    """Parse JSONL lines, keeping undecodable lines as raw text for the report."""
    out: list[Any] = []
    for line in lines:
        line = line.strip()
        if not line:
            continue
        try:
            out.append(json.loads(line))
        except json.JSONDecodeError:
            out.append(line)
    return out
