import json
import math
import random

import pytest
from hypothesis import given, settings, strategies as st

from ambient_engine.context import Layer, validate_signal
from ambient_engine.ingestion import (
    DedupWindow,
    IngestionError,
    SourceRegistration,
    align_timestamp,
    deduplicate,
    ingest_stream,
    normalize_event,
    read_jsonl,
)

REGS = {
    "overhead_cam": SourceRegistration("overhead_cam", Layer.PHYSICAL, 0, 500, 0.85),
    "noise_meter": SourceRegistration("noise_meter", Layer.PHYSICAL, 0, 1000, 0.9),
    "ble_gateway": SourceRegistration("ble_gateway", Layer.PHYSICAL, 120, 500, 0.7),
    "mic_array": SourceRegistration("mic_array", Layer.PHYSICAL, 0, 200, 0.9),
}


def test_occupancy_passthrough_uses_default_quality():
    sig = normalize_event({"source_id": "overhead_cam", "channel": "occupancy", "timestamp_ms": 10, "count": 7}, REGS)
    assert sig.channel == "occupancy" and sig.payload["count"] == 7
    assert sig.quality == 0.85
    assert sig.layer is Layer.PHYSICAL and sig.provenance.source_id == "overhead_cam"


def test_missing_timestamp():
    with pytest.raises(IngestionError, match="missing field: timestamp_ms"):
        normalize_event({"source_id": "overhead_cam", "channel": "occupancy", "count": 7}, REGS)


def test_linear_amplitude_converted_to_decibels():
    sig = normalize_event({"source_id": "noise_meter", "channel": "noise_db", "timestamp_ms": 0, "amplitude": 0.1}, REGS)
    assert sig.payload["noise_db"] == pytest.approx(-20.0, abs=1e-12)
    assert "amplitude" not in sig.payload


def test_centimetres_converted_to_metres():
    sig = normalize_event({"source_id": "ble_gateway", "channel": "ble_localization", "timestamp_ms": 500,
                           "payload": {"zone": "counter", "x_cm": 250}}, REGS)
    assert sig.payload["x_m"] == 2.5


def test_raw_bytes_are_accepted():
    raw = json.dumps({"source_id": "overhead_cam", "channel": "presence", "timestamp_ms": 1, "present": True}).encode()
    assert normalize_event(raw, REGS).payload == {"present": True}


def test_unregistered_source_and_bad_json():
    with pytest.raises(IngestionError, match="unregistered source"):
        normalize_event({"source_id": "ghost", "channel": "presence", "timestamp_ms": 0, "present": True}, REGS)
    with pytest.raises(IngestionError, match="invalid JSON"):
        normalize_event("{nope", REGS)


def _sig(t, source="overhead_cam", channel="presence", **payload):
    return normalize_event({"source_id": source, "channel": channel, "timestamp_ms": t, **(payload or {"present": True})}, REGS)


def test_align_timestamp_subtracts_skew():
    assert align_timestamp(_sig(5000, "ble_gateway", "ble_localization", zone="kiosk"), REGS["ble_gateway"]).timestamp_ms == 4880


def test_align_timestamp_pre_epoch():
    reg = SourceRegistration("x", Layer.PHYSICAL, 200)
    with pytest.raises(IngestionError, match="pre-epoch timestamp"):
        align_timestamp(_sig(100), reg)


def test_align_timestamp_zero_skew_is_identity():
    sig = _sig(100)
    assert align_timestamp(sig, REGS["overhead_cam"]) is sig


def test_dedup_cases():
    window = DedupWindow()
    assert deduplicate(_sig(0), window, 500) == "keep"
    assert deduplicate(_sig(50), window, 500) == "drop"
    assert deduplicate(_sig(600), window, 500) == "keep"
    assert deduplicate(_sig(650, present=False), window, 500) == "keep"


def test_dedup_ignores_quality_jitter_and_keeps_first():
    a = normalize_event({"source_id": "overhead_cam", "channel": "presence", "timestamp_ms": 0, "present": True, "quality": 0.5}, REGS)
    b = normalize_event({"source_id": "overhead_cam", "channel": "presence", "timestamp_ms": 10, "present": True, "quality": 0.99}, REGS)
    report = ingest_stream([a.to_dict() | {"source_id": "overhead_cam"}, b.to_dict() | {"source_id": "overhead_cam"}], REGS)
    assert len(report.signals) == 1 and report.signals[0].quality == 0.5


def test_stream_with_malformed_event():
    events = [
        {"source_id": "overhead_cam", "channel": "occupancy", "timestamp_ms": 0, "count": 3},
        {"source_id": "overhead_cam", "channel": "occupancy", "timestamp_ms": 600, "count": 4},
        {"source_id": "overhead_cam", "channel": "occupancy", "timestamp_ms": 700, "count": -1},
        {"source_id": "overhead_cam", "channel": "occupancy", "timestamp_ms": 1300, "count": 5},
    ]
    report = ingest_stream(events, REGS)
    assert len(report.signals) == 3 and len(report.rejections) == 1
    assert report.rejections[0].index == 2


def test_empty_stream():
    report = ingest_stream([], REGS)
    assert report.signals == [] and report.rejections == []


def test_out_of_order_is_accepted_but_flagged():
    events = [{"source_id": "overhead_cam", "channel": "occupancy", "timestamp_ms": t, "count": c} for t, c in ((1000, 1), (400, 2))]
    report = ingest_stream(events, REGS)
    assert len(report.signals) == 2 and report.out_of_order == [1]


def test_read_jsonl_keeps_bad_lines_for_the_report():
    rows = read_jsonl(['{"a": 1}', "", "not json"])
    assert rows == [{"a": 1}, "not json"]
    assert len(ingest_stream(rows[1:], REGS).rejections) == 1


def _oracle_count(events, window_ms):
    """Brute force: keep an event unless an earlier kept twin lies within the window."""
    kept = []
    for e in events:
        key = (e["source_id"], e["channel"], json.dumps(e["payload"], sort_keys=True))
        if any(k[0] == key and abs(e["timestamp_ms"] - k[1]) <= window_ms for k in kept):
            continue
        kept.append((key, e["timestamp_ms"]))
    return len(kept)


def _random_stream(rng, n_unique, n_dup):
    events = []
    t = 0
    for i in range(n_unique):
        t += rng.randint(1, 50)
        events.append({"source_id": rng.choice(["overhead_cam", "mic_array"]), "channel": "occupancy",
                       "timestamp_ms": t, "payload": {"count": i}})
    for _ in range(n_dup):
        src = rng.choice(events[:n_unique])
        dup = dict(src, timestamp_ms=src["timestamp_ms"] + rng.randint(0, 150), signal_id=None)
        events.append(dup)
    events = [dict(e) for e in events]
    for e in events:
        e.pop("signal_id", None)
    events.sort(key=lambda e: e["timestamp_ms"])
    return events


def test_hundred_events_with_ten_duplicates():
    rng = random.Random(2024)
    events = _random_stream(rng, 90, 10)
    assert len(events) == 100
    report = ingest_stream(events, REGS, dedup_window_ms=500)
    assert _oracle_count(events, 500) == 90
    assert len(report.signals) == 90


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32), st.integers(1, 40), st.integers(0, 20), st.integers(0, 400))
def test_dedup_matches_brute_force(seed, n, dups, window):
    events = _random_stream(random.Random(seed), n, dups)
    assert len(ingest_stream(events, REGS, dedup_window_ms=window).signals) == _oracle_count(events, window)


event_st = st.fixed_dictionaries({
    "source_id": st.sampled_from(["overhead_cam", "mic_array", "ghost"]),
    "channel": st.sampled_from(["occupancy", "presence"]),
    "timestamp_ms": st.integers(-5, 5000),
    "payload": st.one_of(st.fixed_dictionaries({"count": st.integers(-1, 5)}), st.fixed_dictionaries({"present": st.booleans()})),
})


@settings(max_examples=80, deadline=None)
@given(st.lists(st.one_of(event_st, st.just("garbage"), st.just({"channel": "presence"})), max_size=25))
def test_no_silent_loss_and_outputs_are_valid(events):
    report = ingest_stream(events, REGS)
    assert len(report.signals) + len(report.rejections) == len(events)
    assert all(validate_signal(s) == [] for s in report.signals)
    assert len({s.signal_id for s in report.signals}) == len(report.signals)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.fixed_dictionaries({
    "source_id": st.sampled_from(["overhead_cam", "mic_array"]),
    "channel": st.just("occupancy"),
    "timestamp_ms": st.integers(0, 3000),
    "payload": st.fixed_dictionaries({"count": st.integers(0, 4)}),
}), max_size=20))
def test_ingestion_idempotent_over_self_concatenation(events):
    events = sorted(events, key=lambda e: e["timestamp_ms"])
    span = (events[-1]["timestamp_ms"] - events[0]["timestamp_ms"]) if events else 0
    once = ingest_stream(events, REGS, dedup_window_ms=span)
    twice = ingest_stream(events + events, REGS, dedup_window_ms=span)

    def key(s):
        return (s.provenance.source_id, s.channel, json.dumps(dict(s.payload), sort_keys=True), s.timestamp_ms)

    assert sorted(map(key, once.signals)) == sorted(map(key, twice.signals))


def test_decibel_conversion_matches_closed_form():
    for amp in (0.001, 0.5, 1.0, 3.0):
        sig = normalize_event({"source_id": "noise_meter", "channel": "noise_db", "timestamp_ms": 0, "amplitude": amp}, REGS)
        assert math.isclose(sig.payload["noise_db"], 20 * math.log10(amp), rel_tol=0, abs_tol=1e-12)
