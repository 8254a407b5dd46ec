from __future__ import annotations

import pytest

from ambient_engine.context import (
    Acquisition,
    ContextSignal,
    Layer,
    Provenance,
    Sensitivity,
    payload_type_for,
)

_ACCEPTANCE_KEY = pytest.StashKey[dict]()


def make_signal(
    channel: str,
    payload: dict,
    *,
    t: int = 0,
    source: str = "overhead_cam",
    quality: float = 0.9,
    signal_id: str | None = None,
    layer: Layer = Layer.PHYSICAL,
) -> ContextSignal:
    return ContextSignal(
        signal_id=signal_id or f"{source}-{channel}-{t}",
        layer=layer,
        channel=channel,
        timestamp_ms=t,
        payload_type=payload_type_for(channel),
        payload=payload,
        quality=quality,
        provenance=Provenance(source, Sensitivity.INTERNAL, Acquisition.AMBIENT),
    )


@pytest.fixture
def signal_factory():
    return make_signal


@pytest.fixture
def acceptance(request):
    """Record one acceptance line; printed again in the terminal summary."""
    lines = request.config.stash.setdefault(_ACCEPTANCE_KEY, {})

    def record(number: int, title: str, ok: bool, detail: str = "") -> None:
        lines[number] = f"criterion {number:>2} {'pass' if ok else 'FAIL'}: {title}" + (f" ({detail})" if detail else "")
        print(lines[number])

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE_KEY, {})
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(lines):
        terminalreporter.write_line(lines[number])
