import pytest
from hypothesis import given, strategies as st

from ambient_engine.context import SituationalState, StateEntry, VariableName as V
from ambient_engine.initiative import (
    ConfigError,
    DialogueTail,
    InitiativeLevel as L,
    RefractoryClock,
    Thresholds,
    Trigger,
    TriggerConfig,
    TriggerKind,
    apply_suppression,
    decide_level,
    evaluate_triggers,
    initiative_cap,
)
from ambient_engine.config import load_default

CFG = TriggerConfig.from_dict(load_default("triggers.json"))
DEFAULTS = Thresholds()


def present(conf=0.9):
    return SituationalState("s", {V.USER_PRESENT: StateEntry(True, conf, 0, ("p1",))})


def fired_ids(state, tail, now):
    return {t.trigger_id: t for t in evaluate_triggers(state, tail, now, CFG)}


def test_silence_fires_after_threshold():
    trig = fired_ids(present(), DialogueTail(1000, None), 3500)["silence_after_prompt"]
    assert trig.kind is TriggerKind.TEMPORAL_SILENCE and trig.confidence == 0.9 and trig.evidence == ("p1",)


def test_short_silence_does_not_fire():
    assert "silence_after_prompt" not in fired_ids(present(), DialogueTail(1000, None), 2500)


def test_silence_boundary_is_strict():
    assert "silence_after_prompt" not in fired_ids(present(), DialogueTail(0, None), 2000)
    assert "silence_after_prompt" in fired_ids(present(), DialogueTail(0, None), 2001)


def test_appointment_horizon_fires():
    state = SituationalState("s", {V.APPOINTMENT: StateEntry({"at_ms": 400_000, "purpose": "x", "user_id": "u"}, 1.0, 0, ("a",))})
    assert "appointment_soon" in fired_ids(state, DialogueTail(), 100_000)
    assert "appointment_soon" not in fired_ids(state, DialogueTail(), 99_999)


def _trig(conf, action=None):
    return Trigger("t", TriggerKind.BEHAVIORAL_CUE, conf, ("e1",), {}, action)


@pytest.mark.parametrize("conf,level", [(0.2, L.SILENT), (0.7, L.SUGGEST), (0.4, L.HINT), (0.8, L.PREFILL), (0.95, L.ACT)])
def test_default_threshold_table(conf, level):
    assert decide_level(_trig(conf), DEFAULTS).level is level


def test_cap_applies():
    d = decide_level(_trig(0.99), DEFAULTS, cap=L.HINT)
    assert d.level is L.HINT and "capped" in d.note


def test_suppression_cases():
    suggest = decide_level(_trig(0.7), DEFAULTS)
    assert apply_suppression(suggest, StateEntry("on_phone", 0.8, 0, ("x",))).level is L.SILENT
    assert apply_suppression(suggest, StateEntry("waiting", 0.9, 0, ("x",))).level is L.SUGGEST
    assert apply_suppression(suggest, StateEntry("on_phone", 0.3, 0, ("x",)), floor=0.5).level is L.SUGGEST


def test_cap_composition():
    assert initiative_cap(proactive_consent=False, has_action=True) is L.HINT
    assert initiative_cap(proactive_consent=True, has_action=False) is L.SUGGEST
    assert initiative_cap(proactive_consent=True, has_action=True, preference_ceiling=L.HINT) is L.HINT
    assert initiative_cap(proactive_consent=True, has_action=True) is L.ACT


def test_threshold_parsing():
    assert Thresholds.parse("0.1,0.2,0.3,0.4") == Thresholds(0.1, 0.2, 0.3, 0.4)
    for bad in ("0.5,0.4,0.6,0.7", "0.1,0.2,0.3", "2,3,4,5"):
        with pytest.raises(ConfigError):
            Thresholds.parse(bad)


def test_refractory_clock():
    clock = RefractoryClock(10_000)
    assert clock.ready("t", 0)
    clock.mark("t", 0)
    assert not clock.ready("t", 9_999) and clock.ready("t", 10_000)


conf_st = st.floats(0, 1, allow_nan=False)


@given(conf_st, conf_st, st.sampled_from(list(L)))
def test_monotone_in_confidence(a, b, cap):
    lo, hi = sorted((a, b))
    assert decide_level(_trig(lo), DEFAULTS, cap).level <= decide_level(_trig(hi), DEFAULTS, cap).level


@given(conf_st, st.sampled_from(list(L)))
def test_cap_dominance(conf, cap):
    assert decide_level(_trig(conf), DEFAULTS, cap).level <= cap


@given(conf_st)
def test_non_silent_decisions_carry_evidence(conf):
    d = decide_level(_trig(conf), DEFAULTS)
    assert d.level is L.SILENT or d.rationale == ("e1",)


@given(st.integers(0, 10_000), st.integers(0, 10_000), st.integers(0, 20_000))
def test_silence_never_fires_after_a_user_reply(prompt, reply_after, now):
    reply = prompt + reply_after
    fired = fired_ids(present(), DialogueTail(prompt, reply), max(now, reply))
    assert "silence_after_prompt" not in fired
