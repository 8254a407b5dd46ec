"""Intent detection, authorized prompt composition, generation and disclosure."""

from __future__ import annotations

import json
import re
import subprocess
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Mapping, Protocol, Sequence

from .context import canonical_json
from .policy import ContentItem, PolicyDecision

SECTION_ORDER = ("persona", "policy_constraints", "situational_context", "memory", "dialogue_history", "user_message")

DEFAULT_PERSONA = "You are a courteous digital banking assistant. Never read account details aloud in public areas."

# sources that get narrated back to the user
DISCLOSURE_SOURCES = ("appointment", "memory", "account_activity", "crm")


@dataclass(frozen=True)
class Intent:
    name: str
    slots: Mapping[str, Any] = field(default_factory=dict)
    confidence: float = 0.0

    def __post_init__(self) -> None:
        if self.name == "unknown" and self.slots:
            raise ValueError("unknown intent carries no slots")

    def to_dict(self) -> dict[str, Any]:
        return {"name": self.name, "slots": dict(self.slots), "confidence": self.confidence}


_AMOUNT = re.compile(r"(?:\$|£|€)?\s?(\d+(?:\.\d{1,2})?)\s*(?:dollars|usd|eur|euros|pounds)?", re.I)
_ACCOUNT = re.compile(r"\bto (?:account |acct )?([A-Z]{1,3}[-]?\d{2,})\b", re.I)
_CARD = re.compile(r"\bcard (?:ending (?:in )?)?(\d{4})\b", re.I)


def _transfer_slots(text: str) -> dict[str, Any]:
    slots: dict[str, Any] = {}
    account = _ACCOUNT.search(text)
    if account:
        slots["to_account"] = account.group(1).upper()
        text = text[: account.start()] + text[account.end():]
    amount = _AMOUNT.search(text)
    if amount:
        value = float(amount.group(1))
        slots["amount"] = int(value) if value.is_integer() else value
    return slots


def _card_slots(text: str) -> dict[str, Any]:
    m = _CARD.search(text)
    return {"card_id": f"card-{m.group(1)}"} if m else {}


def _topic(topic: str) -> Callable[[str], dict[str, Any]]:
    return lambda _text: {"topic": topic}


# priority order: first match wins
INTENT_RULES: tuple[tuple[str, re.Pattern[str], Callable[[str], dict[str, Any]]], ...] = (
    ("block_card", re.compile(r"\b(block|freeze|cancel)\b.*\bcard\b|\bcard\b.*\b(lost|stolen)\b|\b(lost|stolen)\b.*\bcard\b", re.I), _card_slots),
    ("transfer_funds", re.compile(r"\b(transfer|send|wire)\b.*\d", re.I), _transfer_slots),
    ("request_advisor", re.compile(r"\b(speak|talk|see|meet)\b.*\b(advisor|adviser|specialist|person|human|someone|staff)\b", re.I), lambda t: {"topic": "mortgage"} if re.search(r"mortgage", t, re.I) else {}),
    ("transaction_history", re.compile(r"\btransaction(s)? history\b|\brecent transactions\b", re.I), _topic("your recent transactions")),
    ("loan_inquiry", re.compile(r"\bloan\b", re.I), _topic("your loan")),
    ("mortgage_inquiry", re.compile(r"\bmortgage\b", re.I), _topic("a mortgage")),
    ("savings_inquiry", re.compile(r"\bsavings?\b", re.I), lambda t: {"topic": "a savings plan" if re.search(r"savings plan", t, re.I) else "savings"}),
    ("schedule_appointment", re.compile(r"\b(book|schedule)\b.*\b(appointment|meeting)\b", re.I), _topic("an appointment")),
    ("check_queue", re.compile(r"\b(queue|how long|wait(ing)? time|my turn)\b", re.I), lambda _t: {}),
    ("wayfinding", re.compile(r"\bwhere (is|are|can i find)\b", re.I), lambda t: {"destination": re.sub(r"(?i).*where (is|are|can i find) (the )?", "", t).strip(" ?.!") or "information desk"}),
    ("set_preference", re.compile(r"\bkeep it (brief|short)\b|\bdon'?t interrupt me\b|\bprefer (to speak |speaking )?(in )?[a-z]+\b", re.I), lambda _t: {}),
    ("greeting", re.compile(r"^\s*(hi|hello|hey|good (morning|afternoon|evening))\b", re.I), lambda _t: {}),
)


def detect_intent(text: str) -> Intent:
    for name, pattern, slots in INTENT_RULES:
        if pattern.search(text):
            return Intent(name, slots(text), 0.9)
    return Intent("unknown", {}, 0.0)


# intent -> (op_name, slot names forwarded as args)
INTENT_OPERATIONS: dict[str, tuple[str, tuple[str, ...]]] = {
    "block_card": ("block_card", ("card_id",)),
    "transfer_funds": ("transfer_funds", ("amount", "to_account")),
    "check_queue": ("queue_status", ()),
    "schedule_appointment": ("schedule_appointment", ("topic",)),
    "wayfinding": ("wayfinding", ("destination",)),
}


@dataclass(frozen=True)
class PromptDocument:
    sections: tuple[tuple[str, tuple[Any, ...]], ...]
    composed_at_ms: int
    authorization_trace: Mapping[str, PolicyDecision]
    intent: Intent

    def section(self, name: str) -> tuple[Any, ...]:
        for sec_name, items in self.sections:
            if sec_name == name:
                return items
        raise KeyError(name)

    def to_dict(self) -> dict[str, Any]:
        return {
            "sections": [{"name": n, "items": list(items)} for n, items in self.sections],
            "composed_at_ms": self.composed_at_ms,
            "authorization_trace": {k: v.to_dict() for k, v in sorted(self.authorization_trace.items())},
            "intent": self.intent.to_dict(),
        }

    def to_json(self) -> str:
        return canonical_json(self.to_dict())

    def context_items(self) -> list[dict[str, Any]]:
        return [i for i in self.section("situational_context") + self.section("memory") if isinstance(i, dict) and "item_id" in i]


Gate = Callable[[ContentItem], PolicyDecision]


def compose_prompt(
    *,
    user_message: str,
    intent: Intent,
    candidates: Sequence[ContentItem],
    memory_hits: Sequence[ContentItem],
    gate: Gate,
    history: Sequence[str] = (),
    constraints: Sequence[str] = (),
    persona: str = DEFAULT_PERSONA,
    now_ms: int = 0,
) -> PromptDocument:
    """Build the prompt from context that passes ``gate``; the rest is traced and dropped."""
    trace: dict[str, PolicyDecision] = {}
    situational: list[dict[str, Any]] = []
    memory: list[dict[str, Any]] = []
    for bucket, items in ((situational, candidates), (memory, memory_hits)):
        for item in sorted(items, key=lambda i: i.item_id):
            decision = gate(item)
            trace[item.item_id] = decision
            if decision.allowed:
                bucket.append(item.to_dict())
    notes = list(constraints)
    for item_id, decision in sorted(trace.items()):
        if not decision.allowed:
            notes.append(f"withheld {item_id}: {decision.outcome.value}"
                         + (f" {decision.required_step.value}" if decision.required_step else "")
                         + f" ({decision.reason})")
    sections = (
        ("persona", (persona,)),
        ("policy_constraints", tuple(notes)),
        ("situational_context", tuple(situational)),
        ("memory", tuple(memory)),
        ("dialogue_history", tuple(history)),
        ("user_message", (user_message,)),
    )
    return PromptDocument(sections, now_ms, trace, intent)


@dataclass(frozen=True)
class ProposedCall:
    op_name: str
    args: Mapping[str, Any]

    def to_dict(self) -> dict[str, Any]:
        return {"op_name": self.op_name, "args": dict(self.args)}


@dataclass(frozen=True)
class Reply:
    text: str
    proposed_calls: tuple[ProposedCall, ...] = ()
    emotion: str = "neutral"
    fallback: bool = False

    def to_dict(self) -> dict[str, Any]:
        return {
            "text": self.text,
            "proposed_calls": [c.to_dict() for c in self.proposed_calls],
            "emotion": self.emotion,
            "fallback": self.fallback,
        }


class Generator(Protocol):
    def __call__(self, prompt_json: str) -> Mapping[str, Any]: ...


EMOTIONS = ("neutral", "warm", "concerned")

FALLBACK_TEXT = "I'm sorry, something went wrong on my side. Would you like me to connect you with a member of staff?"


def narrate_disclosure(prompt: PromptDocument | Mapping[str, Any]) -> list[tuple[str, str]]:
    """One ``(item_id, sentence)`` per enterprise or memory item in the prompt."""
    doc = prompt.to_dict() if isinstance(prompt, PromptDocument) else prompt
    out = []
    for sec in doc["sections"]:
        if sec["name"] not in ("situational_context", "memory"):
            continue
        for item in sec["items"]:
            if isinstance(item, dict) and item.get("source") in DISCLOSURE_SOURCES:
                out.append((item["item_id"], _disclosure_sentence(item)))
    return out


def _disclosure_sentence(item: Mapping[str, Any]) -> str:
    body = item["body"]
    source = item["source"]
    if source == "appointment":
        return f"I see from your appointment record that you're here for a {body['purpose']}."
    if source == "memory":
        return f"Last time we spoke, you mentioned {body}."
    if source == "account_activity":
        return f"I see from your recent account activity that {body}."
    # crm bodies may be pii; name the source only
    return f"I've checked your account records for your {item['purpose'].replace('-', ' ')}."


def mock_generator(prompt_json: str) -> dict[str, Any]:
    """Deterministic template generator; a pure function of the prompt bytes."""
    doc = json.loads(prompt_json)
    intent = doc["intent"]
    name, slots = intent["name"], intent["slots"]
    items = [i for sec in doc["sections"] if sec["name"] in ("situational_context", "memory") for i in sec["items"]]
    by_id = {i["item_id"]: i for i in items}
    trace = doc["authorization_trace"]
    disclosures = list(dict.fromkeys(s for _, s in narrate_disclosure(doc)))
    parts: list[str] = []
    calls: list[dict[str, Any]] = []
    emotion = "neutral"

    needs = sorted({d["required_step"] for d in trace.values() if d["outcome"] == "require"})
    denied = any(d["outcome"] == "deny" for d in trace.values())

    if name == "greeting":
        emotion = "warm"
        appt = next((i for i in items if i["source"] == "appointment"), None)
        who = appt["body"].get("name") if appt else None
        parts.append(f"Welcome, {who}." if who else "Welcome.")
        parts.extend(disclosures)
        wait = by_id.get("advisor_wait")
        if wait is not None:
            minutes = wait["body"]["minutes"]
            parts.append(f"Your advisor will be free in approximately {minutes} minute{'s' if minutes != 1 else ''}.")
            parts.append("Would you like to begin a preliminary financial review in the meantime?")
        elif any(i["source"] == "memory" for i in items):
            parts.append("Would you like to continue that conversation?")
        else:
            parts.append("How can I help you today?")
    elif name == "set_preference":
        parts.append("Understood, I'll keep that in mind.")
    elif name == "unknown":
        parts.append("I'm sorry, I didn't catch that. Could you say it another way?")
    else:
        parts.extend(disclosures)
        if "consent" in needs:
            parts.append("To look that up I need your permission to access the relevant account information. Do you agree?")
        elif "step_up_auth" in needs:
            parts.append("For your security, please confirm your identity on your mobile device before I show this.")
        elif denied and not items:
            parts.append("I'm not able to access that information here.")
        if name in ("loan_inquiry", "transaction_history") and any(i.get("pii") for i in items):
            parts.append("I've prepared the details for a private screen so they stay confidential.")
        elif name == "check_queue":
            queue = by_id.get("queue_status")
            if queue is not None:
                q = queue["body"]
                parts.append(f"There {'is' if q['length'] == 1 else 'are'} {q['length']} {'person' if q['length'] == 1 else 'people'} ahead of you, about {q['wait_minutes']} minutes.")
        elif name == "request_advisor":
            parts.append("I'll bring in a colleague who can help, and share what we've covered so you won't need to repeat anything.")
        elif name in ("savings_inquiry", "mortgage_inquiry"):
            parts.append(f"I'd be glad to talk about {slots.get('topic', 'that')}.")
        op = INTENT_OPERATIONS.get(name)
        if op is not None:
            op_name, fields = op
            calls.append({"op_name": op_name, "args": {f: slots[f] for f in fields if f in slots}})
            if name == "block_card":
                emotion = "concerned"
                parts.append("I can block that card for you right away. Please confirm you'd like me to go ahead.")
            elif name == "transfer_funds":
                parts.append("I can set up that transfer. Please confirm the details.")
        if not parts:
            parts.append("Of course.")
    return {"text": " ".join(parts), "proposed_calls": calls, "emotion": emotion}


class SubprocessGenerator:
    """Out-of-process generator speaking JSON on stdin/stdout."""

    def __init__(self, command: Sequence[str], timeout_s: float = 10.0):
        self.command = list(command)
        self.timeout_s = timeout_s

    def __call__(self, prompt_json: str) -> Mapping[str, Any]:
        done = subprocess.run(self.command, input=prompt_json, capture_output=True, text=True, timeout=self.timeout_s, check=True)
        return json.loads(done.stdout)


def generate_reply(prompt: PromptDocument, generator: Generator = mock_generator) -> Reply:
    try:
        out = generator(prompt.to_json())
        calls = tuple(ProposedCall(c["op_name"], dict(c.get("args", {}))) for c in out.get("proposed_calls", []))
        emotion = out.get("emotion", "neutral")
        if emotion not in EMOTIONS:
            emotion = "neutral"
        return Reply(str(out["text"]), calls, emotion)
    except Exception:  # noqa: BLE001 - any generator failure gets the fallback
        return Reply(FALLBACK_TEXT, (), "concerned", fallback=True)


def content_from_memory(entries: Iterable[Any]) -> list[ContentItem]:
    from .context import Sensitivity

    out = []
    for entry in entries:
        purpose = sorted(entry.purpose_tags)[0]
        out.append(ContentItem(f"memory:{entry.entry_id}", entry.body, entry.pii, Sensitivity.CONFIDENTIAL, "memory", purpose))
    return out
