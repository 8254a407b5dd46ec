"""Scripted enterprise systems backed by per-scenario fixture tables."""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Any, Mapping

STUB_KINDS = ("appointments", "crm", "queue", "staff_roster", "risk")


@dataclass(frozen=True)
class StubResponse:
    found: bool
    record: Any = None

    def to_dict(self) -> dict[str, Any]:
        return {"found": self.found, "record": self.record}


NOT_FOUND = StubResponse(False, None)


@dataclass
class EnterpriseStubs:
    """Deterministic lookups; every query is logged, hits and misses alike."""

    fixtures: Mapping[str, Any] = field(default_factory=dict)
    log: list[dict[str, Any]] = field(default_factory=list)

    def query(self, kind: str, request: Mapping[str, Any], now_ms: int = 0) -> StubResponse:
        if kind not in STUB_KINDS:
            raise ValueError(f"unknown stub kind {kind!r}")
        response = getattr(self, f"_{kind}")(self.fixtures.get(kind), dict(request))
        self.log.append({"kind": kind, "request": dict(request), "found": response.found, "at_ms": now_ms})
        return response

    @staticmethod
    def _appointments(table: Any, req: dict[str, Any]) -> StubResponse:
        record = (table or {}).get(req.get("user_id", ""))
        return StubResponse(True, copy.deepcopy(record)) if record is not None else NOT_FOUND

    @staticmethod
    def _crm(table: Any, req: dict[str, Any]) -> StubResponse:
        user = (table or {}).get(req.get("user_id", ""))
        if user is None or req.get("item") not in user:
            return NOT_FOUND
        return StubResponse(True, copy.deepcopy(user[req["item"]]))

    @staticmethod
    def _queue(table: Any, req: dict[str, Any]) -> StubResponse:
        return StubResponse(True, copy.deepcopy(table)) if table is not None else NOT_FOUND

    @staticmethod
    def _staff_roster(table: Any, req: dict[str, Any]) -> StubResponse:
        return StubResponse(True, copy.deepcopy(list(table))) if table is not None else NOT_FOUND

    @staticmethod
    def _risk(table: Any, req: dict[str, Any]) -> StubResponse:
        # rules: first whose op matches and whose amount floor is met
        args = req.get("args", {})
        for rule in table or ():
            if rule.get("op_name") != req.get("op_name"):
                continue
            floor = rule.get("amount_at_least")
            if floor is not None and not (isinstance(args.get("amount"), (int, float)) and args["amount"] >= floor):
                continue
            return StubResponse(True, {"score": rule["score"], "indicators": list(rule.get("indicators", []))})
        return NOT_FOUND


def enterprise_stub_query(kind: str, request: Mapping[str, Any], fixtures: Mapping[str, Any] | EnterpriseStubs) -> StubResponse:
    stubs = fixtures if isinstance(fixtures, EnterpriseStubs) else EnterpriseStubs(fixtures)
    return stubs.query(kind, request)
