"""Append-only, hash-chained audit log stored as canonical JSONL.

Each record is ``body`` plus ``seq``, ``prev_digest`` and ``entry_digest``,
where ``entry_digest = sha256(prev_digest + canonical(body + seq))``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterable, Mapping

from .context import canonical_json, digest

GENESIS = "0" * 64
_CHAIN_FIELDS = ("seq", "prev_digest", "entry_digest")


def entry_digest(prev: str, body: Mapping[str, Any]) -> str:
    return digest(prev + canonical_json(dict(body)))


@dataclass(frozen=True)
class VerifyResult:
    ok: bool
    failed_seq: int | None = None
    reason: str = ""
    entries: int = 0


class AuditLog:
    """Single-writer hash chain; optionally mirrored to a JSONL file."""

    def __init__(self, path: str | Path | None = None):
        self.path = Path(path) if path is not None else None
        self.entries: list[dict[str, Any]] = []
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text("", encoding="utf-8")

    @classmethod
    def resume(cls, path: str | Path) -> AuditLog:
        """Continue an existing chain file; refuses to extend a broken chain."""
        p = Path(path)
        log = cls()
        if p.exists():
            result = verify_file(p)
            if not result.ok:
                raise ValueError(f"audit chain broken at seq {result.failed_seq}: {result.reason}")
            log.entries = [json.loads(line) for line in p.read_text(encoding="utf-8").splitlines() if line]
        else:
            p.parent.mkdir(parents=True, exist_ok=True)
            p.write_text("", encoding="utf-8")
        log.path = p
        return log

    @property
    def head(self) -> str:
        return self.entries[-1]["entry_digest"] if self.entries else GENESIS

    def append(self, body: Mapping[str, Any]) -> dict[str, Any]:
        clash = set(body) & set(_CHAIN_FIELDS)
        if clash:
            raise ValueError(f"reserved audit fields in body: {sorted(clash)}")
        seq = len(self.entries) + 1
        prev = self.head
        sealed = {**body, "seq": seq}
        record = {**sealed, "prev_digest": prev, "entry_digest": entry_digest(prev, sealed)}
        self.entries.append(record)
        if self.path is not None:
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(canonical_json(record) + "\n")
        return record

    def lines(self) -> list[str]:
        return [canonical_json(e) for e in self.entries]

    def to_jsonl(self) -> str:
        return "".join(line + "\n" for line in self.lines())

    def verify(self) -> VerifyResult:
        return verify_lines(self.lines())


def verify_records(records: Iterable[Mapping[str, Any]]) -> VerifyResult:
    prev = GENESIS
    n = 0
    for n, record in enumerate(records, start=1):
        result = _check(record, n, prev)
        if result is not None:
            return result
        prev = record["entry_digest"]
    return VerifyResult(True, entries=n)


def _check(record: Mapping[str, Any], expected_seq: int, prev: str) -> VerifyResult | None:
    if not isinstance(record, Mapping) or any(f not in record for f in _CHAIN_FIELDS):
        return VerifyResult(False, expected_seq, "missing chain fields")
    if record["seq"] != expected_seq:
        return VerifyResult(False, expected_seq, "sequence break")
    if record["prev_digest"] != prev:
        return VerifyResult(False, expected_seq, "prev_digest mismatch")
    sealed = {k: v for k, v in record.items() if k not in ("prev_digest", "entry_digest")}
    if entry_digest(prev, sealed) != record["entry_digest"]:
        return VerifyResult(False, expected_seq, "entry_digest mismatch")
    return None


def verify_lines(lines: Iterable[str | bytes]) -> VerifyResult:
    """Verify raw JSONL lines; any non-canonical byte fails at that line."""
    prev = GENESIS
    n = 0
    for n, raw in enumerate(lines, start=1):
        try:
            text = raw.decode("utf-8") if isinstance(raw, bytes) else raw
            record = json.loads(text)
        except (UnicodeDecodeError, json.JSONDecodeError):
            return VerifyResult(False, n, "unparseable entry")
        if not isinstance(record, dict):
            return VerifyResult(False, n, "entry is not an object")
        try:
            canonical = canonical_json(record)
        except ValueError:
            return VerifyResult(False, n, "non-canonical entry")
        if canonical != text:
            return VerifyResult(False, n, "non-canonical entry")
        result = _check(record, n, prev)
        if result is not None:
            return result
        prev = record["entry_digest"]
    return VerifyResult(True, entries=n)


def verify_file(path: str | Path) -> VerifyResult:
    lines = Path(path).read_bytes().split(b"\n")
    if lines[-1] == b"":
        lines.pop()
    return verify_lines(lines)
