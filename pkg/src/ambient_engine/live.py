"""Local-socket live mode: JSONL events in, JSONL report records out."""

from __future__ import annotations

import json
import os
import socketserver
from pathlib import Path
from typing import Iterable, Iterator

from .context import canonical_json
from .engine import Engine


def handle_lines(engine: Engine, lines: Iterable[str]) -> Iterator[str]:
    """Feed each JSON line to ``engine`` and yield the records it produced.

    Output lines are ``{"stream": <name>, "record": {...}}``. A line that is
    not a JSON object yields a single ``error`` record and is otherwise ignored.
    """
    for line in lines:
        line = line.strip()
        if not line:
            continue
        try:
            event = json.loads(line)
        except json.JSONDecodeError as exc:
            yield canonical_json({"stream": "error", "record": {"reason": f"invalid JSON: {exc.msg}"}})
            continue
        if not isinstance(event, dict):
            yield canonical_json({"stream": "error", "record": {"reason": "event must be a JSON object"}})
            continue
        marks = engine.marks()
        engine.process(event)
        for stream, records in engine.outputs_since(marks).items():
            for record in records:
                yield canonical_json({"stream": stream, "record": record})


class _Handler(socketserver.StreamRequestHandler):
    server: _Server

    def handle(self) -> None:
        lines = (raw.decode("utf-8", errors="replace") for raw in self.rfile)
        for out in handle_lines(self.server.engine, lines):
            self.wfile.write(out.encode("utf-8") + b"\n")
            self.wfile.flush()


class _Server(socketserver.UnixStreamServer):
    # one connection at a time: the engine has a single writer
    def __init__(self, path: str, engine: Engine):
        self.engine = engine
        super().__init__(path, _Handler)


def serve(socket_path: str | Path, engine: Engine, *, max_connections: int | None = None) -> None:
    path = str(socket_path)
    if os.path.exists(path):
        os.unlink(path)
    with _Server(path, engine) as server:
        try:
            if max_connections is None:
                server.serve_forever()
            else:
                for _ in range(max_connections):
                    server.handle_request()
        finally:
            if os.path.exists(path):
                os.unlink(path)

