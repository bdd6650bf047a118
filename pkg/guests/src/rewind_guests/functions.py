"""Sample functions for the runner, each a self-contained request handler.

These model the request-handler shapes a function platform actually hosts:
a pure echo, a serialization round-trip, one that parks per-process state in
a module global (secret_holder), and one that accumulates state it never
releases (leaky_logger) — the pattern where each request both appends to a
retained log and walks it, so per-request cost grows with everything kept
from earlier requests unless the platform rolls the process back.
"""

from __future__ import annotations

import json
from typing import Any, Optional

_secret: Optional[str] = None

_log: list[dict] = []
_LOG_PAYLOAD = b"x" * 16384


def echo(value: Any) -> Any:
    return value


def json_roundtrip(value: Any) -> Any:
    return json.loads(json.dumps(value))


def secret_holder(value: dict) -> dict:
    """store_secret pins the token in a module global; find_secret checks it."""
    global _secret
    op = value.get("op")
    if op == "store_secret":
        _secret = value["token"]
        return {"ok": True, "stored": 1}
    if op == "find_secret":
        return {"found": _secret == value["token"]}
    raise ValueError(f"unknown op {op!r}")


def leaky_logger(value: Any) -> dict:
    """Append a record and re-total the retained log, like a naive in-process
    audit log that is never truncated."""
    _log.append({"seq": len(_log), "value": value, "payload": bytearray(_LOG_PAYLOAD)})
    retained = 0
    probe = 0
    for entry in _log:
        payload = entry["payload"]
        retained += len(payload)
        probe = (probe + payload[0]) & 0xFF
    return {"entries": len(_log), "retained_bytes": retained, "probe": probe}
