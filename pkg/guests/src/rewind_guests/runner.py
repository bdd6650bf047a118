"""Managed-runtime protocol guest: load one function, serve it in a loop.

    runner <module:function> [--background-thread]

The function is imported once at startup (so its module-level state is part of
the warm image), then each request line {"id": ..., "value": V} becomes one
call function(V) and one response line {"id": ..., "result": ...}. A raised
exception becomes an error result; the loop continues. EOF on stdin exits 0.

--background-thread starts a heartbeat thread before the first request is
read. The heartbeat parks on an event wait with a long timeout rather than a
bare sleep: an event wait blocks in a restartable futex, so the thread can be
interrupted and resumed at any moment without drifting through restart
shims, which keeps its captured register state stable across stop/resume
cycles.
"""

from __future__ import annotations

import argparse
import importlib
import json
import sys
import threading
import time
from typing import Any, Callable, Optional

HEARTBEAT_INTERVAL_S = 300.0

_heartbeat_stop = threading.Event()
_heartbeat_beats = 0


def _heartbeat() -> None:
    global _heartbeat_beats
    while not _heartbeat_stop.wait(HEARTBEAT_INTERVAL_S):
        _heartbeat_beats += 1


def load_function(path: str) -> Callable[[Any], Any]:
    module_name, sep, func_name = path.partition(":")
    if not sep or not module_name or not func_name:
        raise ValueError(f"function path must look like module:function, not {path!r}")
    func = getattr(importlib.import_module(module_name), func_name, None)
    if not callable(func):
        raise ValueError(f"{path!r} does not name a callable")
    return func


def serve(func: Callable[[Any], Any]) -> int:
    stdin = sys.stdin.buffer
    stdout = sys.stdout.buffer
    for raw in stdin:
        line = raw.strip()
        if not line:
            continue
        request_id: Any = "?"
        try:
            obj = json.loads(line)
            request_id = obj["id"]
            result = {"result": func(obj["value"])}
        except Exception as exc:  # user code may raise anything
            result = {"result": {"error": f"{type(exc).__name__}: {exc}"}}
        response = {"id": request_id, **result}
        stdout.write(json.dumps(response, separators=(",", ":")).encode() + b"\n")
        stdout.flush()
    return 0


def main(argv: Optional[list[str]] = None) -> int:
    parser = argparse.ArgumentParser(
        prog="runner", description="Serve one imported function over the line protocol."
    )
    parser.add_argument("function_path", help="module:function to import and serve")
    parser.add_argument(
        "--background-thread",
        action="store_true",
        help="start a heartbeat thread before serving",
    )
    args = parser.parse_args(argv)
    try:
        func = load_function(args.function_path)
    except (ValueError, ImportError) as exc:
        print(f"runner: {exc}", file=sys.stderr)
        return 2
    if args.background_thread:
        thread = threading.Thread(target=_heartbeat, daemon=True, name="heartbeat")
        thread.start()
        # Let the thread reach its event wait before the first request arrives,
        # so any snapshot taken after warm-up sees it parked, not mid-startup.
        time.sleep(0.05)
    return serve(func)


if __name__ == "__main__":
    sys.exit(main())
