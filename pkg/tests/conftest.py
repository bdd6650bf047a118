"""Shared fixtures: supervisor lifecycle management and the acceptance scoreboard.

Acceptance tests record one verdict line per criterion through the ``verdict``
fixture; the lines are replayed in the terminal summary so the scoreboard is
visible even when every test passes under output capture.
"""

import sys

import pytest

sys.path.insert(0, str(__import__("pathlib").Path(__file__).parent))

from helpers import guest_command  # noqa: E402

from rewind.manager import Supervisor  # noqa: E402

_VERDICTS: list[tuple[str, str, str]] = []


@pytest.fixture
def make_supervisor():
    """Factory for started supervisors that are always torn down."""
    live: list[Supervisor] = []

    def build(mode: str, arena_pages: int = 2_000, *, start: bool = True, **kwargs) -> Supervisor:
        kwargs.setdefault("dummy_value", {"op": "bench", "dirty": 8})
        sup = Supervisor(mode, guest_command(arena_pages), **kwargs)
        live.append(sup)
        if start:
            sup.start()
        return sup

    yield build
    for sup in live:
        sup.shutdown()


@pytest.fixture
def verdict():
    """Record and assert one acceptance-criterion outcome."""

    def record(criterion: str, ok: bool, detail: str) -> None:
        status = "PASS" if ok else "FAIL"
        _VERDICTS.append((criterion, status, detail))
        print(f"{criterion} {status}: {detail}")
        assert ok, f"{criterion} FAIL: {detail}"

    def skip(criterion: str, detail: str) -> None:
        _VERDICTS.append((criterion, "SKIP", detail))
        print(f"{criterion} SKIP: {detail}")
        pytest.skip(f"{criterion}: {detail}")

    record.skip = skip
    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for criterion, status, detail in _VERDICTS:
        terminalreporter.write_line(f"{criterion} {status}: {detail}")
