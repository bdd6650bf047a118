"""Fixtures for the guest-package suite: C guest build and the B scoreboard.

The C guest is compiled once per session from source with warnings as errors;
criteria tests record one verdict line each, replayed in the terminal summary.
"""

import shutil
import subprocess
import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

C_SOURCE = Path(__file__).parent.parent / "c" / "microbench.c"

_VERDICTS: list[tuple[str, str, str]] = []


@pytest.fixture(scope="session")
def microbench_path(tmp_path_factory) -> Path:
    compiler = shutil.which("cc") or shutil.which("gcc")
    if compiler is None:
        pytest.fail("no C compiler on PATH; cannot build the native guest")
    binary = tmp_path_factory.mktemp("cbuild") / "microbench"
    subprocess.run(
        [compiler, "-O2", "-Wall", "-Wextra", "-Werror", "-o", str(binary), str(C_SOURCE)],
        check=True,
    )
    return binary


@pytest.fixture(scope="session")
def c_guest_command(microbench_path):
    def command(arena_pages: int) -> list[str]:
        return [str(microbench_path), str(arena_pages)]

    return command


@pytest.fixture(scope="session")
def runner_command():
    def command(function: str, *flags: str) -> list[str]:
        return [sys.executable, "-m", "rewind_guests.runner", function, *flags]

    return command


@pytest.fixture
def verdict():
    """Record and assert one acceptance-criterion outcome."""

    def record(criterion: str, ok: bool, detail: str) -> None:
        status = "PASS" if ok else "FAIL"
        _VERDICTS.append((criterion, status, detail))
        print(f"{criterion} {status}: {detail}")
        assert ok, f"{criterion} FAIL: {detail}"

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for criterion, status, detail in _VERDICTS:
        terminalreporter.write_line(f"{criterion} {status}: {detail}")
