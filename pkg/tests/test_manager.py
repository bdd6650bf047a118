"""Supervisor behavior: envelopes, modes, policies, the serve loop, and the CLI."""

import json
import os
import secrets
import subprocess
import sys
import time

import pytest

from helpers import guest_command

from rewind.errors import ConfigError, GuestDiverged, GuestError, RequestTimeout
from rewind.manager import (
    LEGAL_TRANSITIONS,
    GuestState,
    RequestEnvelope,
    Supervisor,
)

# A minimal guest speaking the request protocol, for policy tests that need
# behaviors the reference guest deliberately does not have (fd leaks, hangs).
MINI_GUEST = r"""
import json, os, sys, time
for line in sys.stdin:
    if not line.strip():
        continue
    cmd = json.loads(line)
    value = cmd.get("value") or {}
    op = value.get("op")
    if op == "open":
        os.open("/dev/null", os.O_RDONLY)
        result = {"ok": True}
    elif op == "uid":
        result = {"uid": os.getuid()}
    elif op == "hang":
        time.sleep(60)
        result = {"ok": True}
    else:
        result = {"ok": True}
    sys.stdout.write(json.dumps({"id": cmd["id"], "result": result}) + "\n")
    sys.stdout.flush()
"""
MINI_CMD = [sys.executable, "-u", "-c", MINI_GUEST]


# ----------------------------------------------------------------- envelopes


def test_envelope_passthrough_for_protocol_only_lines():
    line = b'{"id":"r1","value":{"op":"echo"}}'
    envelope = RequestEnvelope.from_line(line)
    assert envelope.activation_id == "r1"
    assert envelope.payload == line
    assert envelope.domain is None


def test_envelope_rebuilt_when_extra_keys_present():
    line = b'{"id":"r2","value":7,"domain":"tenant-a","internal":"x"}'
    envelope = RequestEnvelope.from_line(line)
    assert envelope.domain == "tenant-a"
    forwarded = json.loads(envelope.payload)
    assert forwarded == {"id": "r2", "value": 7}


def test_envelope_rejects_bad_lines():
    for bad in (b"not json", b"[1,2]", b'{"value":1}', b'{"id":7,"value":1}'):
        with pytest.raises(GuestError):
            RequestEnvelope.from_line(bad)


# ------------------------------------------------------------- state machine


def test_transition_table_shape():
    # every state can die; the serving cycle is the only loop
    for state in GuestState:
        assert (state, GuestState.DEAD) in LEGAL_TRANSITIONS
    assert (GuestState.CLEAN, GuestState.EXECUTING) in LEGAL_TRANSITIONS
    assert (GuestState.EXECUTING, GuestState.RESPONDED) in LEGAL_TRANSITIONS
    assert (GuestState.RESPONDED, GuestState.RESTORING) in LEGAL_TRANSITIONS
    assert (GuestState.RESTORING, GuestState.CLEAN) in LEGAL_TRANSITIONS
    # a dead guest never serves again
    assert (GuestState.DEAD, GuestState.EXECUTING) not in LEGAL_TRANSITIONS
    assert (GuestState.RESPONDED, GuestState.EXECUTING) not in LEGAL_TRANSITIONS


def test_request_on_dead_supervisor_raises():
    sup = Supervisor("base", MINI_CMD)
    with pytest.raises(GuestDiverged):
        sup.request({"op": "noop"})


def test_constructor_validates_configuration():
    with pytest.raises(ConfigError):
        Supervisor("warp", MINI_CMD)
    with pytest.raises(ConfigError):
        Supervisor("gh", [])


# ------------------------------------------------------------ mode semantics


@pytest.mark.parametrize(
    "mode,expect_found",
    [("gh", False), ("fork", False), ("base", True), ("gh-nop", True)],
)
def test_secret_visibility_per_mode(make_supervisor, mode, expect_found):
    sup = make_supervisor(mode, arena_pages=512)
    token = secrets.token_hex(16)
    sup.request({"op": "store_secret", "token": token})
    found = sup.request({"op": "find_secret", "token": token}).result["found"]
    assert found is expect_found


def test_same_domain_requests_share_state(make_supervisor):
    sup = make_supervisor("gh", arena_pages=512, skip_same_domain=True)
    token = secrets.token_hex(16)
    sup.request({"op": "store_secret", "token": token}, domain="tenant-a")
    within = sup.request({"op": "find_secret", "token": token}, domain="tenant-a")
    assert within.result["found"] is True
    # first request of a different domain triggers the deferred rollback
    across = sup.request({"op": "find_secret", "token": token}, domain="tenant-b")
    assert across.result["found"] is False


def test_domain_switch_is_when_the_rollback_happens(make_supervisor):
    sup = make_supervisor("gh", arena_pages=512, skip_same_domain=True)
    sup.request({"op": "bench", "dirty": 4}, domain="a")
    sup.request({"op": "bench", "dirty": 4}, domain="a")
    assert len(sup.reports) == 0
    sup.request({"op": "bench", "dirty": 4}, domain="b")
    assert len(sup.reports) == 1


def test_fork_mode_serves_from_fresh_children(make_supervisor):
    sup = make_supervisor("fork", arena_pages=512)
    first = sup.request({"op": "leak", "bytes": 100_000}).result["leaked_total"]
    second = sup.request({"op": "leak", "bytes": 100_000}).result["leaked_total"]
    # each request starts from the template: the leak never accumulates
    assert first == second == 100_000


def test_received_at_prestamp_extends_latency():
    sup = Supervisor("base", MINI_CMD, dummy_value={"op": "noop"})
    sup.start()
    try:
        past = time.perf_counter() - 0.25
        envelope = sup.request({"op": "noop"}, received_at=past)
        assert envelope.latency_us >= 0.25e6
    finally:
        sup.shutdown()


def test_done_token_handshake(make_supervisor):
    sup = Supervisor(
        "gh",
        guest_command(512) + ["--done-fd", "3"],
        dummy_value={"op": "bench", "dirty": 8},
        done_token=True,
    )
    sup.start()
    try:
        token = secrets.token_hex(16)
        sup.request({"op": "store_secret", "token": token})
        assert sup.request({"op": "find_secret", "token": token}).result["found"] is False
    finally:
        sup.shutdown()


# ------------------------------------------------------------------ policies


def test_strict_fd_policy_kills_on_leaked_descriptor():
    sup = Supervisor("base", MINI_CMD, dummy_value={"op": "noop"})
    sup.start()
    try:
        sup.request({"op": "noop"})
        with pytest.raises(GuestDiverged):
            sup.request({"op": "open"})
        assert sup.state is GuestState.DEAD
    finally:
        sup.shutdown()


def test_permissive_fd_policy_tolerates_new_descriptors():
    sup = Supervisor("base", MINI_CMD, dummy_value={"op": "noop"}, strict_fds=False)
    sup.start()
    try:
        sup.request({"op": "open"})
        assert sup.request({"op": "noop"}).result["ok"] is True
    finally:
        sup.shutdown()


def test_run_as_uid_drops_privileges():
    if os.getuid() != 0:
        pytest.skip("needs root to switch uids")
    sup = Supervisor("base", MINI_CMD, dummy_value={"op": "noop"}, run_as_uid=65534)
    sup.start()
    try:
        assert sup.request({"op": "uid"}).result["uid"] == 65534
    finally:
        sup.shutdown()


def test_request_timeout_marks_guest_dead():
    sup = Supervisor("base", MINI_CMD, dummy_value={"op": "noop"}, timeout_s=0.6)
    sup.start()
    try:
        with pytest.raises(RequestTimeout):
            sup.request({"op": "hang"})
        assert sup.state is GuestState.DEAD
    finally:
        sup.shutdown()


def test_stats_sink_gets_one_record_per_request(tmp_path):
    stats = tmp_path / "stats.jsonl"
    sup = Supervisor("base", MINI_CMD, dummy_value={"op": "noop"}, stats_path=str(stats))
    sup.start()
    try:
        sup.request({"op": "noop"})
        sup.request({"op": "noop"})
    finally:
        sup.shutdown()
    records = [json.loads(line) for line in stats.read_text().splitlines()]
    assert len(records) == 2
    for record in records:
        assert record["mode"] == "base"
        assert record["latency_us"] > 0
        assert record["error"] is None


# ----------------------------------------------------------------------- CLI


def _run_cli(own_args, guest_cmd, stdin_lines, tmp_path, dummy=None, timeout=60):
    dummy_file = tmp_path / "dummy.json"
    dummy_file.write_text(json.dumps(dummy if dummy is not None else {"op": "bench", "dirty": 4}))
    argv = [sys.executable, "-m", "rewind.manager"]
    argv += own_args + ["--dummy-input", str(dummy_file)]
    if guest_cmd is not None:
        argv += ["--"] + guest_cmd
    proc = subprocess.run(
        argv,
        input=b"".join(line + b"\n" for line in stdin_lines),
        capture_output=True,
        timeout=timeout,
    )
    return proc


def test_cli_serves_a_session_and_exits_zero(tmp_path):
    token = secrets.token_hex(16)
    lines = [
        json.dumps({"id": "r1", "value": {"op": "store_secret", "token": token}}).encode(),
        json.dumps({"id": "r2", "value": {"op": "find_secret", "token": token}}).encode(),
        json.dumps({"id": "r3", "value": {"op": "echo", "n": 3}}).encode(),
    ]
    proc = _run_cli(
        ["--mode", "gh"],
        [sys.executable, "-m", "rewind.guest", "512"],
        lines,
        tmp_path,
    )
    assert proc.returncode == 0, proc.stderr.decode()
    replies = [json.loads(line) for line in proc.stdout.splitlines()]
    assert [reply["id"] for reply in replies] == ["r1", "r2", "r3"]
    assert replies[1]["result"]["found"] is False
    assert replies[2]["result"]["n"] == 3


def test_cli_reports_unparseable_lines_and_keeps_serving(tmp_path):
    lines = [
        b"this is not json",
        json.dumps({"id": "r1", "value": {"op": "echo"}}).encode(),
    ]
    proc = _run_cli(
        ["--mode", "base"],
        [sys.executable, "-m", "rewind.guest", "256"],
        lines,
        tmp_path,
    )
    assert proc.returncode == 0
    replies = [json.loads(line) for line in proc.stdout.splitlines()]
    assert replies[0]["id"] == "?"
    assert "error" in replies[0]["result"]
    assert replies[1]["id"] == "r1"


def test_cli_queue_overflow_rejects_with_503(tmp_path):
    lines = [
        json.dumps({"id": f"r{i}", "value": {"op": "bench", "dirty": 2}}).encode()
        for i in range(5)
    ]
    proc = _run_cli(
        ["--mode", "base", "--max-queue", "1"],
        [sys.executable, "-m", "rewind.guest", "256"],
        lines,
        tmp_path,
    )
    assert proc.returncode == 0
    replies = [json.loads(line) for line in proc.stdout.splitlines()]
    rejected = [r for r in replies if r["result"].get("code") == 503]
    served = [r for r in replies if "error" not in r["result"]]
    assert len(rejected) + len(served) == 5
    assert rejected, "burst past the queue cap must shed load"
    assert served, "the head of the burst must still be answered"


def test_cli_exit_codes(tmp_path):
    # configuration errors -> 4
    bad_mode = _run_cli(["--mode", "warp"], ["true"], [], tmp_path)
    assert bad_mode.returncode == 4
    no_guest = _run_cli(["--mode", "gh"], None, [], tmp_path)
    assert no_guest.returncode == 4
    # guest that cannot start -> 3
    no_binary = _run_cli(["--mode", "base"], ["/nonexistent/guest"], [], tmp_path)
    assert no_binary.returncode == 3
    # guest that breaks protocol -> 2
    liar = _run_cli(
        ["--mode", "base"],
        [sys.executable, "-c", "print('garbage'); import time; time.sleep(30)"],
        [],
        tmp_path,
    )
    assert liar.returncode == 2


def test_cli_missing_dummy_file_is_config_error(tmp_path):
    argv = [
        sys.executable,
        "-m",
        "rewind.manager",
        "--mode",
        "base",
        "--dummy-input",
        str(tmp_path / "absent.json"),
        "--",
        "true",
    ]
    proc = subprocess.run(argv, capture_output=True, timeout=30)
    assert proc.returncode == 4
