"""Guest lifecycle and the serve loop: spawn → warm up → snapshot → serve.

One Supervisor owns one guest process and serializes everything: requests are
forwarded only when the guest is Clean, responses are handed off before any
rollback starts, and the next request waits until rollback finishes. Four modes:

* base    — plain passthrough; no tracing, no snapshot, no rollback.
* gh      — snapshot after warm-up; full restore after every response.
* gh-nop  — snapshot and dirty tracking, but no rollback: measures tracking cost.
* fork    — the warm process becomes a stopped template; each request is served
            by a fresh forked copy which is killed after responding.
            Single-threaded guests only.

All ptrace operations must run on the thread that attached (the kernel ties
tracer-ship to the thread, not the process), so Supervisor methods are not
thread-safe: spawn, warm-up, and every request must be driven from one thread.
The only internal thread is the stderr pump, which never touches ptrace.

Exit codes for the CLI: 0 clean shutdown, 2 guest diverged or broke protocol,
3 spawn/attach failure, 4 configuration error.
"""

from __future__ import annotations

import argparse
import ctypes
import fcntl
import json
import os
import select
import signal
import subprocess
import sys
import threading
import time
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, BinaryIO, Iterable, Optional

from . import procfs, ptrace
from .errors import (
    AttachFailed,
    ConfigError,
    GuestDiverged,
    GuestError,
    KernelUnsupported,
    ModeUnsupported,
    NotStopped,
    OutOfMemory,
    ProcessGone,
    RequestTimeout,
    SharedWritableMapping,
    SpawnFailed,
    SyscallFailed,
)
from .inject import NR_FORK, NR_WAIT4, Injector, SyscallRequest
from .restore import Restorer, RestoreReport
from .snapshot import quiesce, resume, take_snapshot, wait_parked
from .tracking import make_tracker

MODES = ("base", "gh", "gh-nop", "fork")
DONE_TOKEN = b"\x06"
DEFAULT_TIMEOUT_S = 300.0

PR_SET_PDEATHSIG = 1
_libc = ctypes.CDLL(None, use_errno=True)


class GuestState(Enum):
    SPAWNED = "Spawned"
    WARMING = "Warming"
    CLEAN = "Clean"
    EXECUTING = "Executing"
    RESPONDED = "Responded"
    RESTORING = "Restoring"
    DEAD = "Dead"


LEGAL_TRANSITIONS = frozenset(
    {
        (GuestState.SPAWNED, GuestState.WARMING),
        (GuestState.WARMING, GuestState.CLEAN),
        (GuestState.CLEAN, GuestState.EXECUTING),
        (GuestState.EXECUTING, GuestState.RESPONDED),
        (GuestState.RESPONDED, GuestState.RESTORING),
        (GuestState.RESTORING, GuestState.CLEAN),
        (GuestState.RESPONDED, GuestState.CLEAN),
        # a restore deferred by --skip-same-domain runs from Clean, before forwarding
        (GuestState.CLEAN, GuestState.RESTORING),
    }
    | {(state, GuestState.DEAD) for state in GuestState}
)


@dataclass
class RequestEnvelope:
    """One request moving through the supervisor, with its timing and outcome."""

    activation_id: str
    payload: bytes  # exactly one protocol line, newline excluded
    domain: Optional[str] = None
    received_at: float = 0.0
    responded_at: float = 0.0
    response: Optional[bytes] = None
    report: Optional[RestoreReport] = field(default=None, repr=False)
    error: Optional[str] = None

    @classmethod
    def from_line(cls, line: bytes) -> "RequestEnvelope":
        try:
            obj = json.loads(line)
            activation_id = obj["id"]
        except (ValueError, KeyError, TypeError) as exc:
            raise GuestError(f"unparseable request line: {line[:200]!r}") from exc
        if not isinstance(activation_id, str):
            raise GuestError(f"request id must be a string, got {activation_id!r}")
        domain = obj.get("domain")
        if set(obj) <= {"id", "value"}:
            payload = line.rstrip(b"\n")
        else:
            # carry only the protocol keys to the guest
            payload = json.dumps(
                {"id": activation_id, "value": obj.get("value")}, separators=(",", ":")
            ).encode()
        return cls(activation_id=activation_id, payload=payload, domain=domain)

    @property
    def latency_us(self) -> float:
        return (self.responded_at - self.received_at) * 1e6

    @property
    def result(self) -> Any:
        if self.response is None:
            return None
        return json.loads(self.response)["result"]


def _make_payload(activation_id: str, value: Any) -> bytes:
    return json.dumps({"id": activation_id, "value": value}, separators=(",", ":")).encode()


class Supervisor:
    """One guest process under one of the four isolation modes."""

    def __init__(
        self,
        mode: str,
        command: list[str],
        dummy_value: Any = None,
        *,
        skip_same_domain: bool = False,
        strict_fds: bool = True,
        zero_full_stack: bool = False,
        run_as_uid: Optional[int] = None,
        max_queue: int = 0,
        timeout_s: float = DEFAULT_TIMEOUT_S,
        stats_path: Optional[str] = None,
        done_token: bool = False,
        tolerate_shared: bool = False,
        madvise_before_registers: bool = False,
    ):
        if mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {mode!r}")
        if not command:
            raise ConfigError("no guest command given")
        self.mode = mode
        self.command = list(command)
        self.dummy_value = dummy_value
        self.skip_same_domain = skip_same_domain
        self.strict_fds = strict_fds
        self.zero_full_stack = zero_full_stack
        self.run_as_uid = run_as_uid
        self.max_queue = max_queue
        self.timeout_s = timeout_s
        self.stats_path = stats_path
        self.done_token = done_token
        self.tolerate_shared = tolerate_shared
        self.madvise_before_registers = madvise_before_registers

        self.proc: Optional[subprocess.Popen] = None
        self.pid = 0
        self.state = GuestState.DEAD
        self.attached: set[int] = set()
        self.injector: Optional[Injector] = None
        self.tracker = None
        self.snapshot = None
        self.restorer: Optional[Restorer] = None
        self.reports: list[RestoreReport] = []
        self.requests_served = 0

        self._stdin_fd = -1
        self._stdout_fd = -1
        self._done_read_fd = -1
        self._stdout_buf = bytearray()
        self._warm_fds: dict[int, str] = {}
        self._restore_pending = False
        self._last_domain: Optional[str] = None
        self._template_regs: Optional[ptrace.ThreadRegisters] = None
        self._active_child = 0
        self._stats_file: Optional[BinaryIO] = None
        self._request_seq = 0

    # ------------------------------------------------------------------ setup

    def __enter__(self) -> "Supervisor":
        return self.start()

    def __exit__(self, *_exc) -> None:
        self.shutdown()

    def start(self) -> "Supervisor":
        self.spawn()
        self.warmup()
        return self

    def _transition(self, new: GuestState) -> None:
        if (self.state, new) not in LEGAL_TRANSITIONS:
            raise AssertionError(f"illegal guest state transition {self.state} -> {new}")
        self.state = new

    def spawn(self) -> None:
        # The DONE pipe sits at fd 3 in the guest by protocol convention. pass_fds
        # can only preserve a parent fd at its own number, so park the write end at
        # parent fd 3 for the duration of the fork (saving whatever was there).
        saved_fd3 = -1
        pass_fds: tuple[int, ...] = ()
        if self.done_token:
            read_fd, write_fd = os.pipe()
            if read_fd == 3:
                read_fd = fcntl.fcntl(read_fd, fcntl.F_DUPFD, 16)
                os.close(3)
            self._done_read_fd = read_fd
            if write_fd != 3:
                try:
                    saved_fd3 = os.dup(3)
                except OSError:
                    saved_fd3 = -1
                os.dup2(write_fd, 3)
                os.close(write_fd)
            pass_fds = (3,)
        run_as_uid = self.run_as_uid

        def in_child():
            _libc.prctl(PR_SET_PDEATHSIG, signal.SIGKILL)
            if run_as_uid is not None:
                os.setgid(run_as_uid)
                os.setuid(run_as_uid)

        # The kernel rewrites each thread's restartable-sequences area on
        # every context switch, which would make one TLS page look perpetually
        # dirty. Ask glibc not to register one; self-registering runtimes are
        # caught at snapshot time instead (Snapshot.kernel_scratch).
        env = dict(os.environ)
        tunables = "glibc.pthread.rseq=0"
        if env.get("GLIBC_TUNABLES"):
            tunables = env["GLIBC_TUNABLES"] + ":" + tunables
        env["GLIBC_TUNABLES"] = tunables

        try:
            self.proc = subprocess.Popen(
                self.command,
                stdin=subprocess.PIPE,
                stdout=subprocess.PIPE,
                stderr=subprocess.PIPE,
                bufsize=0,
                preexec_fn=in_child,
                pass_fds=pass_fds,
                env=env,
            )
        except (OSError, ValueError, subprocess.SubprocessError) as exc:
            raise SpawnFailed(f"cannot start {self.command[0]}: {exc}") from exc
        finally:
            if self.done_token:
                os.close(3)
                if saved_fd3 >= 0:
                    os.dup2(saved_fd3, 3)
                    os.close(saved_fd3)

        self.pid = self.proc.pid
        self._stdin_fd = self.proc.stdin.fileno()
        self._stdout_fd = self.proc.stdout.fileno()
        threading.Thread(
            target=_pump_stderr, args=(self.proc.stderr, self.pid), daemon=True
        ).start()
        self.state = GuestState.SPAWNED

        if self.mode != "base":
            options = ptrace.PTRACE_O_EXITKILL
            if self.mode == "fork":
                options |= ptrace.PTRACE_O_TRACEFORK
            try:
                ptrace.seize(self.pid, options)
            except (OSError, ProcessGone) as exc:
                raise AttachFailed(f"cannot trace pid {self.pid}: {exc}") from exc
            self.attached = {self.pid}

    def warmup(self) -> None:
        """Run the deployer's dummy request, then snapshot (or park the template)."""
        self._transition(GuestState.WARMING)
        envelope = RequestEnvelope(
            activation_id="warmup-0", payload=_make_payload("warmup-0", self.dummy_value)
        )
        envelope.received_at = time.perf_counter()
        self._forward_line(envelope.payload)
        self._read_response(envelope)

        if self.mode in ("gh", "gh-nop"):
            info, _parked = wait_parked(self.pid)
            stops = quiesce(self.pid, attached=tuple(self.attached), pre_stopped={self.pid: info})
            self.attached = set(stops)
            self.injector = Injector(self.pid)
            true_brk = self.injector.brk(self.pid, 0)
            layout = procfs.read_memory_layout(self.pid)
            self.snapshot = take_snapshot(
                self.pid, layout, tolerate_shared=self.tolerate_shared, true_brk=true_brk
            )
            self.tracker = make_tracker(self.pid, self.injector)
            self.tracker.arm(layout)
            self.restorer = Restorer(
                self.snapshot,
                self.injector,
                self.tracker,
                self.attached,
                zero_full_stack=self.zero_full_stack,
                madvise_before_registers=self.madvise_before_registers,
            )
            self._warm_fds = dict(self.snapshot.fds)
            resume(stops)
        elif self.mode == "fork":
            threads = procfs.list_threads(self.pid)
            if len(threads) > 1:
                raise ModeUnsupported(
                    f"fork mode needs a single-threaded template; guest has {len(threads)} threads"
                )
            wait_parked(self.pid)
            self.injector = Injector(self.pid)
            self._template_regs = ptrace.capture_thread_registers(self.pid)
            self._warm_fds = procfs.list_fds(self.pid)
            # the template never runs again; every request forks a copy of it
        else:
            self._warm_fds = procfs.list_fds(self.pid)

        if self.stats_path:
            self._stats_file = open(self.stats_path, "ab")
        self._transition(GuestState.CLEAN)

    # ------------------------------------------------------------------ serving

    def request(
        self,
        value: Any,
        activation_id: Optional[str] = None,
        domain: Optional[str] = None,
        received_at: Optional[float] = None,
    ) -> RequestEnvelope:
        """Library-level convenience: wrap a value, serve it, return the envelope.

        received_at backdates the arrival stamp (perf_counter domain) so a
        caller can charge queue wait — e.g. time spent finishing the previous
        request's rollback — to this request's measured latency.
        """
        self._request_seq += 1
        activation_id = activation_id or f"r{self._request_seq}"
        envelope = RequestEnvelope(
            activation_id=activation_id,
            payload=_make_payload(activation_id, value),
            domain=domain,
        )
        if received_at is not None:
            envelope.received_at = received_at
        return self.handle_request(envelope)

    def handle_request(self, envelope: RequestEnvelope) -> RequestEnvelope:
        """Serve one request end to end; restore runs after the response is out."""
        if self.state is GuestState.DEAD:
            raise GuestDiverged("guest is dead")
        if not envelope.received_at:
            envelope.received_at = time.perf_counter()

        if self._restore_pending:
            same_domain = (
                self.skip_same_domain
                and envelope.domain is not None
                and envelope.domain == self._last_domain
            )
            if not same_domain:
                self._do_restore(envelope)

        self._transition(GuestState.EXECUTING)
        try:
            if self.mode == "fork":
                self._active_child = self._fork_child()
            self._forward_line(envelope.payload)
            self._read_response(envelope)
        except (GuestDiverged, GuestError, RequestTimeout):
            self._mark_dead()
            raise
        envelope.responded_at = time.perf_counter()
        self._transition(GuestState.RESPONDED)
        self.requests_served += 1

        # --- everything below is off the critical path of this request
        try:
            if self.mode == "fork":
                self._reap_child()
                self._transition(GuestState.CLEAN)
            else:
                self._check_fd_policy()
                if self.mode == "gh":
                    if self.skip_same_domain:
                        self._restore_pending = True
                        self._last_domain = envelope.domain
                        self._transition(GuestState.CLEAN)
                    else:
                        self._do_restore(envelope, from_responded=True)
                elif self.mode == "gh-nop":
                    self._transition(GuestState.CLEAN)
                    envelope.report = self.restorer.restore(skip_repair=True)
                    self.reports.append(envelope.report)
                else:
                    self._transition(GuestState.CLEAN)
        except (GuestDiverged, SyscallFailed, ProcessGone) as exc:
            self._mark_dead()
            if isinstance(exc, GuestDiverged):
                raise
            raise GuestDiverged(str(exc)) from exc

        self._write_stats(envelope)
        return envelope

    def _do_restore(self, envelope: RequestEnvelope, from_responded: bool = False) -> None:
        self._transition(GuestState.RESTORING)
        try:
            report = self.restorer.restore()
        except GuestDiverged:
            self._mark_dead()
            raise
        self._restore_pending = False
        self._last_domain = None
        self.reports.append(report)
        if from_responded:
            envelope.report = report
        self._transition(GuestState.CLEAN)

    def restore_now(self) -> Optional["RestoreReport"]:
        """Roll the guest back immediately, outside any request.

        Lets a caller pay the restore cost at a time of its choosing (after a
        deferred same-domain batch, or ahead of a latency-sensitive request).
        Only meaningful in gh mode; returns the report, or None in other modes.
        """
        if self.mode != "gh" or self.restorer is None:
            return None
        if self.state is not GuestState.CLEAN:
            raise GuestDiverged(f"cannot restore from state {self.state.name}")
        self._transition(GuestState.RESTORING)
        try:
            report = self.restorer.restore()
        except GuestDiverged:
            self._mark_dead()
            raise
        self._restore_pending = False
        self._last_domain = None
        self.reports.append(report)
        self._transition(GuestState.CLEAN)
        return report

    def serve(self, source: BinaryIO, sink: BinaryIO) -> int:
        """Pull request lines from source until EOF; serialize through the guest.

        Arrival timestamps are taken when a line is drained from the source, so
        queue wait (e.g. waiting out a restore) is part of measured latency.
        Returns the number of requests answered.
        """
        src_fd = source.fileno()
        src_buf = bytearray()
        src_open = True
        queue: deque[RequestEnvelope] = deque()
        answered = 0

        def drain(block: bool) -> None:
            nonlocal src_open, src_buf
            while src_open:
                timeout = None if (block and not queue) else 0
                ready, _, _ = select.select([src_fd], [], [], timeout)
                if not ready:
                    return
                chunk = os.read(src_fd, 65536)
                if not chunk:
                    src_open = False
                    return
                src_buf += chunk
                while True:
                    cut = src_buf.find(b"\n")
                    if cut < 0:
                        break
                    line = bytes(src_buf[:cut])
                    del src_buf[: cut + 1]
                    if not line.strip():
                        continue
                    arrived = time.perf_counter()
                    try:
                        envelope = RequestEnvelope.from_line(line)
                    except GuestError as exc:
                        sink.write(_error_line("?", str(exc)))
                        sink.flush()
                        continue
                    envelope.received_at = arrived
                    if self.max_queue and len(queue) >= self.max_queue:
                        envelope.error = "queue overflow"
                        sink.write(
                            _error_line(envelope.activation_id, "queue overflow", code=503)
                        )
                        sink.flush()
                        self._write_stats(envelope)
                        continue
                    queue.append(envelope)

        try:
            while True:
                drain(block=not queue)
                if not queue:
                    if not src_open:
                        return answered
                    continue
                envelope = queue.popleft()
                try:
                    self.handle_request(envelope)
                except (GuestDiverged, GuestError, RequestTimeout) as exc:
                    sink.write(_error_line(envelope.activation_id, f"ContainerLost: {exc}"))
                    for waiting in queue:
                        sink.write(_error_line(waiting.activation_id, "ContainerLost"))
                    sink.flush()
                    raise
                sink.write(envelope.response + b"\n")
                sink.flush()
                answered += 1
        finally:
            if self._stats_file:
                self._stats_file.flush()

    # ------------------------------------------------------------------ plumbing

    def _forward_line(self, payload: bytes) -> None:
        data = payload + b"\n"
        done = 0
        try:
            while done < len(data):
                done += os.write(self._stdin_fd, data[done:])
        except (BrokenPipeError, OSError) as exc:
            raise GuestDiverged(f"guest stdin closed: {exc}") from exc

    def _read_response(self, envelope: RequestEnvelope) -> None:
        line = self._read_line(self.timeout_s)
        if self.done_token:
            self._read_done_byte()
        try:
            obj = json.loads(line)
            response_id = obj["id"]
            obj["result"]
        except (ValueError, KeyError, TypeError) as exc:
            raise GuestError(f"guest wrote a non-protocol line: {line[:200]!r}") from exc
        if response_id != envelope.activation_id:
            raise GuestDiverged(
                f"response id {response_id!r} does not match request {envelope.activation_id!r}"
            )
        envelope.response = line

    def _read_line(self, timeout_s: float) -> bytes:
        deadline = time.monotonic() + timeout_s
        while True:
            cut = self._stdout_buf.find(b"\n")
            if cut >= 0:
                line = bytes(self._stdout_buf[:cut])
                del self._stdout_buf[: cut + 1]
                return line
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                raise RequestTimeout(f"no response after {timeout_s}s")
            ready, _, _ = select.select([self._stdout_fd], [], [], min(remaining, 0.02))
            if not ready:
                self._service_stops()
                self._check_worker_alive()
                continue
            chunk = os.read(self._stdout_fd, 65536)
            if not chunk:
                raise GuestDiverged("guest closed stdout")
            self._stdout_buf += chunk

    def _service_stops(self) -> None:
        """Acknowledge ptrace stops the free-running guest hits between our own ops.

        Every signal delivered to a tracee suspends it until the tracer responds,
        so while we sit waiting for guest output we must keep re-injecting signals
        (and waving through fork events) or an innocent SIGCHLD freezes the guest.
        The fork-mode template is exempt: it is parked in ptrace-stop on purpose,
        and a stopped thread generates no new events to consume.
        """
        if self.mode == "base":
            return
        for tid in list(self.attached):
            if self.mode == "fork" and self._template_regs is not None:
                continue
            while True:
                try:
                    info = ptrace.poll_stop(tid)
                except ProcessGone:
                    self.attached.discard(tid)
                    break
                if info is None:
                    break
                if not info.stopped:
                    self.attached.discard(tid)
                    break
                if info.event == ptrace.PTRACE_EVENT_FORK:
                    stray = ptrace.geteventmsg(tid)
                    try:
                        ptrace.wait_stop(stray)
                        ptrace.detach(stray, 0)
                    except (ProcessGone, TimeoutError, OSError):
                        pass
                    ptrace.cont(tid, 0)
                    continue
                try:
                    ptrace.cont(tid, ptrace.resume_signal(info))
                except (ProcessGone, NotStopped):
                    break

    def _read_done_byte(self) -> None:
        ready, _, _ = select.select([self._done_read_fd], [], [], self.timeout_s)
        if not ready:
            raise RequestTimeout("response line arrived but DONE token did not")
        token = os.read(self._done_read_fd, 1)
        if token != DONE_TOKEN:
            raise GuestError(f"bad DONE token {token!r}")

    def _check_worker_alive(self) -> None:
        if self.mode == "fork" and self._active_child:
            try:
                with open(f"/proc/{self._active_child}/stat") as handle:
                    state = handle.read().rsplit(")", 1)[1].split()[0]
            except OSError:
                state = "X"
            if state in ("Z", "X"):
                raise GuestDiverged(f"forked worker {self._active_child} died mid-request")

    def _check_fd_policy(self) -> None:
        current = procfs.list_fds(self.pid)
        grown = {fd: path for fd, path in current.items() if fd not in self._warm_fds}
        if not grown:
            return
        described = ", ".join(f"{fd}->{path}" for fd, path in sorted(grown.items()))
        if self.strict_fds:
            raise GuestDiverged(f"guest opened new descriptors: {described}")
        print(f"[supervisor] pid {self.pid} opened new descriptors: {described}", file=sys.stderr)
        # tolerate them from now on, or every later request warns again
        self._warm_fds.update(grown)

    # ------------------------------------------------------------------ fork mode

    def _fork_child(self) -> int:
        """Fork a worker off the stopped template and park it in read(stdin)."""
        template = self.pid
        parked = self._template_regs.regs()
        regs = parked.copy()
        regs.rip = self.injector.gadget
        regs.rax = NR_FORK
        regs.orig_rax = 0xFFFFFFFFFFFFFFFF
        ptrace.setregs(template, regs)
        child = 0
        try:
            for _ in range(64):
                ptrace.singlestep(template)
                info = ptrace.wait_stop(template)
                if not info.stopped:
                    raise ProcessGone(f"template died during fork (status {info.status:#x})")
                if info.event == ptrace.PTRACE_EVENT_FORK:
                    child = ptrace.geteventmsg(template)
                    continue
                if (
                    info.stop_signal == signal.SIGTRAP
                    and not info.group_stop
                    and not info.event
                ):
                    break
            else:
                raise SyscallFailed("fork injection never reached its trap", retval=0)
            result = ptrace.getregs(template).syscall_result()
            if not child:
                child = result
            if child <= 0 or result < 0:
                raise SyscallFailed(f"injected fork returned {result}", retval=result)
        finally:
            ptrace.setregs(template, parked)
        self.injector.count += 1

        birth = ptrace.wait_stop(child)
        if not birth.stopped:
            raise GuestDiverged(f"forked worker {child} died at birth")
        ptrace.setregs(child, parked)
        ptrace.detach(child, 0)
        return child

    def _reap_child(self) -> None:
        """Kill the per-request worker and reap the zombie through the template."""
        child = self._active_child
        self._active_child = 0
        if not child:
            return
        try:
            os.kill(child, signal.SIGKILL)
        except ProcessLookupError:
            pass
        reap = SyscallRequest(
            NR_WAIT4, (0xFFFFFFFFFFFFFFFF, 0, os.WNOHANG, 0), None, "wait4(-1, WNOHANG)"
        )
        deadline = time.monotonic() + 0.25
        while time.monotonic() < deadline:
            got = self.injector.inject(self.pid, reap)
            if got == child:
                return
            if got in (0, -10):  # nothing exited yet / ECHILD
                time.sleep(0.0005)
                continue
            # reaped some other stale worker; go around again
        # not fatal: the zombie will be collected on the next request's reap pass

    # ------------------------------------------------------------------ teardown

    def _mark_dead(self) -> None:
        if self.state is not GuestState.DEAD:
            self.state = GuestState.DEAD

    def _write_stats(self, envelope: RequestEnvelope) -> None:
        if not self._stats_file:
            return
        record = {
            "activation_id": envelope.activation_id,
            "mode": self.mode,
            "latency_us": round(envelope.latency_us, 1) if envelope.responded_at else None,
            "error": envelope.error,
            "restore": envelope.report.as_dict() if envelope.report else None,
        }
        self._stats_file.write(json.dumps(record).encode() + b"\n")

    def shutdown(self) -> None:
        """Kill the guest and release every descriptor; idempotent."""
        if self._active_child:
            try:
                os.kill(self._active_child, signal.SIGKILL)
            except ProcessLookupError:
                pass
            self._active_child = 0
        if self.restorer is not None:
            self.restorer.close()
            self.restorer = None
        if self.tracker is not None:
            self.tracker.close()
            self.tracker = None
        if self.injector is not None:
            self.injector.close()
            self.injector = None
        if self.proc is not None:
            try:
                os.kill(self.pid, signal.SIGKILL)
            except (ProcessLookupError, PermissionError):
                pass
            try:
                os.waitpid(self.pid, ptrace.WALL)
            except ChildProcessError:
                pass
            self.proc.returncode = -signal.SIGKILL
            for stream in (self.proc.stdin, self.proc.stdout, self.proc.stderr):
                try:
                    stream.close()
                except OSError:
                    pass
            self.proc = None
        if self._done_read_fd >= 0:
            os.close(self._done_read_fd)
            self._done_read_fd = -1
        if self._stats_file:
            self._stats_file.close()
            self._stats_file = None
        self.state = GuestState.DEAD


def _pump_stderr(stream: BinaryIO, pid: int) -> None:
    try:
        for raw in stream:
            sys.stderr.write(f"[guest {pid}] {raw.decode(errors='replace')}")
    except (ValueError, OSError):
        pass


def _error_line(activation_id: str, message: str, code: int = 500) -> bytes:
    return (
        json.dumps(
            {"id": activation_id, "result": {"error": message, "code": code}},
            separators=(",", ":"),
        ).encode()
        + b"\n"
    )


# ---------------------------------------------------------------------------- CLI


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        raise ConfigError(message)


def _build_parser() -> _Parser:
    parser = _Parser(
        prog="supervisor",
        description="Run a guest under snapshot/rollback request isolation.",
    )
    parser.add_argument("--mode", required=True, choices=MODES)
    parser.add_argument(
        "--dummy-input",
        required=True,
        metavar="FILE",
        help="file holding the warm-up request value (JSON, or a raw string)",
    )
    parser.add_argument("--skip-same-domain", action="store_true")
    fd_group = parser.add_mutually_exclusive_group()
    fd_group.add_argument("--strict-fds", dest="strict_fds", action="store_true", default=True)
    fd_group.add_argument("--permissive-fds", dest="strict_fds", action="store_false")
    parser.add_argument("--zero-full-stack", action="store_true")
    parser.add_argument("--run-as-uid", type=int, default=None, metavar="N")
    parser.add_argument("--max-queue", type=int, default=0, metavar="N")
    parser.add_argument("--timeout-s", type=float, default=DEFAULT_TIMEOUT_S, metavar="N")
    parser.add_argument("--stats-out", default=None, metavar="FILE")
    return parser


def main(argv: Optional[list[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    if "--" in argv:
        split = argv.index("--")
        own, command = argv[:split], argv[split + 1 :]
    else:
        own, command = argv, []

    supervisor = None
    try:
        args = _build_parser().parse_args(own)
        if not command:
            raise ConfigError("no guest command after '--'")
        try:
            with open(args.dummy_input, "rb") as handle:
                raw = handle.read().strip()
        except OSError as exc:
            raise ConfigError(f"cannot read --dummy-input: {exc}") from exc
        try:
            dummy_value = json.loads(raw)
        except ValueError:
            dummy_value = raw.decode(errors="replace")

        supervisor = Supervisor(
            args.mode,
            command,
            dummy_value=dummy_value,
            skip_same_domain=args.skip_same_domain,
            strict_fds=args.strict_fds,
            zero_full_stack=args.zero_full_stack,
            run_as_uid=args.run_as_uid,
            max_queue=args.max_queue,
            timeout_s=args.timeout_s,
            stats_path=args.stats_out,
        )
        supervisor.start()
        supervisor.serve(sys.stdin.buffer, sys.stdout.buffer)
        return 0
    except ConfigError as exc:
        print(f"supervisor: configuration error: {exc}", file=sys.stderr)
        return 4
    except ModeUnsupported as exc:
        print(f"supervisor: {exc}", file=sys.stderr)
        return 4
    except (SpawnFailed, AttachFailed, KernelUnsupported) as exc:
        print(f"supervisor: cannot start guest: {exc}", file=sys.stderr)
        return 3
    except (
        GuestDiverged,
        GuestError,
        RequestTimeout,
        SharedWritableMapping,
        OutOfMemory,
        ProcessGone,
    ) as exc:
        print(f"supervisor: guest lost: {exc}", file=sys.stderr)
        return 2
    except KeyboardInterrupt:
        return 0
    finally:
        if supervisor is not None:
            supervisor.shutdown()


if __name__ == "__main__":
    sys.exit(main())
