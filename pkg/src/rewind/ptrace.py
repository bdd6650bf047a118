"""Thin ctypes layer over ptrace(2) for x86-64: seize/stop discipline and register files.

The supervisor attaches with PTRACE_SEIZE at spawn time and quiesces threads with
PTRACE_INTERRUPT (group-stop), so the guest is never inspected while running. All
register capture happens on stopped threads and round-trips byte-exactly.
"""

from __future__ import annotations

import ctypes
import ctypes.util
import os
import signal
import struct
import time
from dataclasses import dataclass
from typing import Optional

from .errors import NotStopped, ProcessGone

_libc = ctypes.CDLL(ctypes.util.find_library("c") or "libc.so.6", use_errno=True)
_libc.ptrace.restype = ctypes.c_long
_libc.ptrace.argtypes = [ctypes.c_long, ctypes.c_long, ctypes.c_void_p, ctypes.c_void_p]

PTRACE_PEEKDATA = 2
PTRACE_POKEDATA = 5
PTRACE_CONT = 7
PTRACE_SINGLESTEP = 9
PTRACE_GETREGS = 12
PTRACE_SETREGS = 13
PTRACE_DETACH = 17
PTRACE_SETOPTIONS = 0x4200
PTRACE_GETEVENTMSG = 0x4201
PTRACE_SEIZE = 0x4206
PTRACE_INTERRUPT = 0x4207
PTRACE_GET_RSEQ_CONFIGURATION = 0x420F

PTRACE_O_TRACEFORK = 0x0002
PTRACE_O_EXITKILL = 0x00100000

PTRACE_EVENT_FORK = 1
PTRACE_EVENT_STOP = 128

# waitpid option: also wait for clone-children (threads); not exposed by the os module.
WALL = 0x40000000


class UserRegs(ctypes.Structure):
    """x86-64 user_regs_struct; 27 unsigned long longs, as the kernel lays it out."""

    _fields_ = [
        (name, ctypes.c_ulonglong)
        for name in (
            "r15", "r14", "r13", "r12", "rbp", "rbx", "r11", "r10",
            "r9", "r8", "rax", "rcx", "rdx", "rsi", "rdi", "orig_rax",
            "rip", "cs", "eflags", "rsp", "ss", "fs_base", "gs_base",
            "ds", "es", "fs", "gs",
        )
    ]

    def copy(self) -> "UserRegs":
        dup = UserRegs()
        ctypes.memmove(ctypes.addressof(dup), ctypes.addressof(self), ctypes.sizeof(UserRegs))
        return dup

    def to_bytes(self) -> bytes:
        return ctypes.string_at(ctypes.addressof(self), ctypes.sizeof(UserRegs))

    @classmethod
    def from_bytes(cls, blob: bytes) -> "UserRegs":
        if len(blob) != ctypes.sizeof(UserRegs):
            raise ValueError(f"register blob must be {ctypes.sizeof(UserRegs)} bytes, got {len(blob)}")
        regs = cls()
        ctypes.memmove(ctypes.addressof(regs), blob, len(blob))
        return regs

    def syscall_result(self) -> int:
        """rax as a signed value (kernel returns -errno in-band)."""
        return ctypes.c_long(self.rax).value


@dataclass(frozen=True)
class ThreadRegisters:
    """Opaque general-purpose register file of one stopped thread."""

    tid: int
    data: bytes

    def regs(self) -> UserRegs:
        return UserRegs.from_bytes(self.data)


_libc.syscall.restype = ctypes.c_long


def raw_syscall(number: int, *args: int) -> int:
    """Direct syscall from the supervisor process; returns -errno style result."""
    ctypes.set_errno(0)
    ret = _libc.syscall(
        ctypes.c_long(number), *(ctypes.c_long(arg) for arg in args)
    )
    if ret == -1 and ctypes.get_errno():
        return -ctypes.get_errno()
    return ret


def tgkill(tgid: int, tid: int, sig: int) -> None:
    ret = raw_syscall(234, tgid, tid, sig)  # __NR_tgkill
    if ret < 0:
        raise OSError(-ret, f"tgkill({tgid},{tid},{sig}): {os.strerror(-ret)}")


def ptrace(request: int, pid: int, addr: int = 0, data: int = 0) -> int:
    ctypes.set_errno(0)
    ret = _libc.ptrace(request, pid, ctypes.c_void_p(addr), ctypes.c_void_p(data))
    if ret == -1:
        err = ctypes.get_errno()
        if err:
            if err == 3:  # ESRCH
                raise ProcessGone(f"ptrace(req={request:#x}, tid={pid}): {os.strerror(err)}")
            raise OSError(err, f"ptrace(req={request:#x}, tid={pid}): {os.strerror(err)}")
    return ret


def seize(tid: int, options: int = 0) -> None:
    ptrace(PTRACE_SEIZE, tid, 0, options)


def interrupt(tid: int) -> None:
    ptrace(PTRACE_INTERRUPT, tid)


def cont(tid: int, sig: int = 0) -> None:
    ptrace(PTRACE_CONT, tid, 0, sig)


def singlestep(tid: int, sig: int = 0) -> None:
    ptrace(PTRACE_SINGLESTEP, tid, 0, sig)


def detach(tid: int, sig: int = 0) -> None:
    ptrace(PTRACE_DETACH, tid, 0, sig)


def set_options(tid: int, options: int) -> None:
    ptrace(PTRACE_SETOPTIONS, tid, 0, options)


def geteventmsg(tid: int) -> int:
    msg = ctypes.c_ulong()
    ptrace(PTRACE_GETEVENTMSG, tid, 0, ctypes.addressof(msg))
    return msg.value


def getregs(tid: int) -> UserRegs:
    regs = UserRegs()
    try:
        ptrace(PTRACE_GETREGS, tid, 0, ctypes.addressof(regs))
    except ProcessGone:
        raise
    except OSError as exc:
        raise NotStopped(f"GETREGS tid={tid}: {exc}") from exc
    return regs


def setregs(tid: int, regs: UserRegs) -> None:
    try:
        ptrace(PTRACE_SETREGS, tid, 0, ctypes.addressof(regs))
    except ProcessGone:
        raise
    except OSError as exc:
        raise NotStopped(f"SETREGS tid={tid}: {exc}") from exc


def get_rseq_area(tid: int) -> Optional[tuple[int, int]]:
    """Return (address, size) of the thread's restartable-sequences area.

    The kernel rewrites that area on every context switch, so trackers must
    treat its pages as kernel scratch. Returns None when the thread has no
    area registered (e.g. spawned with GLIBC_TUNABLES=glibc.pthread.rseq=0)
    or the kernel predates the query.
    """
    buf = (ctypes.c_char * 32)()
    ctypes.set_errno(0)
    ret = _libc.ptrace(
        PTRACE_GET_RSEQ_CONFIGURATION, tid, ctypes.sizeof(buf), ctypes.byref(buf)
    )
    if ret < 0:
        return None
    ptr, size = struct.unpack_from("<QI", buf, 0)
    if ptr == 0 or size == 0:
        return None
    return ptr, size


def capture_thread_registers(tid: int) -> ThreadRegisters:
    return ThreadRegisters(tid=tid, data=getregs(tid).to_bytes())


def set_thread_registers(tid: int, regs: ThreadRegisters) -> None:
    setregs(tid, regs.regs())


def peek_word(tid: int, addr: int) -> int:
    ctypes.set_errno(0)
    ret = _libc.ptrace(PTRACE_PEEKDATA, tid, ctypes.c_void_p(addr), None)
    err = ctypes.get_errno()
    if ret == -1 and err:
        raise OSError(err, f"PEEKDATA tid={tid} addr={addr:#x}: {os.strerror(err)}")
    return ret & 0xFFFFFFFFFFFFFFFF


def poke_word(tid: int, addr: int, word: int) -> None:
    ptrace(PTRACE_POKEDATA, tid, addr, word)


@dataclass(frozen=True)
class StopInfo:
    """Classified waitpid status for a tracee."""

    tid: int
    status: int
    stopped: bool
    exited: bool
    signaled: bool
    stop_signal: int  # signal of the stop (or termination signal)
    event: int  # ptrace event number, 0 if none
    group_stop: bool

    @property
    def gone(self) -> bool:
        return self.exited or self.signaled


def classify_wait(tid: int, status: int) -> StopInfo:
    if os.WIFEXITED(status):
        return StopInfo(tid, status, False, True, False, 0, 0, False)
    if os.WIFSIGNALED(status):
        return StopInfo(tid, status, False, False, True, os.WTERMSIG(status), 0, False)
    if os.WIFSTOPPED(status):
        sig = os.WSTOPSIG(status)
        event = status >> 16
        return StopInfo(
            tid,
            status,
            True,
            False,
            False,
            sig,
            event if event != PTRACE_EVENT_STOP else 0,
            event == PTRACE_EVENT_STOP,
        )
    return StopInfo(tid, status, False, False, False, 0, 0, False)


def wait_stop(tid: int, timeout_s: float = 5.0) -> StopInfo:
    """Wait for the next stop/exit of one tracee; WNOHANG poll loop with deadline."""
    deadline = time.monotonic() + timeout_s
    while True:
        try:
            waited, status = os.waitpid(tid, os.WNOHANG | WALL)
        except ChildProcessError as exc:
            raise ProcessGone(f"waitpid({tid}): no such tracee") from exc
        if waited == tid:
            return classify_wait(tid, status)
        if time.monotonic() > deadline:
            raise TimeoutError(f"tid {tid} did not stop within {timeout_s}s")
        time.sleep(0.0002)


def poll_stop(tid: int) -> Optional[StopInfo]:
    """Non-blocking check for a pending stop/exit notification of one tracee."""
    try:
        waited, status = os.waitpid(tid, os.WNOHANG | WALL)
    except ChildProcessError as exc:
        raise ProcessGone(f"waitpid({tid}): no such tracee") from exc
    if waited == 0:
        return None
    return classify_wait(tid, status)


def interrupt_and_wait(tid: int, timeout_s: float = 5.0) -> StopInfo:
    """Stop one tracee and report how it stopped.

    The stop may be the requested group-stop or a signal-delivery-stop that was
    already pending; either way the thread is stopped and safe to inspect. The
    caller must look at the returned StopInfo when resuming: a signal-delivery
    stop needs its signal re-injected via cont(tid, sig).
    """
    interrupt(tid)
    info = wait_stop(tid, timeout_s)
    if not info.stopped:
        raise ProcessGone(f"tid {tid} exited while being stopped (status {info.status:#x})")
    return info


def resume_signal(info: StopInfo) -> int:
    """Which signal to pass to cont() so the stop we consumed is not lost."""
    if info.group_stop or not info.stopped:
        return 0
    if info.event:  # ptrace event stops carry no deliverable signal
        return 0
    if info.stop_signal in (signal.SIGTRAP, signal.SIGSTOP):
        return 0
    return info.stop_signal
