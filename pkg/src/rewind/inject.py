"""Execute chosen syscalls inside a stopped guest by steering its registers.

The guest's register file is saved, pointed at a syscall instruction already present
in its address space (the vdso has one; so does any libc), single-stepped through the
syscall, and restored byte-exactly. orig_rax is parked at -1 during the injected step
so the kernel's syscall-restart bookkeeping cannot rewind the instruction pointer out
from under us; restoring the saved registers afterwards re-arms the interrupted
syscall's restart exactly as it was.
"""

from __future__ import annotations

import errno
import os
import signal
from dataclasses import dataclass, field
from typing import Callable, Optional

from . import ptrace, procfs
from .errors import GadgetNotFound, ProcessGone, SyscallFailed

SYSCALL_INSN = b"\x0f\x05"

# x86-64 syscall numbers used across the supervisor.
NR_READ = 0
NR_READV = 19
NR_CLOSE = 3
NR_MMAP = 9
NR_MPROTECT = 10
NR_MUNMAP = 11
NR_BRK = 12
NR_MADVISE = 28
NR_GETPID = 39
NR_FORK = 57
NR_WAIT4 = 61
NR_USERFAULTFD = 323
NR_PIDFD_OPEN = 434
NR_PIDFD_GETFD = 438

PROT_READ = 0x1
PROT_WRITE = 0x2
PROT_EXEC = 0x4
MAP_PRIVATE = 0x02
MAP_FIXED = 0x10
MAP_ANONYMOUS = 0x20
MADV_DONTNEED = 4

ERESTARTSYS = 512
ERESTARTNOINTR = 513
ERESTARTNOHAND = 514
ERESTART_RESTARTBLOCK = 516
RESTART_ERRNOS = frozenset({-ERESTARTSYS, -ERESTARTNOINTR, -ERESTARTNOHAND, -ERESTART_RESTARTBLOCK})


@dataclass(frozen=True)
class SyscallRequest:
    number: int
    args: tuple[int, ...] = ()
    expected: Optional[Callable[[int], bool]] = None
    label: str = ""

    def describe(self) -> str:
        return self.label or f"syscall {self.number}"


def find_syscall_gadget(pid: int, layout: Optional[procfs.MemoryLayout] = None) -> int:
    """Locate an executable syscall instruction in the guest, preferring the vdso."""
    layout = layout or procfs.read_memory_layout(pid)
    candidates = sorted(
        (r for r in layout.regions if r.perms.execute),
        key=lambda r: (r.kind is not procfs.RegionKind.VDSO, r.kind is procfs.RegionKind.FILE),
    )
    with procfs.ProcMem(pid) as mem:
        for region in candidates:
            if region.kind is procfs.RegionKind.VSYSCALL:
                continue
            try:
                blob = mem.read(region.start, region.end - region.start)
            except Exception:
                continue
            off = blob.find(SYSCALL_INSN)
            if off >= 0:
                return region.start + off
    raise GadgetNotFound(f"pid {pid}: no executable syscall instruction found")


@dataclass
class Injector:
    """Injects syscalls into one guest; caches the gadget address and counts calls."""

    pid: int
    gadget: int = 0
    count: int = 0
    _mem: Optional[procfs.ProcMem] = field(default=None, repr=False)
    _scratch_rip: bool = False  # fell back to overwriting bytes at rip

    def __post_init__(self):
        if not self.gadget:
            try:
                self.gadget = find_syscall_gadget(self.pid)
            except GadgetNotFound:
                self._scratch_rip = True

    def close(self) -> None:
        if self._mem is not None:
            self._mem.close()
            self._mem = None

    @property
    def mem(self) -> procfs.ProcMem:
        if self._mem is None:
            self._mem = procfs.ProcMem(self.pid)
        return self._mem

    def inject(self, tid: int, req: SyscallRequest) -> int:
        """Run one syscall in the stopped thread tid; returns the raw (signed) result."""
        saved = ptrace.getregs(tid)
        if self._scratch_rip:
            return self._inject_at_rip(tid, saved, req)
        return self._inject_at(tid, saved, req, self.gadget)

    def _inject_at(self, tid: int, saved: ptrace.UserRegs, req: SyscallRequest, at: int) -> int:
        regs = saved.copy()
        regs.rip = at
        regs.rax = req.number
        regs.orig_rax = 0xFFFFFFFFFFFFFFFF  # no syscall-restart processing mid-injection
        args = list(req.args) + [0] * (6 - len(req.args))
        regs.rdi, regs.rsi, regs.rdx, regs.r10, regs.r8, regs.r9 = (
            arg & 0xFFFFFFFFFFFFFFFF for arg in args[:6]
        )
        ptrace.setregs(tid, regs)
        deferred: list[int] = []
        try:
            for _ in range(64):
                ptrace.singlestep(tid)
                info = ptrace.wait_stop(tid)
                if not info.stopped:
                    raise ProcessGone(f"tid {tid} died during injection (status {info.status:#x})")
                if info.stop_signal == signal.SIGTRAP and not info.group_stop:
                    break
                # A pending signal tried to deliver before our instruction ran.
                # Swallow it here and re-queue it after the register file is restored.
                if not info.group_stop and info.stop_signal not in (signal.SIGTRAP, signal.SIGSTOP):
                    deferred.append(info.stop_signal)
            else:
                raise SyscallFailed(f"{req.describe()}: never reached the trap stop", retval=0)
            result = ptrace.getregs(tid).syscall_result()
        finally:
            ptrace.setregs(tid, saved)
            for sig in deferred:
                if sig != signal.SIGCHLD:  # reaped by the supervisor's own bookkeeping
                    try:
                        ptrace.tgkill(self.pid, tid, sig)
                    except OSError:
                        pass
        self.count += 1
        if req.expected is not None and not req.expected(result):
            raise SyscallFailed(
                f"{req.describe()} in tid {tid} returned {result} ({self._strerror(result)})",
                retval=result,
            )
        return result

    def _inject_at_rip(self, tid: int, saved: ptrace.UserRegs, req: SyscallRequest) -> int:
        """Last resort: temporarily overwrite one word at rip with a syscall instruction."""
        rip = saved.rip
        original = ptrace.peek_word(tid, rip)
        patched = int.from_bytes(
            SYSCALL_INSN + original.to_bytes(8, "little")[2:], "little"
        )
        ptrace.poke_word(tid, rip, patched)
        try:
            return self._inject_at(tid, saved, req, rip)
        finally:
            ptrace.poke_word(tid, rip, original)

    @staticmethod
    def _strerror(result: int) -> str:
        if -4096 < result < 0:
            return errno.errorcode.get(-result, "?") if -result in errno.errorcode else os.strerror(-result)
        return "ok"

    # Convenience wrappers for the restore-path syscalls.

    def getpid(self, tid: int) -> int:
        return self.inject(tid, SyscallRequest(NR_GETPID, (), lambda r: r > 0, "getpid"))

    def brk(self, tid: int, addr: int) -> int:
        return self.inject(tid, SyscallRequest(NR_BRK, (addr,), None, f"brk({addr:#x})"))

    def mmap_fixed(self, tid: int, addr: int, length: int, prot: int) -> int:
        return self.inject(
            tid,
            SyscallRequest(
                NR_MMAP,
                (addr, length, prot, MAP_PRIVATE | MAP_ANONYMOUS | MAP_FIXED, -1, 0),
                lambda r: r == addr,
                f"mmap_fixed({addr:#x}, {length:#x})",
            ),
        )

    def munmap(self, tid: int, addr: int, length: int) -> int:
        return self.inject(
            tid,
            SyscallRequest(
                NR_MUNMAP, (addr, length), lambda r: r == 0, f"munmap({addr:#x}, {length:#x})"
            ),
        )

    def mprotect(self, tid: int, addr: int, length: int, prot: int) -> int:
        return self.inject(
            tid,
            SyscallRequest(
                NR_MPROTECT,
                (addr, length, prot),
                lambda r: r == 0,
                f"mprotect({addr:#x}, {length:#x}, {prot})",
            ),
        )

    def madvise_dontneed(self, tid: int, addr: int, length: int) -> int:
        return self.inject(
            tid,
            SyscallRequest(
                NR_MADVISE,
                (addr, length, MADV_DONTNEED),
                lambda r: r == 0,
                f"madvise({addr:#x}, {length:#x}, DONTNEED)",
            ),
        )
