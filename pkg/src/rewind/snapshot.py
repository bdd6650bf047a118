"""Capture a warm guest's full restorable state while it sits parked in read(2).

A snapshot is taken exactly once, after the guest has served its warm-up request
and gone back to blocking on stdin. It holds the address-space layout, the contents
of every captured page, every thread's register file, and the program break. The
guest must be quiesced (every thread in ptrace-stop) for the duration.

Capture policy per region:

* anonymous / heap / stack — pages that currently hold content (present or
  swapped); untouched pages are logically zero and are restored with
  MADV_DONTNEED instead of stored bytes.
* private file-backed, writable — the whole region. A page never touched by the
  guest still has file content behind it, and a later write makes it diverge, so
  partial capture could not restore it.
* private file-backed, read-only — nothing. Content cannot change without a
  protection change, which the restorer reverts.
* writable *and* shared — hard error (writes would escape the process and cannot
  be rolled back); `tolerate_shared=True` downgrades to skip-and-record.
* huge-page mappings — rejected (page-granularity tracking does not apply).
* vdso/vvar/vsyscall — kernel-owned, skipped.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Iterator, Optional, Sequence

from . import procfs, ptrace
from .errors import (
    GuestDiverged,
    OutOfMemory,
    ProcessGone,
    SharedWritableMapping,
)
from .inject import NR_READ, NR_READV, RESTART_ERRNOS
from .procfs import PAGE_SIZE, MemoryLayout, MemoryRegion, Pagemap, ProcMem, RegionKind
from .tracking import coalesce

DEFAULT_MAX_BYTES = 2 << 30


# ---------------------------------------------------------------------------
# Quiescing and parking


def quiesce(
    pid: int,
    attached: Sequence[int] = (),
    deadline_s: float = 1.0,
    pre_stopped: Optional[dict[int, ptrace.StopInfo]] = None,
) -> dict[int, ptrace.StopInfo]:
    """Bring every thread of pid into ptrace-stop; returns tid -> stop info.

    Threads not yet traced are seized first. Loops until the thread list is stable:
    a stopped thread cannot clone, so once every listed thread is stopped and the
    list re-reads identical, no new thread can appear. Threads already in
    ptrace-stop must be passed via pre_stopped (interrupting them again would
    produce no fresh stop event to wait for).
    """
    seized = set(attached) | set(pre_stopped or ())
    stops: dict[int, ptrace.StopInfo] = dict(pre_stopped or {})
    deadline = time.monotonic() + deadline_s
    while True:
        try:
            tids = procfs.list_threads(pid)
        except ProcessGone:
            raise
        for tid in tids:
            if tid in seized:
                continue
            try:
                ptrace.seize(tid)
            except ProcessGone:
                continue
            seized.add(tid)
        for tid in tids:
            if tid in stops:
                continue
            try:
                ptrace.interrupt(tid)
                stops[tid] = ptrace.wait_stop(tid)
            except ProcessGone:
                if tid == pid:
                    raise
                seized.discard(tid)
        current = set(procfs.list_threads(pid))
        if current == set(tids) and current <= set(stops):
            return {tid: stops[tid] for tid in sorted(current)}
        if time.monotonic() > deadline:
            raise GuestDiverged(
                f"pid {pid}: thread set would not settle within {deadline_s}s "
                f"(saw {sorted(current)})"
            )


def resume(stops: dict[int, ptrace.StopInfo]) -> None:
    """Continue every quiesced thread, re-injecting any pending real signal."""
    for tid, info in stops.items():
        try:
            ptrace.cont(tid, ptrace.resume_signal(info))
        except ProcessGone:
            pass


def is_parked(regs: ptrace.UserRegs) -> bool:
    """True when the register file shows a blocked stdin read interrupted mid-call.

    The kernel encodes syscall-restart state entirely in registers: orig_rax holds
    the syscall number, rax holds -ERESTARTSYS (or sibling), and rip sits after the
    syscall instruction. Continuing a thread with exactly these registers rewinds
    rip and re-enters the read — which is what makes the parked register file a
    restorable anchor. Both read(2) and readv(2) count; buffered runtimes often
    pull stdin through readv.
    """
    return (
        regs.orig_rax in (NR_READ, NR_READV)
        and regs.rdi == 0
        and regs.syscall_result() in RESTART_ERRNOS
    )


def wait_parked(
    tid: int, deadline_s: float = 5.0, settle_s: float = 0.0005
) -> tuple[ptrace.StopInfo, ptrace.UserRegs]:
    """Stop tid once it is blocked reading stdin; leaves it stopped.

    Interrupts the thread and inspects registers; if it is still chewing on
    something (or was stopped mid-transit by a pending signal), lets it run a
    little longer and retries.
    """
    deadline = time.monotonic() + deadline_s
    while True:
        info = ptrace.interrupt_and_wait(tid)
        regs = ptrace.getregs(tid)
        if is_parked(regs):
            return info, regs
        ptrace.cont(tid, ptrace.resume_signal(info))
        if time.monotonic() > deadline:
            raise GuestDiverged(
                f"tid {tid}: not parked in read(stdin) after {deadline_s}s "
                f"(orig_rax={regs.orig_rax}, rax={regs.syscall_result()}, rdi={regs.rdi})"
            )
        time.sleep(settle_s)


# ---------------------------------------------------------------------------
# Page storage


@dataclass(frozen=True)
class _RegionPages:
    region_start: int
    # page-index ranges captured, and each range's page offset into buf
    ranges: tuple[tuple[int, int], ...]
    offsets: tuple[int, ...]
    buf: bytes

    def view(self, page_lo: int, page_hi: int) -> memoryview:
        for (lo, hi), off in zip(self.ranges, self.offsets):
            if lo <= page_lo and page_hi <= hi:
                base = (off + page_lo - lo) * PAGE_SIZE
                return memoryview(self.buf)[base : base + (page_hi - page_lo) * PAGE_SIZE]
        raise KeyError(f"pages {page_lo}..{page_hi} not captured for {self.region_start:#x}")


class PageStore:
    """Captured page contents, indexed by (region start, page index range)."""

    def __init__(self):
        self._regions: dict[int, _RegionPages] = {}
        self.byte_size = 0

    def add_region(
        self, region: MemoryRegion, ranges: Sequence[tuple[int, int]], buf: bytes
    ) -> None:
        offsets = []
        total = 0
        for lo, hi in ranges:
            offsets.append(total)
            total += hi - lo
        if total * PAGE_SIZE != len(buf):
            raise ValueError(
                f"{region}: buffer holds {len(buf)} bytes for {total} pages"
            )
        self._regions[region.start] = _RegionPages(
            region.start, tuple(ranges), tuple(offsets), buf
        )
        self.byte_size += len(buf)

    def present_ranges(self, region_start: int) -> tuple[tuple[int, int], ...]:
        stored = self._regions.get(region_start)
        return stored.ranges if stored else ()

    def present_addr_ranges(self, region: MemoryRegion) -> list[tuple[int, int]]:
        return [
            procfs.pages_to_addr(region, lo, hi)
            for lo, hi in self.present_ranges(region.start)
        ]

    def view(self, region_start: int, page_lo: int, page_hi: int) -> memoryview:
        return self._regions[region_start].view(page_lo, page_hi)

    def page(self, region_start: int, page_idx: int) -> Optional[memoryview]:
        stored = self._regions.get(region_start)
        if stored is None:
            return None
        try:
            return stored.view(page_idx, page_idx + 1)
        except KeyError:
            return None

    def covered(
        self, region_start: int, page_lo: int, page_hi: int
    ) -> Iterator[tuple[int, int, memoryview]]:
        """Sub-ranges of [page_lo, page_hi) that were captured, with their bytes."""
        stored = self._regions.get(region_start)
        if stored is None:
            return
        for (lo, hi), off in zip(stored.ranges, stored.offsets):
            inter_lo, inter_hi = max(lo, page_lo), min(hi, page_hi)
            if inter_lo >= inter_hi:
                continue
            base = (off + inter_lo - lo) * PAGE_SIZE
            yield inter_lo, inter_hi, memoryview(stored.buf)[
                base : base + (inter_hi - inter_lo) * PAGE_SIZE
            ]

    def region_starts(self) -> list[int]:
        return sorted(self._regions)


# ---------------------------------------------------------------------------
# The snapshot itself


@dataclass(frozen=True)
class Snapshot:
    layout: MemoryLayout
    pages: PageStore
    threads: tuple[ptrace.ThreadRegisters, ...]
    brk: int
    fds: dict[int, str]
    captured_at: float
    capture_duration_ms: float
    skipped_shared: tuple[MemoryRegion, ...] = ()
    # brk as the kernel reports it (brk(0) query), which can differ from the
    # heap VMA end by a sub-page amount; this is the address restore targets.
    true_brk: int = 0
    # Page-aligned address ranges the kernel itself rewrites while the guest
    # runs (per-thread restartable-sequences areas). Writes landing here are
    # not guest state: trackers must ignore them and repair must not touch
    # them, exactly like [vvar] or [vdso].
    kernel_scratch: tuple[tuple[int, int], ...] = ()

    @property
    def pid(self) -> int:
        return self.layout.pid

    @property
    def byte_size(self) -> int:
        return self.pages.byte_size

    @property
    def tids(self) -> tuple[int, ...]:
        return tuple(t.tid for t in self.threads)

    def main_regs(self) -> ptrace.UserRegs:
        return self.threads[0].regs()

    def restartable_tids(self) -> tuple[int, ...]:
        """Threads whose registers show an interrupted restartable syscall.

        These stop states are safe anchors: the kernel re-enters the call on
        resume. Recorded rather than interpreted further.
        """
        out = []
        for thread in self.threads:
            if thread.regs().syscall_result() in RESTART_ERRNOS:
                out.append(thread.tid)
        return tuple(out)


def _capture_plan(region: MemoryRegion, pagemap: Pagemap) -> list[tuple[int, int]]:
    """Page-index ranges to capture for one region, per the module's policy."""
    if region.kind is RegionKind.FILE:
        if not region.perms.write:
            return []
        return [(0, region.page_count)]
    return pagemap.content_ranges(region.start, region.end)


def take_snapshot(
    pid: int,
    layout: Optional[MemoryLayout] = None,
    max_bytes: int = DEFAULT_MAX_BYTES,
    tolerate_shared: bool = False,
    true_brk: int = 0,
) -> Snapshot:
    """Capture layout, pages, registers, and brk of a fully stopped guest."""
    began = time.monotonic()
    if layout is None:
        layout = procfs.read_memory_layout(pid)

    huge = procfs.hugepage_regions(pid)
    if huge:
        spans = ", ".join(f"{lo:#x}-{hi:#x}" for lo, hi in huge)
        raise SharedWritableMapping(
            f"pid {pid}: huge-page mappings cannot be tracked at page granularity: {spans}"
        )

    skipped: list[MemoryRegion] = []
    for region in layout.non_kernel_regions():
        if region.perms.shared and region.perms.write:
            if not tolerate_shared:
                raise SharedWritableMapping(
                    f"pid {pid}: writable shared mapping cannot be rolled back: {region}"
                )
            skipped.append(region)

    store = PageStore()
    with Pagemap(pid) as pagemap, ProcMem(pid) as mem:
        for region in layout.non_kernel_regions():
            if region.perms.shared:
                continue
            ranges = _capture_plan(region, pagemap)
            if not ranges:
                continue
            chunks = []
            for lo, hi in ranges:
                start, end = procfs.pages_to_addr(region, lo, hi)
                chunks.append(mem.read(start, end - start))
            buf = b"".join(chunks)
            if store.byte_size + len(buf) > max_bytes:
                raise OutOfMemory(
                    f"pid {pid}: snapshot exceeds {max_bytes} bytes at {region}"
                )
            store.add_region(region, ranges, buf)

    tids = procfs.list_threads(pid)
    threads = tuple(ptrace.capture_thread_registers(tid) for tid in tids)
    scratch = []
    for tid in tids:
        area = ptrace.get_rseq_area(tid)
        if area is not None:
            addr, size = area
            lo = addr & ~(PAGE_SIZE - 1)
            hi = (addr + size + PAGE_SIZE - 1) & ~(PAGE_SIZE - 1)
            scratch.append((lo, hi))
    snapshot = Snapshot(
        layout=layout,
        pages=store,
        threads=threads,
        brk=layout.brk,
        fds=procfs.list_fds(pid),
        captured_at=time.time(),
        capture_duration_ms=(time.monotonic() - began) * 1e3,
        skipped_shared=tuple(skipped),
        true_brk=true_brk or layout.brk,
        kernel_scratch=tuple(coalesce(scratch)),
    )
    if not is_parked(snapshot.main_regs()):
        raise GuestDiverged(
            f"pid {pid}: main thread not parked in read(stdin) at capture time"
        )
    return snapshot
