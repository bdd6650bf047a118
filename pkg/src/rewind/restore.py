"""Return a stopped guest to its snapshot, with a per-step timing breakdown.

One restore cycle, in execution order:

1.  interrupt every guest thread (quiesce) and verify the thread set is unchanged
2.  read the current memory layout
3.  scan the dirty tracker
4.  diff current layout against snapshot layout
5.  restore brk (injected brk)
6.  unmap regions the guest added (injected munmap)
7.  re-map regions the guest removed, anonymous/private at snapshot permissions
    (injected mmap); revert protection changes (injected mprotect)
8.  zero stack pages that are dirty or newly present (injected madvise;
    --zero-full-stack widens this to the whole stack region)
9.  rewrite captured bytes of every dirty page in a surviving snapshot region,
    coalescing adjacent pages into single transfers; byte-compare-and-repair
    regions the tracker cannot observe
10. restore every thread's registers
11. give back pages present now but absent at snapshot (injected madvise)
12. re-arm the dirty tracker
13. resume all threads

The report buckets carry fixed names; field order in the report (and the CSV)
follows the reporting convention, not the execution order above. "detaching"
times the release of the guest back into its read loop — the tracer itself stays
attached across cycles. Signals caught mid-request belong to the discarded
timeline, so a full restore resumes threads without re-delivering them.

The resumed guest's main thread sits in a restarted read(2) on stdin: its restored
registers encode the blocked-syscall state, so the kernel re-enters the read no
matter where the thread actually was when interrupted.
"""

from __future__ import annotations

import bisect
import time
from contextlib import contextmanager
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

from . import procfs, ptrace
from .errors import (
    GuestDiverged,
    PartialTransfer,
    ProcessGone,
    SyscallFailed,
)
from .inject import Injector
from .procfs import PAGE_SIZE, MemoryLayout, MemoryRegion, ProcMem, RegionKind
from .snapshot import Snapshot, quiesce, resume
from .tracking import (
    DirtySet,
    LayoutDelta,
    ScanResult,
    coalesce,
    diff_layout,
    intersect_ranges,
    subtract_ranges,
)

REPORT_STEPS = (
    "interrupting",
    "reading_maps",
    "scanning_pages",
    "diffing_layout",
    "syscall_brk",
    "syscall_mmap",
    "syscall_munmap",
    "syscall_madvise",
    "syscall_mprotect",
    "restoring_page_contents",
    "restoring_registers",
    "clearing_soft_dirty",
    "detaching",
)

# report step name -> CSV column, in CSV column order
CSV_STEP_COLUMNS = (
    ("interrupting", "restore_interrupt_us"),
    ("reading_maps", "restore_read_maps_us"),
    ("scanning_pages", "restore_scan_us"),
    ("diffing_layout", "restore_diff_us"),
    ("syscall_brk", "restore_brk_us"),
    ("syscall_mmap", "restore_mmap_us"),
    ("syscall_munmap", "restore_munmap_us"),
    ("syscall_madvise", "restore_madvise_us"),
    ("syscall_mprotect", "restore_mprotect_us"),
    ("restoring_page_contents", "restore_pages_us"),
    ("restoring_registers", "restore_regs_us"),
    ("clearing_soft_dirty", "restore_sd_clear_us"),
    ("detaching", "restore_detach_us"),
)


@dataclass
class RestoreReport:
    steps: dict[str, float]
    total_us: float
    pages_scanned: int
    pages_restored: int
    syscalls_injected: int
    layout_changes: int
    pages_zeroed: int = 0
    dirty: Optional[DirtySet] = field(default=None, repr=False)
    delta: Optional[LayoutDelta] = field(default=None, repr=False)

    def __post_init__(self):
        missing = [s for s in REPORT_STEPS if s not in self.steps]
        if missing:
            raise ValueError(f"report missing steps {missing}")
        bad = [s for s, v in self.steps.items() if v < 0]
        if bad:
            raise ValueError(f"negative step durations: {bad}")

    def step_sum(self) -> float:
        return sum(self.steps.values())

    def consistent(self, tolerance: float = 0.05) -> bool:
        if self.total_us <= 0:
            return False
        return abs(self.step_sum() - self.total_us) <= tolerance * self.total_us

    def csv_values(self) -> list:
        values = [round(self.total_us, 1)]
        values.extend(round(self.steps[name], 1) for name, _col in CSV_STEP_COLUMNS)
        values.extend([self.pages_scanned, self.pages_restored, self.syscalls_injected])
        return values

    def as_dict(self) -> dict:
        out = {"restore_total_us": round(self.total_us, 1)}
        for name, col in CSV_STEP_COLUMNS:
            out[col] = round(self.steps[name], 1)
        out.update(
            pages_scanned=self.pages_scanned,
            pages_restored=self.pages_restored,
            syscalls_injected=self.syscalls_injected,
            layout_changes=self.layout_changes,
        )
        return out


class _StepClock:
    """Per-step duration accumulator partitioning the cycle.

    Wall time between two steps (range bookkeeping, branch checks) is charged
    to the earlier step, and time from cycle start to the first step is charged
    to that first step, so the buckets cover [cycle start, last step exit] with
    no gaps and their sum stays honest even when the scheduler preempts the
    supervisor between steps.
    """

    def __init__(self, cycle_began_ns: int):
        self.steps = {name: 0.0 for name in REPORT_STEPS}
        self._last_exit: int = cycle_began_ns
        self._last_name: Optional[str] = None

    @property
    def last_exit_ns(self) -> int:
        return self._last_exit

    @contextmanager
    def step(self, name: str):
        entered = time.perf_counter_ns()
        if self._last_name is not None:
            self.steps[self._last_name] += (entered - self._last_exit) / 1e3
            began = entered
        else:
            began = self._last_exit  # stretch the first step back to cycle start
        try:
            yield
        finally:
            ended = time.perf_counter_ns()
            self.steps[name] += (ended - began) / 1e3
            self._last_exit = ended
            self._last_name = name


class Restorer:
    """Drives restore cycles for one guest against one snapshot.

    `attached` is the live set of tids currently under trace; quiesce updates it.
    `madvise_before_registers` flips steps 10/11 for order-equivalence testing.
    """

    def __init__(
        self,
        snapshot: Snapshot,
        injector: Injector,
        tracker,
        attached: set[int],
        zero_full_stack: bool = False,
        madvise_before_registers: bool = False,
    ):
        self.snapshot = snapshot
        self.injector = injector
        self.tracker = tracker
        self.attached = attached
        self.zero_full_stack = zero_full_stack
        self.madvise_before_registers = madvise_before_registers
        self.mem = ProcMem(snapshot.pid)
        self.cycles = 0
        # snapshot regions eligible for content writes, indexed for range lookup
        self._snap_regions = [
            r
            for r in snapshot.layout.non_kernel_regions()
            if not (r.perms.shared and r.perms.write)
        ]
        self._snap_starts = [r.start for r in self._snap_regions]
        self._compare_regions = [
            r
            for r in self._snap_regions
            if r.kind is RegionKind.FILE and r.perms.write and not r.perms.shared
        ] if not tracker.tracks_file_regions else []

    def close(self) -> None:
        self.mem.close()

    # -- helpers

    def _snap_overlaps(self, lo: int, hi: int):
        idx = bisect.bisect_right(self._snap_starts, lo) - 1
        if idx < 0:
            idx = 0
        for region in self._snap_regions[idx:]:
            if region.start >= hi:
                break
            if region.end > lo:
                yield region

    def _write_back(self, lo: int, hi: int, sink: list[tuple[int, int]]) -> int:
        """Rewrite captured snapshot bytes within [lo, hi); returns pages written."""
        pages = 0
        for region in self._snap_overlaps(lo, hi):
            clip_lo, clip_hi = max(lo, region.start), min(hi, region.end)
            page_lo = (clip_lo - region.start) // PAGE_SIZE
            page_hi = (clip_hi - region.start) // PAGE_SIZE
            for sub_lo, sub_hi, view in self.snapshot.pages.covered(
                region.start, page_lo, page_hi
            ):
                addr = region.start + sub_lo * PAGE_SIZE
                self.mem.write(addr, view)
                pages += sub_hi - sub_lo
                sink.append((addr, addr + (sub_hi - sub_lo) * PAGE_SIZE))
        return pages

    def _compare_restore(self, region: MemoryRegion, sink: list[tuple[int, int]]) -> int:
        """Byte-compare an untracked region against its full capture; repair diffs."""
        store = self.snapshot.pages
        if not store.present_ranges(region.start):
            return 0
        snap_view = store.view(region.start, 0, region.page_count)
        current = self.mem.read(region.start, region.end - region.start)
        if current == snap_view:
            return 0
        dirty_pages = [
            i
            for i in range(region.page_count)
            if current[i * PAGE_SIZE : (i + 1) * PAGE_SIZE]
            != snap_view[i * PAGE_SIZE : (i + 1) * PAGE_SIZE]
        ]
        pages = 0
        for lo, hi in coalesce((i, i + 1) for i in dirty_pages):
            addr = region.start + lo * PAGE_SIZE
            self.mem.write(addr, snap_view[lo * PAGE_SIZE : hi * PAGE_SIZE])
            pages += hi - lo
            sink.append((addr, region.start + hi * PAGE_SIZE))
        return pages

    def _anon_spans(self, layout: MemoryLayout) -> list[tuple[int, int]]:
        return [
            (r.start, r.end)
            for r in layout.non_kernel_regions()
            if r.kind is not RegionKind.FILE and not r.perms.shared
        ]

    def _snap_anon_content(self) -> list[tuple[int, int]]:
        out = []
        for region in self._snap_regions:
            if region.kind is RegionKind.FILE:
                continue
            out.extend(self.snapshot.pages.present_addr_ranges(region))
        return out

    # -- the cycle

    def restore(self, skip_repair: bool = False) -> RestoreReport:
        """One full restore cycle (or scan-only when skip_repair).

        skip_repair gives the track-but-never-roll-back variant: detection runs
        and is reported, the guest is left exactly as it was, and pending signals
        are re-delivered because its timeline continues.
        """
        began = time.perf_counter_ns()
        clock = _StepClock(began)
        injected_before = self.injector.count
        snapshot = self.snapshot
        pid = snapshot.pid

        with clock.step("interrupting"):
            stops = quiesce(pid, attached=tuple(self.attached))
            self.attached.clear()
            self.attached.update(stops)

        try:
            with clock.step("reading_maps"):
                layout = procfs.read_memory_layout(pid)
            with clock.step("scanning_pages"):
                scan = self.tracker.scan(layout)
                if snapshot.kernel_scratch:
                    # pages the kernel rewrites on its own (rseq areas) are
                    # not guest writes; drop them before diffing and repair
                    scan = replace(
                        scan, dirty=scan.dirty.subtract(snapshot.kernel_scratch)
                    )
            with clock.step("diffing_layout"):
                snap_anon_content = self._snap_anon_content()
                cur_anon_content = intersect_ranges(
                    list(scan.content), self._anon_spans(layout)
                )
                delta = diff_layout(
                    snapshot.layout,
                    layout,
                    snap_content=snap_anon_content,
                    cur_content=cur_anon_content,
                )

            if skip_repair:
                report = RestoreReport(
                    steps=clock.steps,
                    total_us=0.0,
                    pages_scanned=scan.pages_scanned,
                    pages_restored=0,
                    syscalls_injected=self.injector.count - injected_before,
                    layout_changes=delta.change_count,
                    dirty=scan.dirty,
                    delta=delta,
                )
                with clock.step("detaching"):
                    resume(stops)
                report.total_us = (clock.last_exit_ns - began) / 1e3
                self.cycles += 1
                return report

            if set(stops) != set(snapshot.tids):
                raise GuestDiverged(
                    f"pid {pid}: thread set changed since snapshot "
                    f"({sorted(stops)} vs {sorted(snapshot.tids)}); cannot roll back"
                )

            report = self._repair(clock, began, injected_before, layout, scan, delta, stops)
        except (SyscallFailed, PartialTransfer) as exc:
            raise GuestDiverged(f"pid {pid}: restore failed mid-way: {exc}") from exc
        except GuestDiverged:
            raise
        except ProcessGone as exc:
            raise GuestDiverged(f"pid {pid}: guest died during restore: {exc}") from exc
        self.cycles += 1
        return report

    def _repair(
        self,
        clock: _StepClock,
        began: int,
        injected_before: int,
        layout: MemoryLayout,
        scan: ScanResult,
        delta: LayoutDelta,
        stops: dict[int, ptrace.StopInfo],
    ) -> RestoreReport:
        snapshot = self.snapshot
        main_tid = snapshot.tids[0]
        dirty_addrs = scan.dirty.addr_ranges()

        with clock.step("syscall_brk"):
            if delta.brk_delta != 0:
                got = self.injector.brk(main_tid, snapshot.true_brk)
                if got != snapshot.true_brk:
                    raise GuestDiverged(
                        f"brk restore wanted {snapshot.true_brk:#x}, kernel says {got:#x}"
                    )

        with clock.step("syscall_munmap"):
            for span in delta.added:
                self.injector.munmap(main_tid, span.start, span.length)

        recreated: list[tuple[int, int]] = []
        with clock.step("syscall_mmap"):
            for span in delta.removed:
                self.injector.mmap_fixed(
                    main_tid, span.start, span.length, span.perms.prot()
                )
                recreated.append((span.start, span.end))

        with clock.step("syscall_mprotect"):
            for span, perms in delta.reprotected:
                self.injector.mprotect(main_tid, span.start, span.length, perms.prot())

        # Heap pages beyond a shrunken brk come back zero after the brk restore
        # above; captured bytes there must be rewritten.
        snap_heap = snapshot.layout.heap_span()
        cur_heap = layout.heap_span()
        if snap_heap and delta.brk_delta < 0:
            regrown_lo = cur_heap[1] if cur_heap else snap_heap[0]
            if regrown_lo < snap_heap[1]:
                recreated.append((regrown_lo, snap_heap[1]))

        stack = snapshot.layout.stack_region()
        stack_span = (stack.start, stack.end) if stack else None
        zeroed: list[tuple[int, int]] = []
        if stack_span:
            if self.zero_full_stack:
                zeroed = [stack_span]
            else:
                zeroed = intersect_ranges(
                    coalesce(dirty_addrs + list(delta.newly_paged)), [stack_span]
                )
        pages_zeroed = 0
        with clock.step("syscall_madvise"):
            for lo, hi in zeroed:
                self.injector.madvise_dontneed(main_tid, lo, hi - lo)
                pages_zeroed += (hi - lo) // PAGE_SIZE

        pages_restored = 0
        written: list[tuple[int, int]] = []
        with clock.step("restoring_page_contents"):
            if self.zero_full_stack and stack_span:
                # the whole stack was just dropped; bring back all captured bytes
                recreated.append(stack_span)
            skip = [stack_span] if (self.zero_full_stack and stack_span) else []
            for lo, hi in dirty_addrs:
                for sub_lo, sub_hi in subtract_ranges([(lo, hi)], skip):
                    pages_restored += self._write_back(sub_lo, sub_hi, written)
            for lo, hi in recreated:
                pages_restored += self._write_back(lo, hi, written)
            # content the snapshot had but the guest gave back (e.g. advice-freed):
            lost = subtract_ranges(self._snap_anon_content(), list(scan.content))
            lost = intersect_ranges(lost, self._anon_spans(layout))
            for lo, hi in subtract_ranges(lost, skip + recreated):
                pages_restored += self._write_back(lo, hi, written)
            for region in self._compare_regions:
                pages_restored += self._compare_restore(region, written)

        def restore_registers():
            with clock.step("restoring_registers"):
                for thread in snapshot.threads:
                    ptrace.set_thread_registers(thread.tid, thread)

        def madvise_newly_paged():
            nonlocal pages_zeroed
            with clock.step("syscall_madvise"):
                for lo, hi in subtract_ranges(list(delta.newly_paged), zeroed):
                    self.injector.madvise_dontneed(main_tid, lo, hi - lo)
                    pages_zeroed += (hi - lo) // PAGE_SIZE

        if self.madvise_before_registers:
            madvise_newly_paged()
            restore_registers()
        else:
            restore_registers()
            madvise_newly_paged()

        with clock.step("clearing_soft_dirty"):
            rearm_written = coalesce(
                dirty_addrs + written + zeroed + list(delta.newly_paged)
            )
            self.tracker.rearm(
                snapshot.layout, written=rearm_written, recreated=coalesce(recreated)
            )

        with clock.step("detaching"):
            for tid in stops:
                try:
                    ptrace.cont(tid, 0)
                except ProcessGone:
                    raise

        return RestoreReport(
            steps=clock.steps,
            total_us=(clock.last_exit_ns - began) / 1e3,
            pages_scanned=scan.pages_scanned,
            pages_restored=pages_restored,
            syscalls_injected=self.injector.count - injected_before,
            layout_changes=delta.change_count,
            pages_zeroed=pages_zeroed,
            dirty=scan.dirty,
            delta=delta,
        )
