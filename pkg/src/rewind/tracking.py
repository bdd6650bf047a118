"""Track pages the guest writes between resets, and diff address-space layouts.

Two interchangeable backends:

* soft-dirty — echo 4 > /proc/<pid>/clear_refs re-arms tracking, pagemap bit 55
  reports writes. This is the default wherever the kernel supports it. (Kernels
  v5.6–v5.11 under-report soft-dirty across VMA moves; fixed in v5.12.)
* uffd-wp — userfaultfd write-protect in async mode plus the PAGEMAP_SCAN ioctl
  (kernel ≥ 6.7). Write-protect faults resolve entirely inside the kernel, so the
  cost model matches soft-dirty; the scan ioctl reports and optionally re-protects
  written ranges in one pass. The supervisor creates the guest-bound uffd by
  injecting userfaultfd(2) into the guest and stealing the descriptor with
  pidfd_getfd(2). Chosen automatically when soft-dirty is unavailable (verified
  functionally at startup, since clear_refs accepts writes even on kernels that
  ignore them).

The uffd backend cannot register regular file-backed VMAs (kernel restriction), so
private writable file mappings (ELF .data/.bss) are reported as untracked; the
restorer byte-compares those against the snapshot instead.
"""

from __future__ import annotations

import ctypes
import fcntl
import mmap
import os
import struct
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

from . import inject, procfs, ptrace
from .errors import KernelUnsupported, ProcessGone
from .procfs import PAGE_SIZE, MemoryLayout, MemoryRegion, Pagemap, RegionKind

# ---------------------------------------------------------------------------
# Dirty sets


def coalesce(ranges: Iterable[tuple[int, int]]) -> tuple[tuple[int, int], ...]:
    """Sort and maximally merge half-open ranges; drops empties."""
    merged: list[tuple[int, int]] = []
    for lo, hi in sorted(r for r in ranges if r[0] < r[1]):
        if merged and lo <= merged[-1][1]:
            merged[-1] = (merged[-1][0], max(hi, merged[-1][1]))
        else:
            merged.append((lo, hi))
    return tuple(merged)


@dataclass(frozen=True)
class DirtySet:
    """Pages written since the last tracking reset: (region, page-index ranges) entries."""

    entries: tuple[tuple[MemoryRegion, tuple[tuple[int, int], ...]], ...]
    total_pages: int

    @classmethod
    def build(
        cls, raw: Sequence[tuple[MemoryRegion, Iterable[tuple[int, int]]]]
    ) -> "DirtySet":
        entries = []
        total = 0
        for region, ranges in sorted(raw, key=lambda item: item[0].start):
            merged = coalesce(ranges)
            if not merged:
                continue
            entries.append((region, merged))
            total += sum(hi - lo for lo, hi in merged)
        return cls(entries=tuple(entries), total_pages=total)

    def __post_init__(self):
        for _region, ranges in self.entries:
            for i, (lo, hi) in enumerate(ranges):
                if lo >= hi:
                    raise ValueError(f"empty range {(lo, hi)}")
                if i and lo <= ranges[i - 1][1]:
                    raise ValueError(f"ranges not coalesced: {ranges[i-1]} then {(lo, hi)}")
        if self.total_pages != sum(
            hi - lo for _r, ranges in self.entries for lo, hi in ranges
        ):
            raise ValueError("total_pages does not match ranges")

    def addr_ranges(self) -> list[tuple[int, int]]:
        return [
            procfs.pages_to_addr(region, lo, hi)
            for region, ranges in self.entries
            for lo, hi in ranges
        ]

    def pages_in(self, start: int, end: int) -> int:
        """How many dirty pages fall inside [start, end)."""
        count = 0
        for lo, hi in self.addr_ranges():
            inter_lo, inter_hi = max(lo, start), min(hi, end)
            if inter_lo < inter_hi:
                count += (inter_hi - inter_lo) // PAGE_SIZE
        return count

    def subtract(self, addr_ranges: Sequence[tuple[int, int]]) -> "DirtySet":
        """A copy with every page inside addr_ranges dropped."""
        if not addr_ranges:
            return self
        raw = []
        for region, ranges in self.entries:
            cut = [
                pages
                for lo, hi in addr_ranges
                if (pages := procfs.overlap_pages(lo, hi, region)) is not None
            ]
            kept = subtract_ranges(list(ranges), cut)
            if kept:
                raw.append((region, kept))
        return DirtySet.build(raw)


@dataclass(frozen=True)
class ScanResult:
    dirty: DirtySet
    # absolute address ranges currently holding content (present or swapped)
    content: tuple[tuple[int, int], ...]
    # regions whose write-set this backend cannot observe; restore must byte-compare
    untracked: tuple[MemoryRegion, ...]
    pages_scanned: int


# ---------------------------------------------------------------------------
# Layout diffing


@dataclass(frozen=True)
class Span:
    start: int
    end: int
    perms: procfs.Perms

    @property
    def length(self) -> int:
        return self.end - self.start

    @property
    def page_count(self) -> int:
        return self.length // PAGE_SIZE


@dataclass(frozen=True)
class LayoutDelta:
    added: tuple[Span, ...]
    removed: tuple[Span, ...]
    resized: tuple[tuple[MemoryRegion, MemoryRegion], ...]
    reprotected: tuple[tuple[Span, procfs.Perms], ...]  # span + snapshot perms to restore
    brk_delta: int
    newly_paged: tuple[tuple[int, int], ...]

    @property
    def empty(self) -> bool:
        return not (
            self.added
            or self.removed
            or self.reprotected
            or self.brk_delta
            or self.newly_paged
        )

    @property
    def change_count(self) -> int:
        return (
            len(self.added)
            + len(self.removed)
            + len(self.reprotected)
            + (1 if self.brk_delta else 0)
        )


def _coverage(layout: MemoryLayout) -> list[tuple[int, int, procfs.Perms]]:
    """Non-kernel coverage with heap VMAs fused into one logical span ending at brk."""
    spans: list[tuple[int, int, procfs.Perms]] = []
    heap_span = layout.heap_span()
    heap_done = False
    for region in layout.regions:
        if region.kernel_owned:
            continue
        if region.kind is RegionKind.HEAP:
            if not heap_done and heap_span:
                spans.append((heap_span[0], heap_span[1], region.perms))
                heap_done = True
            continue
        spans.append((region.start, region.end, region.perms))
    spans.sort()
    return spans


def diff_layout(
    snapshot: MemoryLayout,
    current: MemoryLayout,
    snap_content: Optional[Sequence[tuple[int, int]]] = None,
    cur_content: Optional[Sequence[tuple[int, int]]] = None,
) -> LayoutDelta:
    """Minimal structural difference between two layouts of the same process.

    Regions are compared as page coverage, decomposed at the union of both layouts'
    boundaries, so merged or split VMAs with unchanged coverage produce no delta.
    Heap spans are handled exclusively through brk_delta. When both content maps are
    given, newly_paged lists address ranges holding content now but not at snapshot
    within surviving coverage.
    """
    snap_spans = _coverage(snapshot)
    cur_spans = _coverage(current)

    cuts = sorted(
        {s for span in snap_spans for s in span[:2]}
        | {s for span in cur_spans for s in span[:2]}
    )

    def lookup(spans, point):
        for lo, hi, perms in spans:
            if lo <= point < hi:
                return perms
        return None

    heap_lo = min(
        (span[0] for span in (snapshot.heap_span(), current.heap_span()) if span),
        default=None,
    )
    heap_hi = max(
        (span[1] for span in (snapshot.heap_span(), current.heap_span()) if span),
        default=None,
    )

    added_raw: list[tuple[int, int, procfs.Perms]] = []
    removed_raw: list[tuple[int, int, procfs.Perms]] = []
    reprot_raw: list[tuple[int, int, procfs.Perms]] = []
    for lo, hi in zip(cuts, cuts[1:]):
        if heap_lo is not None and lo >= heap_lo and hi <= heap_hi:
            continue  # the heap belongs to brk_delta
        snap_perms = lookup(snap_spans, lo)
        cur_perms = lookup(cur_spans, lo)
        if snap_perms is None and cur_perms is None:
            continue
        if snap_perms is None:
            added_raw.append((lo, hi, cur_perms))
        elif cur_perms is None:
            removed_raw.append((lo, hi, snap_perms))
        elif snap_perms != cur_perms:
            reprot_raw.append((lo, hi, snap_perms))

    def fuse(raw):
        fused: list[tuple[int, int, procfs.Perms]] = []
        for lo, hi, perms in raw:
            if fused and fused[-1][1] == lo and fused[-1][2] == perms:
                fused[-1] = (fused[-1][0], hi, perms)
            else:
                fused.append((lo, hi, perms))
        return fused

    added = tuple(Span(lo, hi, perms) for lo, hi, perms in fuse(added_raw))
    removed = tuple(Span(lo, hi, perms) for lo, hi, perms in fuse(removed_raw))
    reprotected = tuple(
        (Span(lo, hi, perms), perms) for lo, hi, perms in fuse(reprot_raw)
    )

    snap_by_start = {r.start: r for r in snapshot.non_kernel_regions()}
    resized = tuple(
        (snap_by_start[r.start], r)
        for r in current.non_kernel_regions()
        if r.start in snap_by_start
        and snap_by_start[r.start].end != r.end
        and r.kind is not RegionKind.HEAP
    )

    newly_paged: tuple[tuple[int, int], ...] = ()
    if snap_content is not None and cur_content is not None:
        surviving = intersect_ranges(
            [(lo, hi) for lo, hi, _p in snap_spans], [(lo, hi) for lo, hi, _p in cur_spans]
        )
        has_now = intersect_ranges(list(cur_content), surviving)
        newly = subtract_ranges(has_now, list(snap_content))
        newly_paged = tuple(newly)

    return LayoutDelta(
        added=added,
        removed=removed,
        resized=resized,
        reprotected=reprotected,
        brk_delta=current.brk - snapshot.brk,
        newly_paged=newly_paged,
    )


def intersect_ranges(a: list[tuple[int, int]], b: list[tuple[int, int]]) -> list[tuple[int, int]]:
    a, b = sorted(a), sorted(b)
    out = []
    i = j = 0
    while i < len(a) and j < len(b):
        lo = max(a[i][0], b[j][0])
        hi = min(a[i][1], b[j][1])
        if lo < hi:
            out.append((lo, hi))
        if a[i][1] < b[j][1]:
            i += 1
        else:
            j += 1
    return out


def subtract_ranges(a: list[tuple[int, int]], b: list[tuple[int, int]]) -> list[tuple[int, int]]:
    out = []
    b = sorted(b)
    for lo, hi in sorted(a):
        cur = lo
        for blo, bhi in b:
            if bhi <= cur or blo >= hi:
                continue
            if blo > cur:
                out.append((cur, min(blo, hi)))
            cur = max(cur, bhi)
            if cur >= hi:
                break
        if cur < hi:
            out.append((cur, hi))
    return out


def inverse_applies(snapshot: MemoryLayout, current: MemoryLayout, delta: LayoutDelta) -> bool:
    """Structural check: applying the delta's inverse to `current` yields `snapshot`.

    Coverage semantics: remove added spans, re-add removed spans with snapshot perms,
    revert reprotections, and rewind the heap end by brk_delta.
    """
    cur = [(lo, hi, perms) for lo, hi, perms in _coverage(current)]
    # Carve out added spans.
    for span in delta.added:
        next_cur = []
        for lo, hi, perms in cur:
            pieces = subtract_ranges([(lo, hi)], [(span.start, span.end)])
            next_cur.extend((plo, phi, perms) for plo, phi in pieces)
        cur = next_cur
    # Re-add removed spans.
    cur.extend((span.start, span.end, span.perms) for span in delta.removed)
    # Revert protections.
    for span, snap_perms in delta.reprotected:
        next_cur = []
        for lo, hi, perms in cur:
            inter = intersect_ranges([(lo, hi)], [(span.start, span.end)])
            rest = subtract_ranges([(lo, hi)], [(span.start, span.end)])
            next_cur.extend((ilo, ihi, snap_perms) for ilo, ihi in inter)
            next_cur.extend((rlo, rhi, perms) for rlo, rhi in rest)
        cur = next_cur
    # Rewind the heap.
    heap = current.heap_span()
    if heap:
        lo_h, hi_h = heap
        target_hi = hi_h - delta.brk_delta
        next_cur = []
        for lo, hi, perms in cur:
            if lo == lo_h or (lo_h <= lo < hi_h):
                hi = min(hi, target_hi) if hi >= hi_h else hi
                if target_hi > hi_h:
                    hi = target_hi
                if lo < hi:
                    next_cur.append((lo, hi, perms))
            else:
                next_cur.append((lo, hi, perms))
        cur = next_cur

    def normal(spans):
        merged = []
        for lo, hi, perms in sorted(spans):
            if merged and merged[-1][1] == lo and merged[-1][2] == perms:
                merged[-1] = (merged[-1][0], hi, perms)
            else:
                merged.append((lo, hi, perms))
        return [(lo, hi, str(perms)) for lo, hi, perms in merged]

    return normal(cur) == normal(_coverage(snapshot))


# ---------------------------------------------------------------------------
# Backend: soft-dirty


def _trackable(region: MemoryRegion) -> bool:
    if region.kernel_owned:
        return False
    if region.perms.shared:
        return False
    return True


class SoftDirtyTracker:
    """clear_refs "4" to arm, pagemap bit 55 to scan."""

    name = "soft-dirty"
    tracks_file_regions = True

    def __init__(self, pid: int):
        self.pid = pid
        self.epoch = 0
        self._pagemap = Pagemap(pid)

    def close(self) -> None:
        self._pagemap.close()

    def arm(self, layout: MemoryLayout) -> None:
        try:
            with open(f"/proc/{self.pid}/clear_refs", "w") as handle:
                handle.write("4")
        except (FileNotFoundError, ProcessLookupError) as exc:
            raise ProcessGone(f"pid {self.pid}: clear_refs unavailable") from exc
        self.epoch += 1

    def scan(self, layout: MemoryLayout) -> ScanResult:
        raw_dirty = []
        content: list[tuple[int, int]] = []
        scanned = 0
        for region in layout.regions:
            if region.kernel_owned:
                continue
            scanned += region.page_count
            records = self._pagemap.read_records(region.start, region.page_count)
            sd = procfs._mask_to_ranges(records[6::8].translate(procfs._SD_TABLE))
            have = procfs._mask_to_ranges(records[7::8].translate(procfs._CONTENT_TABLE))
            if sd and _trackable(region):
                raw_dirty.append((region, sd))
            content.extend(procfs.pages_to_addr(region, lo, hi) for lo, hi in have)
        return ScanResult(
            dirty=DirtySet.build(raw_dirty),
            content=tuple(content),
            untracked=(),
            pages_scanned=scanned,
        )

    def rearm(
        self,
        layout: MemoryLayout,
        written: Sequence[tuple[int, int]] = (),
        recreated: Sequence[tuple[int, int]] = (),
    ) -> None:
        self.arm(layout)


# ---------------------------------------------------------------------------
# Backend: uffd write-protect (async) + PAGEMAP_SCAN

O_CLOEXEC = os.O_CLOEXEC

UFFD_API = 0xAA
UFFD_FEATURE_WP_UNPOPULATED = 1 << 13
UFFD_FEATURE_WP_ASYNC = 1 << 15
UFFDIO_REGISTER_MODE_WP = 1 << 1
UFFDIO_WRITEPROTECT_MODE_WP = 1 << 0


def _ioc(direction: int, kind: int, nr: int, size: int) -> int:
    return (direction << 30) | (size << 16) | (kind << 8) | nr


_IOC_READ = 2
_IOC_WRITE = 1
UFFDIO_API_IOCTL = _ioc(3, UFFD_API, 0x3F, 24)
UFFDIO_REGISTER_IOCTL = _ioc(3, UFFD_API, 0x00, 32)
UFFDIO_UNREGISTER_IOCTL = _ioc(_IOC_READ, UFFD_API, 0x01, 16)
UFFDIO_WRITEPROTECT_IOCTL = _ioc(3, UFFD_API, 0x06, 24)

# PAGEMAP_SCAN ioctl (linux/fs.h, kernel >= 6.7); headers on older images lack it.
PAGEMAP_SCAN_IOCTL = _ioc(3, ord("f"), 16, 96)
PAGE_IS_WPALLOWED = 1 << 0
PAGE_IS_WRITTEN = 1 << 1
PAGE_IS_FILE = 1 << 2
PAGE_IS_PRESENT = 1 << 3
PAGE_IS_SWAPPED = 1 << 4
PAGE_IS_PFNZERO = 1 << 5
PAGE_IS_HUGE = 1 << 6
PM_SCAN_WP_MATCHING = 1 << 0
PM_SCAN_CHECK_WPASYNC = 1 << 1

_SCAN_VEC_ENTRIES = 8192


class UffdWpTracker:
    """Write-protect-based tracking bound to the guest's mm.

    The uffd is created *inside* the guest (injected syscall) so it binds the guest's
    address space, then pulled into the supervisor via pidfd_getfd; the guest's copy
    is closed immediately so its descriptor table stays clean.
    """

    name = "uffd-wp"
    tracks_file_regions = False

    def __init__(self, pid: int, injector: inject.Injector):
        self.pid = pid
        self.epoch = 0
        self._registered: list[tuple[int, int]] = []
        self._pagemap_fd = os.open(f"/proc/{pid}/pagemap", os.O_RDONLY)
        self._vec = ctypes.create_string_buffer(24 * _SCAN_VEC_ENTRIES)
        self._pidfd = -1
        self.ufd = -1
        remote_ufd = injector.inject(
            pid,
            inject.SyscallRequest(
                inject.NR_USERFAULTFD, (O_CLOEXEC,), lambda r: r >= 0, "userfaultfd"
            ),
        )
        try:
            self._pidfd = self._check(
                ptrace.raw_syscall(inject.NR_PIDFD_OPEN, pid, 0), "pidfd_open"
            )
            self.ufd = self._check(
                ptrace.raw_syscall(inject.NR_PIDFD_GETFD, self._pidfd, remote_ufd, 0),
                "pidfd_getfd",
            )
        finally:
            injector.inject(
                pid,
                inject.SyscallRequest(
                    inject.NR_CLOSE, (remote_ufd,), lambda r: r == 0, "close(uffd)"
                ),
            )
        api = bytearray(
            struct.pack("<QQQ", UFFD_API, UFFD_FEATURE_WP_ASYNC | UFFD_FEATURE_WP_UNPOPULATED, 0)
        )
        fcntl.ioctl(self.ufd, UFFDIO_API_IOCTL, api)
        granted = struct.unpack("<QQQ", bytes(api))[1]
        if not granted & UFFD_FEATURE_WP_ASYNC:
            raise KernelUnsupported("userfaultfd lacks async write-protect mode")

    @staticmethod
    def _check(ret: int, what: str) -> int:
        if ret < 0:
            raise KernelUnsupported(f"{what} failed: {os.strerror(-ret)}")
        return ret

    def close(self) -> None:
        for fd in (self.ufd, self._pidfd, self._pagemap_fd):
            if fd >= 0:
                try:
                    os.close(fd)
                except OSError:
                    pass
        self.ufd = self._pidfd = self._pagemap_fd = -1

    # -- registration bookkeeping

    def _register(self, start: int, end: int) -> None:
        req = bytearray(struct.pack("<QQQQ", start, end - start, UFFDIO_REGISTER_MODE_WP, 0))
        try:
            fcntl.ioctl(self.ufd, UFFDIO_REGISTER_IOCTL, req)
        except OSError as exc:
            if exc.errno != 16:  # EBUSY: already registered, fine
                raise
        self._registered = list(coalesce(self._registered + [(start, end)]))

    def _writeprotect(self, start: int, end: int) -> None:
        arg = struct.pack("<QQQ", start, end - start, UFFDIO_WRITEPROTECT_MODE_WP)
        try:
            fcntl.ioctl(self.ufd, UFFDIO_WRITEPROTECT_IOCTL, arg)
        except OSError as exc:
            if exc.errno == 22:  # EINVAL: the guest replaced this VMA; re-register
                self._register(start, end)
                fcntl.ioctl(self.ufd, UFFDIO_WRITEPROTECT_IOCTL, arg)
            else:
                raise

    def _is_registered(self, start: int, end: int) -> bool:
        for lo, hi in self._registered:
            if lo <= start and end <= hi:
                return True
        return False

    # -- tracker interface

    def arm(self, layout: MemoryLayout) -> None:
        for region in layout.regions:
            if not _trackable(region) or region.kind is RegionKind.FILE:
                continue
            self._register(region.start, region.end)
            self._writeprotect(region.start, region.end)
        self.epoch += 1

    def scan(self, layout: MemoryLayout) -> ScanResult:
        regions = [r for r in layout.regions if not r.kernel_owned]
        if not regions:
            return ScanResult(DirtySet.build([]), (), (), 0)
        written, content = self._pagemap_scan(regions[0].start, regions[-1].end)
        raw_dirty = []
        untracked = []
        scanned = 0
        for region in regions:
            scanned += region.page_count
            if not _trackable(region):
                continue
            if region.kind is RegionKind.FILE:
                if region.perms.write:
                    untracked.append(region)
                continue
            if not self._is_registered(region.start, region.end):
                # Mid-cycle guest mapping; it is either discarded wholesale at
                # restore or picked up at the next re-arm.
                continue
            page_ranges = [
                pages
                for lo, hi in written
                if (pages := procfs.overlap_pages(lo, hi, region)) is not None
            ]
            if page_ranges:
                raw_dirty.append((region, page_ranges))
        return ScanResult(
            dirty=DirtySet.build(raw_dirty),
            content=tuple(content),
            untracked=tuple(untracked),
            pages_scanned=scanned,
        )

    def rearm(
        self,
        layout: MemoryLayout,
        written: Sequence[tuple[int, int]] = (),
        recreated: Sequence[tuple[int, int]] = (),
    ) -> None:
        trackable = [
            (r.start, r.end)
            for r in layout.regions
            if _trackable(r) and r.kind is not RegionKind.FILE
        ]
        for lo, hi in intersect_ranges(list(recreated), trackable):
            self._register(lo, hi)
            self._writeprotect(lo, hi)
        for lo, hi in intersect_ranges(coalesce(written), trackable):
            self._writeprotect(lo, hi)
        self.epoch += 1

    # -- the scan ioctl

    def _pagemap_scan(
        self, start: int, end: int
    ) -> tuple[list[tuple[int, int]], list[tuple[int, int]]]:
        """One kernel walk over [start, end): returns (written ranges, content ranges).

        Write-protecting with WP_UNPOPULATED installs marker entries on pages
        that were never faulted in, and the kernel reports those markers as
        SWAPPED. A marker is never WRITTEN, while a page with real data that
        got swapped out after being dirtied keeps WRITTEN, so content here
        means PRESENT, or SWAPPED combined with WRITTEN. The residual case -- a
        page swapped out while still write-protected -- is indistinguishable
        from a marker and gets rewritten from the snapshot, which is wasteful
        but byte-identical.
        """
        interesting = PAGE_IS_WRITTEN | PAGE_IS_PRESENT | PAGE_IS_SWAPPED
        written: list[tuple[int, int]] = []
        content: list[tuple[int, int]] = []
        cursor = start
        while cursor < end:
            arg = bytearray(
                struct.pack(
                    "<QQQQQQQQQQQQ",
                    96,
                    0,
                    cursor,
                    end,
                    0,
                    ctypes.addressof(self._vec),
                    _SCAN_VEC_ENTRIES,
                    0,
                    0,
                    0,
                    interesting,
                    interesting,
                )
            )
            filled = fcntl.ioctl(self._pagemap_fd, PAGEMAP_SCAN_IOCTL, arg)
            walk_end = struct.unpack_from("<Q", bytes(arg), 32)[0]
            for i in range(filled):
                lo, hi, categories = struct.unpack_from("<QQQ", self._vec, 24 * i)
                if categories & PAGE_IS_WRITTEN:
                    written.append((lo, hi))
                if categories & PAGE_IS_PRESENT or (
                    categories & PAGE_IS_SWAPPED and categories & PAGE_IS_WRITTEN
                ):
                    content.append((lo, hi))
            if walk_end <= cursor:
                break
            cursor = walk_end
        return list(coalesce(written)), list(coalesce(content))


# ---------------------------------------------------------------------------
# Backend probes and selection


def soft_dirty_functional() -> Optional[bool]:
    """Does clear_refs "4" actually re-arm pagemap bit 55 on this kernel?

    clear_refs accepts the write even on kernels built without soft-dirty, so the
    probe must observe the bit itself: arm, touch a private page, check the bit.
    """
    arena = mmap.mmap(-1, PAGE_SIZE, flags=mmap.MAP_PRIVATE | mmap.MAP_ANONYMOUS)
    try:
        arena[0] = 1
        base = ctypes.addressof(ctypes.c_char.from_buffer(arena))
        try:
            with open("/proc/self/clear_refs", "w") as handle:
                handle.write("4")
        except OSError:
            return False
        arena[0] = 2
        with open("/proc/self/pagemap", "rb") as handle:
            handle.seek((base // PAGE_SIZE) * 8)
            (record,) = struct.unpack("<Q", handle.read(8))
        return bool(record & procfs._PM_SOFT_DIRTY)
    finally:
        arena.close()


def uffd_wp_async_functional() -> bool:
    """Can this kernel do async write-protect tracking plus PAGEMAP_SCAN?"""
    ufd = ptrace.raw_syscall(inject.NR_USERFAULTFD, O_CLOEXEC)
    if ufd < 0:
        return False
    try:
        api = bytearray(
            struct.pack("<QQQ", UFFD_API, UFFD_FEATURE_WP_ASYNC | UFFD_FEATURE_WP_UNPOPULATED, 0)
        )
        try:
            fcntl.ioctl(ufd, UFFDIO_API_IOCTL, api)
        except OSError:
            return False
        if not struct.unpack("<QQQ", bytes(api))[1] & UFFD_FEATURE_WP_ASYNC:
            return False
        # And the scan ioctl must exist.
        vec = ctypes.create_string_buffer(24)
        arena = mmap.mmap(-1, PAGE_SIZE, flags=mmap.MAP_PRIVATE | mmap.MAP_ANONYMOUS)
        try:
            arena[0] = 1
            base = ctypes.addressof(ctypes.c_char.from_buffer(arena))
            arg = bytearray(
                struct.pack(
                    "<QQQQQQQQQQQQ",
                    96, 0, base, base + PAGE_SIZE, 0,
                    ctypes.addressof(vec), 1, 0,
                    0, 0, PAGE_IS_PRESENT, PAGE_IS_PRESENT,
                )
            )
            try:
                fcntl.ioctl(os.open("/proc/self/pagemap", os.O_RDONLY), PAGEMAP_SCAN_IOCTL, arg)
            except OSError:
                return False
        finally:
            arena.close()
        return True
    finally:
        os.close(ufd)


_PROBED: dict[str, bool] = {}


def available_backends() -> dict[str, bool]:
    if not _PROBED:
        _PROBED["soft-dirty"] = bool(soft_dirty_functional())
        _PROBED["uffd-wp"] = uffd_wp_async_functional()
    return dict(_PROBED)


def make_tracker(pid: int, injector: inject.Injector):
    """Pick the dirty-tracking backend: soft-dirty when functional, else uffd-wp.

    REWIND_TRACKER=soft-dirty|uffd|auto overrides for debugging.
    """
    choice = os.environ.get("REWIND_TRACKER", "auto")
    backends = available_backends()
    if choice in ("soft-dirty", "sd"):
        if not backends["soft-dirty"]:
            raise KernelUnsupported("soft-dirty tracking requested but non-functional here")
        return SoftDirtyTracker(pid)
    if choice == "uffd":
        if not backends["uffd-wp"]:
            raise KernelUnsupported("uffd-wp tracking requested but unavailable here")
        return UffdWpTracker(pid, injector)
    if backends["soft-dirty"]:
        return SoftDirtyTracker(pid)
    if backends["uffd-wp"]:
        return UffdWpTracker(pid, injector)
    raise KernelUnsupported(
        "no dirty-tracking facility: soft-dirty bits are inert and "
        "userfaultfd async write-protect is unavailable"
    )
