"""Guest address-space facts from /proc: layout, per-page flags, bulk memory I/O, threads, fds.

Everything here works on a stopped (or at least quiescent) process and reads the
kernel's own bookkeeping; higher layers never guess at guest state.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Iterator, Optional

from . import ptrace
from .errors import ParseError, PartialTransfer, ProcessGone, ShortRead

PAGE_SIZE = os.sysconf("SC_PAGE_SIZE")

# One pagemap record is 8 bytes; read them in big batches to amortize syscalls.
PAGEMAP_BATCH_PAGES = 64 * 1024

_PM_PRESENT = 1 << 63
_PM_SWAPPED = 1 << 62
_PM_SOFT_DIRTY = 1 << 55

# pagemap record high byte (byte 7): bit 63 present, bit 62 swapped.
_CONTENT_TABLE = bytes(1 if (i & 0xC0) else 0 for i in range(256))
# byte 6 carries bits 48..55; soft-dirty is bit 55, the top bit.
_SD_TABLE = bytes(1 if (i & 0x80) else 0 for i in range(256))


class RegionKind(Enum):
    ANONYMOUS = "anonymous"
    FILE = "file"
    HEAP = "heap"
    STACK = "stack"
    VDSO = "vdso"
    VVAR = "vvar"
    VSYSCALL = "vsyscall"


_KERNEL_KINDS = frozenset({RegionKind.VDSO, RegionKind.VVAR, RegionKind.VSYSCALL})


@dataclass(frozen=True)
class Perms:
    read: bool
    write: bool
    execute: bool
    shared: bool

    @classmethod
    def parse(cls, text: str) -> "Perms":
        if len(text) != 4:
            raise ParseError(f"bad perms field {text!r}")
        return cls(text[0] == "r", text[1] == "w", text[2] == "x", text[3] == "s")

    def __str__(self) -> str:
        return (
            ("r" if self.read else "-")
            + ("w" if self.write else "-")
            + ("x" if self.execute else "-")
            + ("s" if self.shared else "p")
        )

    def prot(self) -> int:
        """PROT_* bits for mmap/mprotect injection."""
        return (1 if self.read else 0) | (2 if self.write else 0) | (4 if self.execute else 0)


@dataclass(frozen=True)
class MemoryRegion:
    start: int
    end: int
    perms: Perms
    kind: RegionKind
    path: Optional[str] = None
    offset: int = 0

    def __post_init__(self):
        if not (self.start < self.end):
            raise ParseError(f"region start {self.start:#x} !< end {self.end:#x}")
        if self.start % PAGE_SIZE or self.end % PAGE_SIZE:
            raise ParseError(f"region {self.start:#x}-{self.end:#x} not page aligned")

    @property
    def page_count(self) -> int:
        return (self.end - self.start) // PAGE_SIZE

    @property
    def kernel_owned(self) -> bool:
        return self.kind in _KERNEL_KINDS

    def contains(self, addr: int) -> bool:
        return self.start <= addr < self.end

    def __str__(self) -> str:
        tag = self.path or self.kind.value
        return f"{self.start:#x}-{self.end:#x} {self.perms} {tag}"


def _kind_for(path: str, perms: Perms) -> RegionKind:
    if path == "[heap]":
        return RegionKind.HEAP
    if path == "[stack]":
        return RegionKind.STACK
    if path == "[vdso]":
        return RegionKind.VDSO
    if path.startswith("[vvar"):
        return RegionKind.VVAR
    if path == "[vsyscall]":
        return RegionKind.VSYSCALL
    if not path or path.startswith("[anon"):
        return RegionKind.ANONYMOUS
    if path.startswith("["):
        return RegionKind.ANONYMOUS
    return RegionKind.FILE


@dataclass(frozen=True)
class MemoryLayout:
    regions: tuple[MemoryRegion, ...]
    brk: int
    pid: int

    def __post_init__(self):
        prev_end = 0
        for region in self.regions:
            if region.start < prev_end:
                raise ParseError(
                    f"regions overlap or are unsorted near {region.start:#x} (prev end {prev_end:#x})"
                )
            prev_end = region.end

    def heap_regions(self) -> list[MemoryRegion]:
        return [r for r in self.regions if r.kind is RegionKind.HEAP]

    def heap_span(self) -> Optional[tuple[int, int]]:
        heaps = self.heap_regions()
        if not heaps:
            return None
        return heaps[0].start, heaps[-1].end

    def stack_region(self) -> Optional[MemoryRegion]:
        for region in self.regions:
            if region.kind is RegionKind.STACK:
                return region
        return None

    def region_at(self, addr: int) -> Optional[MemoryRegion]:
        for region in self.regions:
            if region.contains(addr):
                return region
        return None

    def non_kernel_regions(self) -> list[MemoryRegion]:
        return [r for r in self.regions if not r.kernel_owned]

    def normalized(self) -> tuple[tuple[int, int, str, str, object], ...]:
        """Coverage map for equality checks, independent of VMA split points.

        Adjacent regions merge when permissions, kind class, and file backing are
        continuous. All heap-tagged regions collapse into one logical heap (the VMA
        may be split while brk-tracking contexts differ), and kernel-owned regions
        are excluded (they are never captured or restored).
        """
        segments: list[tuple[int, int, str, str, object]] = []
        for region in self.regions:
            if region.kernel_owned:
                continue
            if region.kind is RegionKind.FILE:
                kind_class = "file"
                backing: object = (region.path, region.offset - region.start)
            elif region.kind is RegionKind.HEAP:
                kind_class = "heap"
                backing = None
            elif region.kind is RegionKind.STACK:
                kind_class = "stack"
                backing = None
            else:
                kind_class = "anon"
                backing = region.path
            perms = str(region.perms)
            if segments:
                ps, pe, pperms, pkind, pback = segments[-1]
                if pe == region.start and pperms == perms and pkind == kind_class and pback == backing:
                    segments[-1] = (ps, region.end, perms, kind_class, backing)
                    continue
            segments.append((region.start, region.end, perms, kind_class, backing))
        return tuple(segments)


@dataclass(frozen=True)
class PageFlags:
    present: bool
    soft_dirty: bool
    swapped: bool

    def __post_init__(self):
        if self.present and self.swapped:
            raise ParseError("a page cannot be both present and swapped")

    @property
    def has_content(self) -> bool:
        return self.present or self.swapped


def _proc_path(pid: int, name: str) -> str:
    return f"/proc/{pid}/{name}"


def _read_proc(pid: int, name: str) -> str:
    try:
        with open(_proc_path(pid, name), "r") as handle:
            return handle.read()
    except (FileNotFoundError, ProcessLookupError) as exc:
        raise ProcessGone(f"pid {pid}: /proc/{pid}/{name} unavailable") from exc


def parse_maps_line(line: str) -> MemoryRegion:
    parts = line.split(maxsplit=5)
    if len(parts) < 5:
        raise ParseError(f"malformed maps line: {line!r}")
    span, perms_text, offset_text, _dev, _inode = parts[:5]
    path = parts[5].rstrip("\n") if len(parts) == 6 else ""
    try:
        start_text, end_text = span.split("-")
        start, end = int(start_text, 16), int(end_text, 16)
        offset = int(offset_text, 16)
    except ValueError as exc:
        raise ParseError(f"malformed maps line: {line!r}") from exc
    perms = Perms.parse(perms_text)
    kind = _kind_for(path, perms)
    return MemoryRegion(
        start=start,
        end=end,
        perms=perms,
        kind=kind,
        path=path or None,
        offset=offset if kind is RegionKind.FILE else 0,
    )


def read_memory_layout(pid: int) -> MemoryLayout:
    """All mapped regions of the process, sorted and disjoint, plus the brk estimate.

    The brk is taken as the end of the heap tag in maps; the restorer verifies it
    against an injected brk(0) on the first restore cycle.
    """
    text = _read_proc(pid, "maps")
    regions = tuple(parse_maps_line(line) for line in text.splitlines() if line)
    layout = MemoryLayout(regions=regions, brk=0, pid=pid)
    span = layout.heap_span()
    brk = span[1] if span else 0
    return MemoryLayout(regions=regions, brk=brk, pid=pid)


class Pagemap:
    """Cached-fd reader of /proc/<pid>/pagemap."""

    def __init__(self, pid: int):
        self.pid = pid
        try:
            self.fd = os.open(_proc_path(pid, "pagemap"), os.O_RDONLY)
        except (FileNotFoundError, ProcessLookupError) as exc:
            raise ProcessGone(f"pid {pid}: pagemap unavailable") from exc

    def close(self) -> None:
        if self.fd >= 0:
            os.close(self.fd)
            self.fd = -1

    def __enter__(self) -> "Pagemap":
        return self

    def __exit__(self, *_exc) -> None:
        self.close()

    def read_records(self, start_addr: int, n_pages: int) -> bytes:
        """Raw 8-byte records for n_pages starting at start_addr."""
        chunks = []
        first_page = start_addr // PAGE_SIZE
        remaining = n_pages
        page = first_page
        while remaining > 0:
            batch = min(remaining, PAGEMAP_BATCH_PAGES)
            try:
                data = os.pread(self.fd, batch * 8, page * 8)
            except ProcessLookupError as exc:
                raise ProcessGone(f"pid {self.pid} vanished during pagemap read") from exc
            if len(data) < batch * 8:
                raise ShortRead(
                    f"pagemap returned {len(data)} bytes for {batch} pages at page {page:#x}"
                )
            chunks.append(data)
            page += batch
            remaining -= batch
        return b"".join(chunks)

    def flags(self, region: MemoryRegion) -> list[PageFlags]:
        data = self.read_records(region.start, region.page_count)
        flags = []
        for (record,) in struct.iter_unpack("<Q", data):
            flags.append(
                PageFlags(
                    present=bool(record & _PM_PRESENT),
                    soft_dirty=bool(record & _PM_SOFT_DIRTY),
                    swapped=bool(record & _PM_SWAPPED),
                )
            )
        return flags

    def content_ranges(self, start: int, end: int) -> list[tuple[int, int]]:
        """Half-open page-index ranges (relative to start) that hold content (present or swapped)."""
        n_pages = (end - start) // PAGE_SIZE
        data = self.read_records(start, n_pages)
        return _mask_to_ranges(data[7::8].translate(_CONTENT_TABLE))

    def soft_dirty_ranges(self, start: int, end: int) -> list[tuple[int, int]]:
        n_pages = (end - start) // PAGE_SIZE
        data = self.read_records(start, n_pages)
        return _mask_to_ranges(data[6::8].translate(_SD_TABLE))


def _mask_to_ranges(mask: bytes) -> list[tuple[int, int]]:
    """Turn a 0/1 byte mask into maximally coalesced half-open index ranges."""
    ranges: list[tuple[int, int]] = []
    pos = 0
    n = len(mask)
    while pos < n:
        lo = mask.find(b"\x01", pos)
        if lo < 0:
            break
        hi = mask.find(b"\x00", lo + 1)
        if hi < 0:
            hi = n
        ranges.append((lo, hi))
        pos = hi + 1
    return ranges


def read_page_flags(pid: int, region: MemoryRegion) -> list[PageFlags]:
    with Pagemap(pid) as pagemap:
        return pagemap.flags(region)


class ProcMem:
    """Bulk memory I/O on /proc/<pid>/mem with a cached descriptor.

    Writes go through the kernel's forced-access path, so read-only private pages
    can be rewritten during restore without flipping protections (requires
    appropriate privilege over the guest). When the bulk path fails, callers can
    fall back to word-at-a-time ptrace transfers via read_slow/write_slow.
    """

    def __init__(self, pid: int):
        self.pid = pid
        try:
            self.fd = os.open(_proc_path(pid, "mem"), os.O_RDWR)
        except (FileNotFoundError, ProcessLookupError) as exc:
            raise ProcessGone(f"pid {pid}: mem unavailable") from exc

    def close(self) -> None:
        if self.fd >= 0:
            os.close(self.fd)
            self.fd = -1

    def __enter__(self) -> "ProcMem":
        return self

    def __exit__(self, *_exc) -> None:
        self.close()

    def read(self, start: int, length: int) -> bytes:
        got = bytearray()
        while len(got) < length:
            want = length - len(got)
            try:
                chunk = os.pread(self.fd, want, start + len(got))
            except ProcessLookupError as exc:
                raise ProcessGone(f"pid {self.pid} vanished during read") from exc
            except OSError:
                raise PartialTransfer(
                    f"read hit a hole at {start + len(got):#x}", offset=len(got)
                ) from None
            if not chunk:
                raise PartialTransfer(f"read hit a hole at {start + len(got):#x}", offset=len(got))
            got.extend(chunk)
        return bytes(got)

    def write(self, start: int, data: bytes) -> None:
        view = memoryview(data)
        done = 0
        while done < len(view):
            try:
                wrote = os.pwrite(self.fd, view[done:], start + done)
            except ProcessLookupError as exc:
                raise ProcessGone(f"pid {self.pid} vanished during write") from exc
            except OSError:
                raise PartialTransfer(
                    f"write stopped at {start + done:#x}", offset=done
                ) from None
            if wrote <= 0:
                raise PartialTransfer(f"write stopped at {start + done:#x}", offset=done)
            done += wrote

    def read_slow(self, start: int, length: int) -> bytes:
        """Word-at-a-time ptrace fallback; process must be stopped and traced by us."""
        out = bytearray()
        addr = start & ~7
        end = start + length
        while addr < end:
            word = ptrace.peek_word(self.pid, addr)
            out.extend(word.to_bytes(8, "little"))
            addr += 8
        lead = start - (start & ~7)
        return bytes(out[lead : lead + length])

    def write_slow(self, start: int, data: bytes) -> None:
        end = start + len(data)
        aligned_start = start & ~7
        aligned_end = (end + 7) & ~7
        buf = bytearray(self.read_slow(aligned_start, aligned_end - aligned_start))
        buf[start - aligned_start : end - aligned_start] = data
        for i in range(0, len(buf), 8):
            ptrace.poke_word(self.pid, aligned_start + i, int.from_bytes(buf[i : i + 8], "little"))


def read_memory(pid: int, start: int, length: int) -> bytes:
    with ProcMem(pid) as mem:
        return mem.read(start, length)


def write_memory(pid: int, start: int, data: bytes) -> None:
    with ProcMem(pid) as mem:
        mem.write(start, data)


def list_threads(pid: int) -> list[int]:
    """Thread ids of the process; the main thread (== pid) first, the rest ascending."""
    try:
        entries = os.listdir(_proc_path(pid, "task"))
    except (FileNotFoundError, ProcessLookupError) as exc:
        raise ProcessGone(f"pid {pid}: task dir unavailable") from exc
    tids = sorted(int(entry) for entry in entries)
    if pid in tids:
        tids.remove(pid)
        tids.insert(0, pid)
    return tids


def list_fds(pid: int) -> dict[int, str]:
    try:
        entries = os.listdir(_proc_path(pid, "fd"))
    except (FileNotFoundError, ProcessLookupError) as exc:
        raise ProcessGone(f"pid {pid}: fd dir unavailable") from exc
    table = {}
    for entry in entries:
        try:
            table[int(entry)] = os.readlink(_proc_path(pid, f"fd/{entry}"))
        except OSError:
            continue  # closed between listdir and readlink
    return table


def hugepage_regions(pid: int) -> list[tuple[int, int]]:
    """Spans backed by hugetlb pages, per smaps KernelPageSize; unsupported for capture."""
    spans = []
    current: Optional[tuple[int, int]] = None
    for line in _read_proc(pid, "smaps").splitlines():
        if "-" in line.split(" ", 1)[0] and not line.startswith(("Size", "KernelPageSize")):
            head = line.split(None, 1)[0]
            if "-" in head:
                try:
                    lo, hi = (int(x, 16) for x in head.split("-"))
                    current = (lo, hi)
                except ValueError:
                    continue
        elif line.startswith("KernelPageSize:"):
            size_kb = int(line.split()[1])
            if size_kb * 1024 != PAGE_SIZE and current:
                spans.append(current)
    return spans


def overlap_pages(lo: int, hi: int, region: MemoryRegion) -> Optional[tuple[int, int]]:
    """Clamp an address range to a region, as page indexes within the region."""
    start = max(lo, region.start)
    end = min(hi, region.end)
    if start >= end:
        return None
    return (start - region.start) // PAGE_SIZE, (end - region.start) // PAGE_SIZE


def pages_to_addr(region: MemoryRegion, page_lo: int, page_hi: int) -> tuple[int, int]:
    return region.start + page_lo * PAGE_SIZE, region.start + page_hi * PAGE_SIZE


def iter_addr_ranges(
    entries: Iterable[tuple[MemoryRegion, Iterable[tuple[int, int]]]]
) -> Iterator[tuple[int, int]]:
    for region, ranges in entries:
        for lo, hi in ranges:
            yield pages_to_addr(region, lo, hi)
