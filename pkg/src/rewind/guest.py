"""Reference protocol guest: a pre-touched memory arena plus probe commands.

Runs standalone (`rewind-guest <arena_pages>`), reading one JSON request per
line on stdin and writing one JSON response per line on stdout. The command is
the request's "value" field:

    {"op": "bench", "dirty": K}   write one word to each of K arena pages, then
                                  read one word back from every mapped page
    {"op": "mmap", "pages": N}    map a new private region  -> {"addr": A}
    {"op": "munmap", "addr": A}   unmap a region mapped above
    {"op": "brk_grow", "pages": N}  grow the program break and touch the gain
    {"op": "store_secret", "token": S}   pin S in guest memory
    {"op": "find_secret", "token": S}    scan own memory    -> {"found": bool}
    {"op": "spawn_thread"}        start a sleeping background thread
    {"op": "leak", "bytes": N}    allocate and never free
    {"op": "report_writes"}       addresses the last bench wrote
    {"op": "echo", ...}           reply with the command itself

The bench path allocates nothing on the heap: the write source and the page
sums reuse buffers built at startup, so the pages a bench dirties inside the
arena are exactly the K it was asked for. Every arena page is touched at
startup so later invocations measure dirty tracking, not first-fault paging.

A malformed command produces an error result; the process stays alive.
"""

from __future__ import annotations

import argparse
import ctypes
import json
import mmap
import os
import sys
import threading
import time

PAGE = 4096
SCRATCH_BYTES = 1 << 20
RECV_BYTES = 1 << 16
NEEDLE_MAX = 512
_libc = ctypes.CDLL(None, use_errno=True)
_libc.sbrk.restype = ctypes.c_void_p
_libc.sbrk.argtypes = [ctypes.c_long]


def _buffer_address(buf) -> int:
    return ctypes.addressof(ctypes.c_char.from_buffer(buf))


class Guest:
    def __init__(self, arena_pages: int, done_fd: int = -1):
        self.done_fd = done_fd
        self.arena_pages = arena_pages
        self.arena = mmap.mmap(
            -1,
            arena_pages * PAGE,
            flags=mmap.MAP_PRIVATE | mmap.MAP_ANONYMOUS,
            prot=mmap.PROT_READ | mmap.PROT_WRITE,
        )
        self.arena_mv = memoryview(self.arena)
        self.arena_base = _buffer_address(self.arena)
        # one source byte per arena page for the strided bench write, and a
        # scratch window for find_secret; both preallocated so request handling
        # never grows the heap mid-bench
        self.val_buf = bytearray(arena_pages)
        self.val_mv = memoryview(self.val_buf)
        self.val_addr = _buffer_address(self.val_buf)
        self.scratch = mmap.mmap(
            -1,
            SCRATCH_BYTES,
            flags=mmap.MAP_PRIVATE | mmap.MAP_ANONYMOUS,
            prot=mmap.PROT_READ | mmap.PROT_WRITE,
        )
        self.scratch_mv = memoryview(self.scratch)
        self.scratch_base = _buffer_address(self.scratch)
        # stdin is read into a fixed window (wiped after each transfer) rather
        # than fresh heap buffers, so raw request bytes never linger in freed
        # blocks where a later find_secret would rediscover them
        self.recv = mmap.mmap(
            -1,
            RECV_BYTES,
            flags=mmap.MAP_PRIVATE | mmap.MAP_ANONYMOUS,
            prot=mmap.PROT_READ | mmap.PROT_WRITE,
        )
        self.recv_mv = memoryview(self.recv)
        self.recv_base = _buffer_address(self.recv)
        self.needle = bytearray(NEEDLE_MAX)
        self.needle_len = 0
        self.needle_base = _buffer_address(self.needle)

        self.inbuf = bytearray()
        self.counter = 0
        self.last_write = (0, 0, 0)  # base, pages, value
        self.extra_maps: dict[int, mmap.mmap] = {}
        self.secrets: list[str] = []
        self.leaked: list[bytes] = []
        self.threads: list[threading.Thread] = []

        # touch every arena page so the whole arena is resident before the
        # first request is ever served
        self.arena_mv[0 :: PAGE] = b"\x01" * arena_pages

    # ------------------------------------------------------------- commands

    def op_bench(self, cmd: dict) -> dict:
        dirty = cmd.get("dirty", 0)
        if not isinstance(dirty, int) or not 0 <= dirty <= self.arena_pages:
            raise ValueError(f"dirty must be in [0, {self.arena_pages}]")
        self.counter += 1
        value = self.counter % 250 + 1
        if dirty:
            ctypes.memset(self.val_addr, value, dirty)
            self.arena_mv[0 : dirty * PAGE : PAGE] = self.val_mv[:dirty]
        self.last_write = (self.arena_base, dirty, value)
        total = sum(self.arena_mv[0 :: PAGE])
        pages_read = self.arena_pages
        for extra in self.extra_maps.values():
            view = memoryview(extra)
            total += sum(view[0 :: PAGE])
            pages_read += len(view) // PAGE
            view.release()
        return {"ok": True, "dirtied": dirty, "pages_read": pages_read, "sum": total}

    def op_mmap(self, cmd: dict) -> dict:
        pages = cmd.get("pages")
        if not isinstance(pages, int) or pages < 1:
            raise ValueError("pages must be a positive integer")
        region = mmap.mmap(
            -1,
            pages * PAGE,
            flags=mmap.MAP_PRIVATE | mmap.MAP_ANONYMOUS,
            prot=mmap.PROT_READ | mmap.PROT_WRITE,
        )
        view = memoryview(region)
        view[0 :: PAGE] = b"\x02" * pages
        view.release()
        addr = _buffer_address(region)
        self.extra_maps[addr] = region
        return {"addr": addr, "pages": pages}

    def op_munmap(self, cmd: dict) -> dict:
        addr = cmd.get("addr")
        region = self.extra_maps.pop(addr, None)
        if region is None:
            raise ValueError(f"no region mapped at {addr}")
        region.close()
        return {"ok": True}

    def op_brk_grow(self, cmd: dict) -> dict:
        pages = cmd.get("pages")
        if not isinstance(pages, int) or pages < 1:
            raise ValueError("pages must be a positive integer")
        old = _libc.sbrk(pages * PAGE)
        if old in (None, ctypes.c_void_p(-1).value):
            raise ValueError("sbrk failed")
        ctypes.memset(old, 3, pages * PAGE)
        new_brk = _libc.sbrk(0)
        return {"old_brk": old, "brk": new_brk}

    def op_store_secret(self, cmd: dict) -> dict:
        token = cmd.get("token")
        if not isinstance(token, str) or not token:
            raise ValueError("token must be a nonempty string")
        self.secrets.append(token)
        return {"ok": True, "stored": len(self.secrets)}

    def op_find_secret(self, cmd: dict) -> dict:
        # the needle was already captured (and masked out of the raw line) by
        # _extract_needle, so self.needle holds the only forward copy
        if not self.needle_len:
            raise ValueError("token must be a nonempty string")
        return {"found": self._scan_self()}

    def op_spawn_thread(self, cmd: dict) -> dict:
        thread = threading.Thread(target=_sleep_forever, daemon=True)
        thread.start()
        # give it time to reach its sleep so it parks somewhere restartable
        time.sleep(0.05)
        self.threads.append(thread)
        return {"threads": threading.active_count()}

    def op_leak(self, cmd: dict) -> dict:
        count = cmd.get("bytes")
        if not isinstance(count, int) or count < 1:
            raise ValueError("bytes must be a positive integer")
        self.leaked.append(b"L" * count)
        return {"leaked_total": sum(len(b) for b in self.leaked)}

    def op_report_writes(self, cmd: dict) -> dict:
        base, pages, value = self.last_write
        return {
            "addresses": [base + i * PAGE for i in range(pages)],
            "arena": [self.arena_base, self.arena_base + self.arena_pages * PAGE],
            "value": value,
        }

    def op_echo(self, cmd: dict) -> dict:
        return dict(cmd)

    # ------------------------------------------------------- memory scanning

    def _scan_self(self) -> bool:
        """Search every readable mapping of this process for the needle.

        Matches that fall inside the needle buffer itself are self-sightings
        and do not count; the scratch window the scan reads through and the
        stdin receive window are dedicated mappings skipped wholesale.
        """
        needle = memoryview(self.needle)[: self.needle_len]
        needle_span = (self.needle_base, self.needle_base + NEEDLE_MAX)
        overlap = self.needle_len - 1
        step = SCRATCH_BYTES - overlap
        # Clip the scan's own windows (read buffer, stdin receive buffer) out
        # of the ranges rather than dropping whole map entries: adjacent
        # anonymous mappings merge into a single maps line, so a line holding
        # the scratch window can also hold unrelated allocations.
        own = (
            (self.scratch_base, self.scratch_base + SCRATCH_BYTES),
            (self.recv_base, self.recv_base + RECV_BYTES),
        )
        regions = []
        with open("/proc/self/maps") as maps:
            for line in maps:
                fields = line.split()
                span, perms = fields[0], fields[1]
                path = fields[5] if len(fields) > 5 else ""
                if "r" not in perms or path in ("[vvar]", "[vvar_vclock]", "[vsyscall]"):
                    continue
                start, end = (int(part, 16) for part in span.split("-"))
                spans = [(start, end)]
                for skip_lo, skip_hi in own:
                    clipped = []
                    for lo, hi in spans:
                        if skip_hi <= lo or hi <= skip_lo:
                            clipped.append((lo, hi))
                            continue
                        if lo < skip_lo:
                            clipped.append((lo, skip_lo))
                        if skip_hi < hi:
                            clipped.append((skip_hi, hi))
                    spans = clipped
                regions.extend(spans)
        fd = os.open("/proc/self/mem", os.O_RDONLY)
        try:
            for start, end in regions:
                pos = start
                while pos < end:
                    want = min(SCRATCH_BYTES, end - pos)
                    try:
                        got = os.preadv(fd, [self.scratch_mv[:want]], pos)
                    except OSError:
                        break
                    if got <= 0:
                        break
                    at = 0
                    while True:
                        at = self.scratch.find(needle, at, got)
                        if at < 0:
                            break
                        absolute = pos + at
                        if not needle_span[0] <= absolute < needle_span[1]:
                            return True
                        at += 1
                    if got < want:
                        break
                    pos += min(step, got)
        finally:
            os.close(fd)
        return False

    def _extract_needle(self, buf: bytearray, limit: int) -> None:
        """Pull the find_secret token out of the raw request and mask it there.

        Copying byte-by-byte into a fixed buffer and overwriting the original
        keeps exactly one forward copy of the token in this process, at a known
        address — anything else the scan finds is a genuine leftover.
        """
        self.needle_len = 0
        key = buf.find(b'"token"', 0, limit)
        if key < 0:
            return
        quote = buf.find(b'"', buf.find(b":", key, limit) + 1, limit)
        if quote < 0:
            return
        end = buf.find(b'"', quote + 1, limit)
        if end < 0 or end - quote - 1 > NEEDLE_MAX:
            return
        for offset in range(quote + 1, end):
            self.needle[offset - quote - 1] = buf[offset]
        self.needle_len = end - quote - 1
        buf[quote + 1 : end] = b"#" * self.needle_len

    # ------------------------------------------------------------- main loop

    def _next_line(self):
        while True:
            cut = self.inbuf.find(b"\n")
            if cut >= 0:
                if self.inbuf.find(b'"find_secret"', 0, cut) >= 0:
                    self._extract_needle(self.inbuf, cut)
                line = bytes(self.inbuf[:cut])
                del self.inbuf[: cut + 1]
                if line.strip():
                    return line
                continue
            got = os.readv(0, [self.recv_mv])
            if got <= 0:
                return None
            self.inbuf += self.recv_mv[:got]
            ctypes.memset(self.recv_base, 0, got)

    def handle(self, line: bytes) -> bytes:
        request_id = "?"
        try:
            obj = json.loads(line)
            request_id = obj["id"]
            cmd = obj["value"]
            if not isinstance(cmd, dict) or "op" not in cmd:
                result = {"error": "value must be an object with an 'op' field"}
            else:
                handler = getattr(self, f"op_{cmd['op']}", None)
                if handler is None:
                    result = {"error": f"unknown op {cmd['op']!r}"}
                else:
                    result = handler(cmd)
        except (ValueError, KeyError, TypeError) as exc:
            result = {"error": str(exc)}
        return json.dumps({"id": request_id, "result": result}, separators=(",", ":")).encode()

    def run(self) -> int:
        while True:
            line = self._next_line()
            if line is None:
                return 0
            response = self.handle(line) + b"\n"
            done = 0
            while done < len(response):
                done += os.write(1, response[done:])
            if self.done_fd >= 0:
                os.write(self.done_fd, b"\x06")


def _sleep_forever():
    while True:
        time.sleep(3600)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="rewind-guest", description="Memory-arena protocol guest."
    )
    parser.add_argument("arena_pages", type=int, help="size of the pre-touched arena")
    parser.add_argument(
        "--done-fd",
        type=int,
        default=-1,
        metavar="FD",
        help="write a DONE byte (0x06) to this descriptor after every response",
    )
    args = parser.parse_args(argv)
    if args.arena_pages < 1:
        parser.error("arena_pages must be positive")
    return Guest(args.arena_pages, done_fd=args.done_fd).run()


if __name__ == "__main__":
    sys.exit(main())
