"""Independent fidelity probe for the guest suite.

compare_to_snapshot stops the guest and compares layout, page contents, and
every thread's registers against the supervisor's snapshot using read-side
interfaces only, so the restorer's own bookkeeping cannot vouch for itself.
"""

from __future__ import annotations

from rewind import procfs, ptrace
from rewind.procfs import PAGE_SIZE, ProcMem
from rewind.snapshot import quiesce, resume, wait_parked
from rewind.tracking import diff_layout, subtract_ranges


def compare_to_snapshot(sup) -> list[str]:
    """Stop the guest, diff it against the snapshot, resume it.

    Returns mismatch descriptions (empty list = identical). Kernel-owned
    regions and kernel-scratch pages stay out of the comparison, mirroring
    what the snapshot captures.
    """
    snap = sup.restorer.snapshot
    info, _regs = wait_parked(snap.pid)
    stops = quiesce(
        snap.pid, attached=tuple(sup.attached), pre_stopped={snap.pid: info}
    )
    sup.attached.clear()
    sup.attached.update(stops)
    mismatches: list[str] = []
    try:
        layout = procfs.read_memory_layout(snap.pid)
        delta = diff_layout(snap.layout, layout)
        if not delta.empty or delta.resized:
            mismatches.append(
                f"layout drift: +{len(delta.added)} -{len(delta.removed)} "
                f"perms {len(delta.reprotected)} resized {len(delta.resized)} "
                f"brk {delta.brk_delta:+d}"
            )
        scratch = list(snap.kernel_scratch)
        with ProcMem(snap.pid) as mem:
            for region in snap.layout.non_kernel_regions():
                for page_lo, page_hi, view in snap.pages.covered(
                    region.start, 0, region.page_count
                ):
                    lo, hi = procfs.pages_to_addr(region, page_lo, page_hi)
                    for sub_lo, sub_hi in subtract_ranges([(lo, hi)], scratch):
                        off = sub_lo - lo
                        want = view[off : off + (sub_hi - sub_lo)]
                        live = mem.read(sub_lo, sub_hi - sub_lo)
                        if live == want:
                            continue
                        for at in range(0, len(live), PAGE_SIZE):
                            if live[at : at + PAGE_SIZE] != want[at : at + PAGE_SIZE]:
                                mismatches.append(
                                    f"content differs at {sub_lo + at:#x} "
                                    f"(region {region.start:#x}-{region.end:#x} "
                                    f"{region.kind.name})"
                                )
                                break
        for thread in snap.threads:
            live_regs = ptrace.capture_thread_registers(thread.tid)
            if live_regs.data != thread.data:
                mismatches.append(f"registers differ for tid {thread.tid}")
    finally:
        resume(stops)
    return mismatches
