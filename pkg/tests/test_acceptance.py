"""Acceptance gate: one criterion per test, one PASS/FAIL line per criterion.

Numbers that shape these runs (arena size, request counts) are sized so the
whole gate fits a small single machine while preserving every asserted
relationship; each criterion states its tolerances inline.
"""

import os
import random
import secrets
import statistics
import time
from pathlib import Path

import numpy as np
import pytest

from helpers import compare_to_snapshot, guest_command

from rewind import bench
from rewind.bench import WorkloadSpec, linear_fit, run_cell, run_sweep, spearman, sweep_cells
from rewind.manager import Supervisor
from rewind.procfs import PAGE_SIZE

ARENA_A = 25_000  # dirty-fraction sweep arena (scaled from 100K for small RAM)
ARENAS_B = (1_000, 5_000, 10_000, 50_000, 100_000)
DIRTY_FIXED = 1_000
REQUESTS = 60
REQUESTS_B_HIGH = 200
PERCENTS = tuple(range(0, 101, 10))


def _median_latency(result) -> float:
    return statistics.median(result.latencies_us())


def _by_run(results):
    return {result.run_id: result for result in results}


def _dump(results, name: str) -> None:
    """Keep the raw sweep rows around so a marginal verdict can be autopsied."""
    out_dir = Path("/tmp/rewind-acceptance")
    out_dir.mkdir(exist_ok=True)
    csv_path, _summary = bench.emit_report(results, out_dir)
    csv_path.rename(out_dir / name)
    print(f"sweep rows saved to {out_dir / name}")


# --------------------------------------------------------------- sweep cache


@pytest.fixture(scope="module")
def sweep_a():
    """Dirty-fraction sweep: gh under both loads; gh-nop, base, fork under low.

    The grid is listed twice so run_sweep interleaves two passes per cell:
    mode-vs-mode comparisons (gh-nop against base in particular) then compare
    medians drawn from the same epochs of the machine instead of whatever
    phase each cell happened to land on.
    """
    specs = sweep_cells(
        "A",
        modes=("gh",),
        loads=("low", "high"),
        arena_pages=ARENA_A,
        dirty_percents=PERCENTS,
        request_count=REQUESTS,
    )
    specs += sweep_cells(
        "A",
        modes=("gh-nop", "base", "fork"),
        loads=("low",),
        arena_pages=ARENA_A,
        dirty_percents=PERCENTS,
        request_count=REQUESTS,
    )
    started = time.monotonic()
    results, failures = run_sweep(specs * 2, prefault=True)
    assert not failures, f"sweep A cells failed: {[(s.run_id, e) for s, e in failures]}"
    print(f"sweep A: {len(results)} cells in {time.monotonic() - started:.0f}s")
    _dump(results, "sweep_a.csv")
    return _by_run(results)


@pytest.fixture(scope="module")
def sweep_b():
    """Arena-size sweep at fixed dirty count: gh both loads; base and fork low.

    The asserted trends between the small arenas are tens of microseconds,
    and on this machine every spawned guest instance carries a persistent
    timing offset of about that size (host-side layout luck), with occasional
    instances running hundreds of microseconds slow for their whole life. So
    cells whose trends are asserted run as many short-lived spawns in many
    passes — instance offsets average out across spawns instead of becoming
    the cell's identity — and each pass visits the cells in a shuffled order
    so no cell always inherits the same predecessor's machine state.
    """
    gh_and_base_low = sweep_cells(
        "B",
        modes=("gh", "base"),
        loads=("low",),
        arena_list=ARENAS_B,
        dirty_fixed=DIRTY_FIXED,
        request_count=REQUESTS_B,
    )
    gh_high = sweep_cells(
        "B",
        modes=("gh",),
        loads=("high",),
        arena_list=ARENAS_B,
        dirty_fixed=DIRTY_FIXED,
        request_count=REQUESTS_B,
    )
    fork_low = sweep_cells(
        "B",
        modes=("fork",),
        loads=("low",),
        arena_list=ARENAS_B,
        dirty_fixed=DIRTY_FIXED,
        request_count=REQUESTS,
    )
    order = random.Random(0xB0B)
    specs = []
    for p in range(PASSES_B):
        chunk = gh_and_base_low + gh_high + (fork_low if p < 2 else [])
        order.shuffle(chunk)
        specs += chunk
    started = time.monotonic()
    results, failures = run_sweep(specs, prefault=True)
    assert not failures, f"sweep B cells failed: {[(s.run_id, e) for s, e in failures]}"
    print(f"sweep B: {len(results)} cells in {time.monotonic() - started:.0f}s")
    _dump(results, "sweep_b.csv")
    return _by_run(results)


# ---------------------------------------------------------------- criteria


def test_a1_restore_fidelity(verdict):
    """200 randomized mutate/restore cycles leave the guest byte-identical."""
    rng = random.Random(0x5EED)
    cycles = 200
    started = time.monotonic()
    sup = Supervisor(
        "gh",
        guest_command(1_000),
        dummy_value={"op": "bench", "dirty": 8},
        skip_same_domain=True,
    )
    sup.start()
    clean = 0
    first_bad = ""
    try:
        for cycle in range(cycles):
            mapped = []
            for _ in range(rng.randint(1, 3)):
                op = rng.choice(("bench", "mmap", "brk_grow", "leak", "store_secret"))
                if op == "bench":
                    sup.request({"op": "bench", "dirty": rng.randint(0, 400)}, domain="c")
                elif op == "mmap":
                    reply = sup.request({"op": "mmap", "pages": rng.randint(1, 64)}, domain="c")
                    mapped.append(reply.result["addr"])
                elif op == "brk_grow":
                    sup.request({"op": "brk_grow", "pages": rng.randint(1, 16)}, domain="c")
                elif op == "leak":
                    sup.request({"op": "leak", "bytes": rng.randint(10_000, 200_000)}, domain="c")
                else:
                    sup.request(
                        {"op": "store_secret", "token": secrets.token_hex(12)}, domain="c"
                    )
            if mapped and rng.random() < 0.5:
                sup.request({"op": "munmap", "addr": rng.choice(mapped)}, domain="c")
            sup.restore_now()
            mismatches = compare_to_snapshot(sup)
            if mismatches:
                first_bad = f"cycle {cycle}: {mismatches[:3]}"
                break
            clean += 1
    finally:
        sup.shutdown()
    elapsed = time.monotonic() - started
    verdict(
        "A1",
        clean == cycles and elapsed < 120,
        f"{clean}/{cycles} cycles byte-identical in {elapsed:.1f}s (limit 120s) {first_bad}",
    )


def test_a2_isolation_probe(verdict):
    """A stored secret is gone on the next request under gh/fork, kept under base/gh-nop."""
    expectations = {"gh": False, "fork": False, "base": True, "gh-nop": True}
    trials = 50
    outcomes = {}
    for mode, expected in expectations.items():
        sup = Supervisor(mode, guest_command(2_000), dummy_value={"op": "bench", "dirty": 8})
        sup.start()
        good = 0
        try:
            for _ in range(trials):
                token = f"R1-{secrets.token_hex(16)}"
                sup.request({"op": "store_secret", "token": token})
                found = sup.request({"op": "find_secret", "token": token}).result["found"]
                if found is expected:
                    good += 1
        finally:
            sup.shutdown()
        outcomes[mode] = good
    detail = " ".join(f"{mode}={good}/{trials}" for mode, good in outcomes.items())
    verdict("A2", all(good == trials for good in outcomes.values()), detail)


def test_a3_dirty_tracking_exactness(verdict):
    """The scanned dirty set inside the arena equals the scripted write set."""
    sizes = (0, 1, 3, 1_000)
    trials = 100
    sup = Supervisor("gh", guest_command(2_000), dummy_value={"op": "bench", "dirty": 8})
    sup.start()
    exact = {size: 0 for size in sizes}
    try:
        sup.request({"op": "bench", "dirty": 1})
        arena_lo, arena_hi = sup.request({"op": "report_writes"}).result["arena"]
        for size in sizes:
            for _ in range(trials):
                report = sup.request({"op": "bench", "dirty": size}).report
                got = []
                for lo, hi in report.dirty.addr_ranges():
                    lo, hi = max(lo, arena_lo), min(hi, arena_hi)
                    if lo < hi:
                        got.append((lo, hi))
                want = [] if size == 0 else [(arena_lo, arena_lo + size * PAGE_SIZE)]
                if got == want:
                    exact[size] += 1
    finally:
        sup.shutdown()
    detail = " ".join(f"dirty={size}:{good}/{trials}" for size, good in exact.items())
    verdict("A3", all(good == trials for good in exact.values()), detail)


def test_a4_dirty_sweep_trends(verdict, sweep_a):
    """Latency vs dirty fraction: linear for gh low; gh-nop ~ base; high pays the rollback."""
    gh_low = [_median_latency(sweep_a[f"gh-low-a{ARENA_A}-d{p * ARENA_A // 100}"]) for p in PERCENTS]
    gh_high = [
        _median_latency(sweep_a[f"gh-high-a{ARENA_A}-d{p * ARENA_A // 100}"]) for p in PERCENTS
    ]

    # (a) gh low load: latency grows linearly with the dirty fraction
    slope, _intercept, r2 = linear_fit([p / 100 for p in PERCENTS], gh_low)
    ok_linear = r2 >= 0.9 and slope > 0

    # (b) tracking alone is indistinguishable from no supervision at every point
    worst_sigma = 0.0
    for p in PERCENTS:
        dirty = p * ARENA_A // 100
        base_lat = sweep_a[f"base-low-a{ARENA_A}-d{dirty}"].latencies_us()
        nop_med = _median_latency(sweep_a[f"gh-nop-low-a{ARENA_A}-d{dirty}"])
        sigma = float(np.std(base_lat)) or 1.0
        worst_sigma = max(worst_sigma, abs(nop_med - statistics.median(base_lat)) / sigma)
    ok_nop = worst_sigma <= 3.0

    # (c) high load is never cheaper, and its surcharge tracks the dirty count
    ok_order = all(h >= l for h, l in zip(gh_high, gh_low))
    gap_rho = spearman(list(PERCENTS), [h - l for h, l in zip(gh_high, gh_low)])
    ok_gap = gap_rho >= 0.9

    verdict(
        "A4",
        ok_linear and ok_nop and ok_order and ok_gap,
        f"low fit R2={r2:.3f} slope={slope / 1e3:+.1f}ms/frac; "
        f"nop-vs-base worst={worst_sigma:.2f}sigma (<=3); "
        f"high>=low {sum(h >= l for h, l in zip(gh_high, gh_low))}/11; gap rho={gap_rho:.3f}",
    )


def test_a5_arena_sweep_trends(verdict, sweep_b):
    """Arena size: low-load overhead flat (CI on slope contains 0); high load scans it all."""
    rng = np.random.default_rng(11)
    gh_cells = [sweep_b[f"gh-low-a{a}-d{DIRTY_FIXED}"].latencies_us() for a in ARENAS_B]
    base_cells = [sweep_b[f"base-low-a{a}-d{DIRTY_FIXED}"].latencies_us() for a in ARENAS_B]

    # guest work itself grows with arena (it reads every page each request), so
    # the mechanism's contribution is the latency surcharge over no supervision
    arenas = np.array(ARENAS_B, dtype=float)
    slopes = []
    for _ in range(2_000):
        overhead = [
            np.median(rng.choice(gh, size=len(gh))) - np.median(rng.choice(bs, size=len(bs)))
            for gh, bs in zip(gh_cells, base_cells)
        ]
        slopes.append(np.polyfit(arenas, overhead, 1)[0])
    lo, hi = np.percentile(slopes, [2.5, 97.5])
    ok_flat = lo <= 0.0 <= hi

    # the trend claim is about the cell-level latency, not per-request jitter
    high_meds = [
        _median_latency(sweep_b[f"gh-high-a{arena}-d{DIRTY_FIXED}"]) for arena in ARENAS_B
    ]
    high_rho = spearman(list(ARENAS_B), high_meds)
    ok_high = high_rho >= 0.9

    verdict(
        "A5",
        ok_flat and ok_high,
        f"low overhead slope CI [{lo * 1e3:+.2f}, {hi * 1e3:+.2f}] ns/page contains 0: {ok_flat}; "
        f"high rho={high_rho:.3f} (>=0.9)",
    )


def test_a6_fork_comparison(verdict, sweep_a, sweep_b):
    """Fresh-process isolation costs at least as much as rollback once writes dominate."""
    heavy = [p for p in PERCENTS if p >= 50]
    order = []
    for p in heavy:
        dirty = p * ARENA_A // 100
        fork_med = _median_latency(sweep_a[f"fork-low-a{ARENA_A}-d{dirty}"])
        gh_med = _median_latency(sweep_a[f"gh-low-a{ARENA_A}-d{dirty}"])
        order.append(fork_med >= gh_med)

    fork_meds = [
        _median_latency(sweep_b[f"fork-low-a{arena}-d{DIRTY_FIXED}"]) for arena in ARENAS_B
    ]
    arena_rho = spearman(list(ARENAS_B), fork_meds)

    verdict(
        "A6",
        all(order) and arena_rho >= 0.9,
        f"fork>=gh at dirty>=50%: {sum(order)}/{len(order)}; fork arena rho={arena_rho:.3f}",
    )


def test_a7_restore_magnitude(verdict, sweep_a, sweep_b):
    """Near-empty guests restore in single-digit ms; sweep restores stay in range."""
    sup = Supervisor("gh", guest_command(16), dummy_value={"op": "echo"})
    sup.start()
    try:
        for _ in range(40):
            sup.request({"op": "echo", "ping": 1})
        echo_restores = [report.total_us for report in sup.reports[5:]]
    finally:
        sup.shutdown()
    echo_median_ms = statistics.median(echo_restores) / 1e3

    pooled = []
    for results in (sweep_a, sweep_b):
        for run_id, result in results.items():
            if result.mode == "gh" and result.reports:
                pooled.extend(report.total_us for report in result.reports)
    sweep_median_ms = statistics.median(pooled) / 1e3

    verdict(
        "A7",
        echo_median_ms <= 5.0 and 0.5 <= sweep_median_ms <= 40.0,
        f"echo median {echo_median_ms:.2f}ms (<=5); sweep median {sweep_median_ms:.2f}ms "
        f"in [0.5, 40] over {len(pooled)} restores",
    )


def test_a8_decomposition_consistency(verdict, sweep_a, sweep_b):
    """Steps explain totals; page-write time tracks pages; scan time tracks arena."""
    checked = 0
    inconsistent = 0
    pages_x, pages_y = [], []
    scan_pts = {"low": [], "high": []}
    for results, varied in ((sweep_a, "dirty"), (sweep_b, "arena")):
        for result in results.values():
            if result.mode != "gh" or not result.reports:
                continue
            for report in result.reports:
                checked += 1
                if not report.consistent(tolerance=0.05):
                    inconsistent += 1
            # correlations at cell granularity: medians strip per-request
            # jitter, leaving the work-vs-time relationship under test; each
            # quantity is judged on the sweep that varies its driver
            if varied == "dirty":
                pages_x.append(statistics.median(r.pages_restored for r in result.reports))
                pages_y.append(
                    statistics.median(
                        r.steps["restoring_page_contents"] for r in result.reports
                    )
                )
            else:
                scan_pts[result.load].append(
                    (
                        result.arena_pages,
                        statistics.median(r.steps["scanning_pages"] for r in result.reports),
                    )
                )
    pages_rho = spearman(pages_x, pages_y)
    # judged per load: the pacing regime shifts the whole scan step (cache and
    # wakeup state differ), and that offset says nothing about the arena trend
    scan_rhos = {}
    for load, pts in scan_pts.items():
        pts.sort()
        print(f"scan medians ({load}): " + " ".join(f"{a}p={us:.0f}us" for a, us in pts))
        scan_rhos[load] = spearman([a for a, _ in pts], [us for _, us in pts])
    scan_rho = min(scan_rhos.values())
    verdict(
        "A8",
        inconsistent == 0 and pages_rho >= 0.95 and scan_rho >= 0.95,
        f"{checked - inconsistent}/{checked} reports within 5%; pages rho={pages_rho:.3f} "
        f"scan rho low={scan_rhos['low']:.3f} high={scan_rhos['high']:.3f} (>=0.95)",
    )


def test_a9_throughput_scaling(verdict):
    """Independent supervisor+guest pairs scale across cores."""
    cores = len(os.sched_getaffinity(0))
    if cores < 4:
        rates = bench.run_scaling(
            [1], arena_pages=2_000, dirty=500, duration_s=4.0, repetitions=2
        )
        rps, _sd = rates[1]
        assert rps > 0, "single-pair smoke run must make progress"
        verdict.skip("A9", f"needs >=4 cores, machine has {cores}; 1-pair smoke ok at {rps:.0f} rps")
    rates = bench.run_scaling(
        [1, 4], arena_pages=10_000, dirty=2_000, duration_s=45.0, repetitions=3
    )
    ratio = rates[4][0] / rates[1][0]
    verdict(
        "A9",
        ratio >= 3.2,
        f"throughput x{ratio:.2f} going 1->4 pairs ({rates[1][0]:.0f} -> {rates[4][0]:.0f} rps)",
    )


def test_a10_idempotent_restore(verdict):
    """Restoring a just-restored guest finds zero pages and an empty delta."""
    trials = 100
    sup = Supervisor("gh", guest_command(2_000), dummy_value={"op": "bench", "dirty": 8})
    sup.start()
    idempotent = 0
    worst = ""
    try:
        for trial in range(trials):
            sup.request({"op": "bench", "dirty": 32})  # restores on completion
            again = sup.restore_now()
            if again.pages_restored == 0 and (again.delta is None or again.delta.empty):
                idempotent += 1
            elif not worst:
                worst = (
                    f"trial {trial}: pages_restored={again.pages_restored} "
                    f"delta_empty={again.delta is None or again.delta.empty}"
                )
    finally:
        sup.shutdown()
    verdict("A10", idempotent == trials, f"{idempotent}/{trials} second restores empty {worst}")
