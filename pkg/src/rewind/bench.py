"""Latency/throughput measurement harness for the supervisor modes.

Drives one supervisor+guest pair per cell through a fixed request schedule and
records per-request invoker latency plus the per-cycle restore reports:

    sweep A   arena fixed, dirty-page count swept (cost of dirtying/tracking)
    sweep B   dirty count fixed, arena size swept (cost of scanning)
    scaling   N independent pairs pinned one-per-core, sustained req/s
    isolation store_secret/find_secret probe across modes

Two load shapes per cell. "low" submits one request at a time with an idle gap
of 3x the moving maximum of recent restore totals, so rollback always finishes
off the measured path; the gap never drops below LOW_GAP_FLOOR_US, applied
identically in every mode (including modes that never roll back), because the
idle duration itself shifts measured latency on frequency-scaled CPUs and a
mode comparison is only meaningful under identical request pacing. "high"
submits back-to-back: each request's latency is measured from the moment the
previous response was in hand, so time spent finishing the previous rollback
counts against it.

Latency is measured at the supervisor boundary (request arrival to response
line) on the monotonic clock. The first WARMUP_DISCARD requests of every
repetition are excluded from summary statistics but kept in the CSV.
"""

from __future__ import annotations

import argparse
import mmap
import os
import shlex
import sys
import time
from collections import deque
from dataclasses import dataclass, field
from multiprocessing import Process, Queue
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import stats as scipy_stats

from .errors import SupervisorError
from .manager import MODES, Supervisor
from .restore import CSV_STEP_COLUMNS, RestoreReport

WARMUP_DISCARD = 5
GAP_FACTOR = 3
GAP_WINDOW = 10
# Uniform idle floor for low-load cells. Waking from idle costs extra latency
# that grows with how long the CPU slept (measured here: ~+0.4 ms after 18 ms
# idle, ~+1 ms after 120 ms), so cells being compared must sleep the same
# amount; 50 ms exceeds 3x the largest steady restore in the standard grids.
LOW_GAP_FLOOR_US = 50_000

DEFAULT_ARENA_PAGES = 100_000
DEFAULT_DIRTY_PERCENTS = tuple(range(0, 101, 10))
DEFAULT_ARENA_LIST = (1_000, 5_000, 10_000, 50_000, 100_000)
DEFAULT_DIRTY_FIXED = 1_000
DEFAULT_REQUESTS = 150

CSV_HEADER = (
    "run_id,mode,load,arena_pages,dirty_pages,request_idx,latency_us,"
    "restore_total_us,"
    + ",".join(col for _name, col in CSV_STEP_COLUMNS)
    + ",pages_scanned,pages_restored,syscalls_injected"
)
_RESTORE_COLUMNS = 1 + len(CSV_STEP_COLUMNS) + 3  # total, steps, counters


# ---------------------------------------------------------------------------
# Workload description and results


@dataclass(frozen=True)
class WorkloadSpec:
    mode: str
    load: str
    arena_pages: int
    dirty_count: Optional[int] = None
    dirty_fraction: Optional[float] = None
    request_count: int = DEFAULT_REQUESTS
    repetitions: int = 1

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, not {self.mode!r}")
        if self.load not in ("low", "high"):
            raise ValueError(f"load must be low or high, not {self.load!r}")
        if (self.dirty_count is None) == (self.dirty_fraction is None):
            raise ValueError("exactly one of dirty_count/dirty_fraction must be set")
        if self.request_count < 1:
            raise ValueError("request_count must be >= 1")
        if self.repetitions < 1:
            raise ValueError("repetitions must be >= 1")
        if self.arena_pages < 1:
            raise ValueError("arena_pages must be >= 1")
        if self.dirty_fraction is not None and not 0 <= self.dirty_fraction <= 1:
            raise ValueError("dirty_fraction must be within [0, 1]")
        if self.dirty_count is not None and self.dirty_count < 0:
            raise ValueError("dirty_count must be >= 0")

    @property
    def dirty_pages(self) -> int:
        if self.dirty_count is not None:
            return min(self.dirty_count, self.arena_pages)
        return int(round(self.dirty_fraction * self.arena_pages))

    @property
    def run_id(self) -> str:
        return f"{self.mode}-{self.load}-a{self.arena_pages}-d{self.dirty_pages}"


@dataclass(frozen=True)
class RequestSample:
    request_idx: int
    latency_us: float
    # restore_total_us, the 13 step columns, pages_scanned/restored, syscalls;
    # all zeros for modes that produce no restore report
    restore_values: tuple

    @classmethod
    def from_report(
        cls, idx: int, latency_us: float, report: Optional[RestoreReport]
    ) -> "RequestSample":
        values = tuple(report.csv_values()) if report else (0.0,) * (
            _RESTORE_COLUMNS - 3
        ) + (0, 0, 0)
        return cls(idx, round(latency_us, 1), values)


@dataclass
class RunResult:
    run_id: str
    mode: str
    load: str
    arena_pages: int
    dirty_pages: int
    request_count: int
    repetitions: int
    samples: list[RequestSample]
    throughput_rps: float
    reports: list[RestoreReport] = field(default_factory=list, repr=False)

    def __post_init__(self):
        if len(self.samples) != self.request_count * self.repetitions:
            raise ValueError(
                f"{self.run_id}: {len(self.samples)} samples for "
                f"{self.request_count} x {self.repetitions} requests"
            )
        if self.samples and self.throughput_rps <= 0:
            raise ValueError(f"{self.run_id}: non-positive throughput")

    def latencies_us(self, discard_warmup: bool = True) -> np.ndarray:
        xs = [
            s.latency_us
            for s in self.samples
            if not discard_warmup or (s.request_idx % self.request_count) >= WARMUP_DISCARD
        ]
        return np.asarray(xs, dtype=float)

    def restore_totals_us(self, discard_warmup: bool = True) -> np.ndarray:
        xs = [
            s.restore_values[0]
            for s in self.samples
            if s.restore_values[0] > 0
            and (not discard_warmup or (s.request_idx % self.request_count) >= WARMUP_DISCARD)
        ]
        return np.asarray(xs, dtype=float)

    def summary(self) -> dict:
        return percentile_summary(self.latencies_us())


def percentile_summary(samples: Sequence[float]) -> dict:
    xs = np.asarray(samples, dtype=float)
    if xs.size == 0:
        return {k: 0.0 for k in ("median", "p10", "p25", "p75", "p90", "p95", "mean", "cov")}
    mean = float(np.mean(xs))
    return {
        "median": float(np.median(xs)),
        "p10": float(np.percentile(xs, 10)),
        "p25": float(np.percentile(xs, 25)),
        "p75": float(np.percentile(xs, 75)),
        "p90": float(np.percentile(xs, 90)),
        "p95": float(np.percentile(xs, 95)),
        "mean": mean,
        "cov": float(np.std(xs) / mean) if mean else 0.0,
    }


# ---------------------------------------------------------------------------
# Statistics used by the acceptance checks


def linear_fit(x: Sequence[float], y: Sequence[float]) -> tuple[float, float, float]:
    """Least-squares line: (slope, intercept, r_squared)."""
    xs = np.asarray(x, dtype=float)
    ys = np.asarray(y, dtype=float)
    slope, intercept = np.polyfit(xs, ys, 1)
    predicted = slope * xs + intercept
    ss_res = float(np.sum((ys - predicted) ** 2))
    ss_tot = float(np.sum((ys - np.mean(ys)) ** 2))
    r_squared = 1.0 if ss_tot == 0 else 1.0 - ss_res / ss_tot
    return float(slope), float(intercept), r_squared


def spearman(x: Sequence[float], y: Sequence[float]) -> float:
    """Rank correlation, rounded to strip float representation error.

    Rank statistics are quantized (for 5 points the possible values step by
    0.05), but the float pipeline can return e.g. 0.8999999999999999 for an
    exact 0.9, which a `>= 0.9` threshold then rejects. Rounding far below
    the quantization step recovers the exact value without ever moving one
    achievable statistic onto another.
    """
    rho = scipy_stats.spearmanr(np.asarray(x, float), np.asarray(y, float))[0]
    return float(np.round(rho, 12))


def bootstrap_slope_ci(
    x: Sequence[float],
    y: Sequence[float],
    n_boot: int = 2000,
    alpha: float = 0.05,
    seed: int = 0,
) -> tuple[float, float]:
    """Percentile bootstrap confidence interval for the regression slope."""
    xs = np.asarray(x, dtype=float)
    ys = np.asarray(y, dtype=float)
    rng = np.random.default_rng(seed)
    slopes = np.empty(n_boot)
    n = xs.size
    for i in range(n_boot):
        pick = rng.integers(0, n, n)
        sx, sy = xs[pick], ys[pick]
        if np.ptp(sx) == 0:
            slopes[i] = 0.0
            continue
        slopes[i] = np.polyfit(sx, sy, 1)[0]
    lo, hi = np.percentile(slopes, [100 * alpha / 2, 100 * (1 - alpha / 2)])
    return float(lo), float(hi)


# ---------------------------------------------------------------------------
# Running cells


def default_guest_command(arena_pages: int) -> list[str]:
    return [sys.executable, "-m", "rewind.guest", str(arena_pages)]


def run_cell(
    spec: WorkloadSpec,
    guest_command: Optional[Callable[[int], list[str]]] = None,
) -> RunResult:
    """One supervisor+guest pair through the spec's request schedule."""
    make_command = guest_command or default_guest_command
    dirty = spec.dirty_pages
    samples: list[RequestSample] = []
    reports: list[RestoreReport] = []
    wall_s = 0.0

    for rep in range(spec.repetitions):
        sup = Supervisor(
            mode=spec.mode,
            command=make_command(spec.arena_pages),
            dummy_value={"op": "bench", "dirty": max(1, min(dirty, 64))},
        )
        try:
            sup.spawn()
            sup.warmup()
            recent_restores: deque[float] = deque(maxlen=GAP_WINDOW)
            prev_responded: Optional[float] = None
            began = time.perf_counter()
            for i in range(spec.request_count):
                received_at = None
                if spec.load == "low":
                    gap_us = GAP_FACTOR * max(recent_restores, default=0.0)
                    time.sleep(max(gap_us, LOW_GAP_FLOOR_US) / 1e6)
                else:
                    received_at = prev_responded
                envelope = sup.request(
                    {"op": "bench", "dirty": dirty}, received_at=received_at
                )
                prev_responded = envelope.responded_at
                if envelope.report is not None:
                    recent_restores.append(envelope.report.total_us)
                    reports.append(envelope.report)
                samples.append(
                    RequestSample.from_report(
                        rep * spec.request_count + i,
                        envelope.latency_us,
                        envelope.report,
                    )
                )
            wall_s += time.perf_counter() - began
        finally:
            sup.shutdown()

    return RunResult(
        run_id=spec.run_id,
        mode=spec.mode,
        load=spec.load,
        arena_pages=spec.arena_pages,
        dirty_pages=dirty,
        request_count=spec.request_count,
        repetitions=spec.repetitions,
        samples=samples,
        throughput_rps=round(len(samples) / wall_s, 2) if wall_s else 0.0,
        reports=reports,
    )


def sweep_cells(
    sweep: str,
    modes: Sequence[str],
    loads: Sequence[str] = ("low", "high"),
    arena_pages: int = DEFAULT_ARENA_PAGES,
    dirty_percents: Sequence[int] = DEFAULT_DIRTY_PERCENTS,
    arena_list: Sequence[int] = DEFAULT_ARENA_LIST,
    dirty_fixed: int = DEFAULT_DIRTY_FIXED,
    request_count: int = DEFAULT_REQUESTS,
    repetitions: int = 1,
) -> list[WorkloadSpec]:
    """The two standard grids: A sweeps dirty count, B sweeps arena size."""
    specs = []
    if sweep in ("A", "both"):
        for mode in modes:
            for load in loads:
                for percent in dirty_percents:
                    specs.append(
                        WorkloadSpec(
                            mode=mode,
                            load=load,
                            arena_pages=arena_pages,
                            dirty_fraction=percent / 100,
                            request_count=request_count,
                            repetitions=repetitions,
                        )
                    )
    if sweep in ("B", "both"):
        for mode in modes:
            for load in loads:
                for arena in arena_list:
                    specs.append(
                        WorkloadSpec(
                            mode=mode,
                            load=load,
                            arena_pages=arena,
                            dirty_count=min(dirty_fixed, arena),
                            request_count=request_count,
                            repetitions=repetitions,
                        )
                    )
    return specs


def prefault_memory(target_bytes: int, chunk_bytes: int = 512 << 20) -> None:
    """Touch target_bytes of fresh anonymous memory once, then release it.

    On lazily backed virtual machines the first growth of the machine's
    footprint is billed a first-touch premium (host-side faults); paying it
    up front keeps that premium out of whichever measurement cell happens to
    cross the high-water mark first. Chunked so resident usage stays bounded.
    """
    remaining = target_bytes
    while remaining > 0:
        size = min(remaining, chunk_bytes)
        buf = mmap.mmap(-1, size, flags=mmap.MAP_PRIVATE | mmap.MAP_ANONYMOUS)
        try:
            for off in range(0, size, mmap.PAGESIZE):
                buf[off] = 1
        finally:
            buf.close()
        remaining -= size


def _merge_passes(first: RunResult, second: RunResult) -> RunResult:
    """Fold a repeated cell run into one result (extra interleaved passes)."""
    if (first.run_id, first.request_count) != (second.run_id, second.request_count):
        raise ValueError(f"cannot merge {first.run_id} with {second.run_id}")
    wall_s = (
        len(first.samples) / first.throughput_rps
        + len(second.samples) / second.throughput_rps
    )
    return RunResult(
        run_id=first.run_id,
        mode=first.mode,
        load=first.load,
        arena_pages=first.arena_pages,
        dirty_pages=first.dirty_pages,
        request_count=first.request_count,
        repetitions=first.repetitions + second.repetitions,
        samples=first.samples + second.samples,
        throughput_rps=round((len(first.samples) + len(second.samples)) / wall_s, 2),
        reports=first.reports + second.reports,
    )


def run_sweep(
    specs: Sequence[WorkloadSpec],
    guest_command: Optional[Callable[[int], list[str]]] = None,
    log: Callable[[str], None] = lambda line: print(line, file=sys.stderr),
    prefault: bool = False,
) -> tuple[list[RunResult], list[tuple[WorkloadSpec, str]]]:
    """Run every cell; a failing cell is recorded and the sweep continues.

    A spec that appears multiple times in the list is run each time it appears
    and merged into a single result. Listing the whole grid N times gives N
    interleaved passes per cell, so slow phases of a drifting machine spread
    across all cells instead of biasing whichever cells ran during them.
    """
    if prefault and specs:
        biggest = max(spec.arena_pages for spec in specs) * os.sysconf("SC_PAGE_SIZE")
        prefault_memory(2 * biggest + (512 << 20))  # guest arena + snapshot + slack
    merged: dict[str, RunResult] = {}
    failures: list[tuple[WorkloadSpec, str]] = []
    for n, spec in enumerate(specs, 1):
        log(f"[{n}/{len(specs)}] {spec.run_id}")
        try:
            result = run_cell(spec, guest_command)
        except SupervisorError as exc:
            failures.append((spec, f"{type(exc).__name__}: {exc}"))
            log(f"  cell failed: {type(exc).__name__}: {exc}")
            continue
        if spec.run_id in merged:
            merged[spec.run_id] = _merge_passes(merged[spec.run_id], result)
        else:
            merged[spec.run_id] = result
    return list(merged.values()), failures


# ---------------------------------------------------------------------------
# Scaling study


def _scaling_worker(
    mode: str,
    arena_pages: int,
    dirty: int,
    duration_s: float,
    core: Optional[int],
    out: Queue,
) -> None:
    count = 0
    try:
        if core is not None:
            os.sched_setaffinity(0, {core})
        sup = Supervisor(
            mode=mode,
            command=default_guest_command(arena_pages),
            dummy_value={"op": "bench", "dirty": max(1, min(dirty, 64))},
        )
        try:
            sup.spawn()
            sup.warmup()
            for _ in range(WARMUP_DISCARD):
                sup.request({"op": "bench", "dirty": dirty})
            deadline = time.perf_counter() + duration_s
            while time.perf_counter() < deadline:
                sup.request({"op": "bench", "dirty": dirty})
                count += 1
        finally:
            sup.shutdown()
    except Exception as exc:  # worker process: report, never hang the parent
        print(f"scaling worker failed: {exc}", file=sys.stderr)
    out.put(count)


def run_scaling(
    pair_counts: Sequence[int],
    mode: str = "gh",
    arena_pages: int = 10_000,
    dirty: int = 2_000,
    duration_s: float = 90.0,
    repetitions: int = 6,
    log: Callable[[str], None] = lambda line: print(line, file=sys.stderr),
) -> dict[int, tuple[float, float]]:
    """Sustained throughput for N concurrent supervisor+guest pairs.

    Each pair runs in its own OS process, pinned one-per-core when enough
    cores exist (otherwise a warning is logged and workers run unpinned).
    Returns {pairs: (mean_rps, stdev_rps)} over the repetitions.
    """
    cores = os.cpu_count() or 1
    out: dict[int, tuple[float, float]] = {}
    for pairs in pair_counts:
        if pairs == 0:
            out[0] = (0.0, 0.0)
            continue
        pin = pairs <= cores
        if not pin:
            log(f"InsufficientCores: {pairs} pairs on {cores} cores; running unpinned")
        rates = []
        for rep in range(repetitions):
            queue: Queue = Queue()
            workers = [
                Process(
                    target=_scaling_worker,
                    args=(mode, arena_pages, dirty, duration_s, i if pin else None, queue),
                )
                for i in range(pairs)
            ]
            for worker in workers:
                worker.start()
            counts = [queue.get() for _ in workers]
            for worker in workers:
                worker.join()
            rates.append(sum(counts) / duration_s)
            log(f"pairs={pairs} rep={rep + 1}/{repetitions}: {rates[-1]:.2f} req/s")
        out[pairs] = (float(np.mean(rates)), float(np.std(rates)))
    return out


# ---------------------------------------------------------------------------
# Reporting


def emit_report(results: Sequence[RunResult], out_dir: Path) -> tuple[Path, str]:
    """Write results.csv (fixed schema) and summary.txt; return (csv path, summary)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / "results.csv"
    with open(csv_path, "w") as sink:
        sink.write(CSV_HEADER + "\n")
        for result in results:
            prefix = (
                f"{result.run_id},{result.mode},{result.load},"
                f"{result.arena_pages},{result.dirty_pages}"
            )
            for sample in result.samples:
                cells = [prefix, str(sample.request_idx), f"{sample.latency_us:.1f}"]
                for value in sample.restore_values:
                    cells.append(
                        f"{value:.1f}" if isinstance(value, float) else str(value)
                    )
                sink.write(",".join(cells) + "\n")

    lines = ["run_id                              n  median_us     p90_us      req/s"]
    for result in results:
        stats = result.summary()
        lines.append(
            f"{result.run_id:34s} {result.latencies_us().size:3d} "
            f"{stats['median']:10.1f} {stats['p90']:10.1f} {result.throughput_rps:10.2f}"
        )
    decomposed = [r for r in results if r.reports]
    if decomposed:
        lines.append("")
        lines.append("restore decomposition, median us per step (cells with reports):")
        step_names = [name for name, _col in CSV_STEP_COLUMNS]
        totals = {name: [] for name in step_names}
        grand = []
        for result in decomposed:
            for report in result.reports:
                grand.append(report.total_us)
                for name in step_names:
                    totals[name].append(report.steps[name])
        lines.append(f"  {'restore_total':26s} {float(np.median(grand)):10.1f}")
        for name in step_names:
            lines.append(f"  {name:26s} {float(np.median(totals[name])):10.1f}")
    summary = "\n".join(lines) + "\n"
    (out_dir / "summary.txt").write_text(summary)
    return csv_path, summary


def read_report(csv_path: Path) -> list[RunResult]:
    """Parse results.csv back into RunResults (throughput is not persisted)."""
    with open(csv_path) as source:
        header = source.readline().rstrip("\n")
        if header != CSV_HEADER:
            raise ValueError(f"unexpected CSV header in {csv_path}")
        grouped: dict[str, list] = {}
        meta: dict[str, tuple] = {}
        order: list[str] = []
        for line in source:
            cells = line.rstrip("\n").split(",")
            run_id, mode, load = cells[0], cells[1], cells[2]
            if run_id not in grouped:
                grouped[run_id] = []
                meta[run_id] = (mode, load, int(cells[3]), int(cells[4]))
                order.append(run_id)
            restore_values = tuple(
                float(v) for v in cells[7 : 7 + _RESTORE_COLUMNS - 3]
            ) + tuple(int(v) for v in cells[7 + _RESTORE_COLUMNS - 3 :])
            grouped[run_id].append(
                RequestSample(int(cells[5]), float(cells[6]), restore_values)
            )
    results = []
    for run_id in order:
        mode, load, arena_pages, dirty_pages = meta[run_id]
        samples = grouped[run_id]
        results.append(
            RunResult(
                run_id=run_id,
                mode=mode,
                load=load,
                arena_pages=arena_pages,
                dirty_pages=dirty_pages,
                request_count=len(samples),
                repetitions=1,
                samples=samples,
                throughput_rps=1.0,
            )
        )
    return results


# ---------------------------------------------------------------------------
# CLI


def _parse_int_list(text: str) -> list[int]:
    return [int(part) for part in text.split(",") if part != ""]


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="bench", description="supervisor microbenchmark harness"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    sweep = sub.add_parser("sweep", help="latency sweeps over dirty count and arena size")
    sweep.add_argument("--mode", default="gh", help="comma-separated: gh,gh-nop,fork,base")
    sweep.add_argument("--out", required=True, type=Path)
    sweep.add_argument("--arena-pages", type=int, default=DEFAULT_ARENA_PAGES)
    sweep.add_argument(
        "--dirty-list",
        type=_parse_int_list,
        default=list(DEFAULT_DIRTY_PERCENTS),
        help="dirty percentages for sweep A, e.g. 0,10,20",
    )
    sweep.add_argument(
        "--arena-list", type=_parse_int_list, default=list(DEFAULT_ARENA_LIST),
        help="arena sizes (pages) for sweep B",
    )
    sweep.add_argument("--dirty-fixed", type=int, default=DEFAULT_DIRTY_FIXED)
    sweep.add_argument("--sweep", choices=("A", "B", "both"), default="both")
    sweep.add_argument("--load", default="low,high", help="comma-separated: low,high")
    sweep.add_argument("--requests", type=int, default=DEFAULT_REQUESTS)
    sweep.add_argument("--repetitions", type=int, default=1)
    sweep.add_argument(
        "--guest", default=None,
        help="guest command template; {arena} expands to the arena page count",
    )

    scaling = sub.add_parser("scaling", help="throughput vs concurrent pair count")
    scaling.add_argument("--mode", default="gh")
    scaling.add_argument("--out", required=True, type=Path)
    scaling.add_argument("--pairs", type=int, default=4, help="run 1..N pairs")
    scaling.add_argument("--repetitions", type=int, default=6)
    scaling.add_argument("--duration", type=float, default=90.0, help="seconds per run")
    scaling.add_argument("--arena-pages", type=int, default=10_000)
    scaling.add_argument("--dirty-fixed", type=int, default=2_000)

    isolation = sub.add_parser("isolation", help="secret retention probe per mode")
    isolation.add_argument("--mode", default="gh,gh-nop,fork,base")
    isolation.add_argument("--out", type=Path, default=None)
    isolation.add_argument("--arena-pages", type=int, default=2_000)
    isolation.add_argument("--repetitions", type=int, default=5)
    return parser


def _guest_factory(template: Optional[str]) -> Optional[Callable[[int], list[str]]]:
    if template is None:
        return None

    def make(arena_pages: int) -> list[str]:
        return [part.format(arena=arena_pages) for part in shlex.split(template)]

    return make


def _cmd_sweep(args) -> int:
    modes = args.mode.split(",")
    loads = args.load.split(",")
    specs = sweep_cells(
        args.sweep,
        modes,
        loads=loads,
        arena_pages=args.arena_pages,
        dirty_percents=args.dirty_list,
        arena_list=args.arena_list,
        dirty_fixed=args.dirty_fixed,
        request_count=args.requests,
        repetitions=args.repetitions,
    )
    results, failures = run_sweep(specs, _guest_factory(args.guest))
    csv_path, summary = emit_report(results, args.out)
    print(summary, end="")
    print(f"wrote {csv_path}")
    for spec, reason in failures:
        print(f"FAILED cell {spec.run_id}: {reason}")
    return 1 if failures else 0


def _cmd_scaling(args) -> int:
    counts = list(range(1, args.pairs + 1))
    rates = run_scaling(
        counts,
        mode=args.mode,
        arena_pages=args.arena_pages,
        dirty=args.dirty_fixed,
        duration_s=args.duration,
        repetitions=args.repetitions,
    )
    args.out.mkdir(parents=True, exist_ok=True)
    lines = ["pairs,mean_rps,stdev_rps"]
    for pairs in counts:
        mean, sd = rates[pairs]
        lines.append(f"{pairs},{mean:.3f},{sd:.3f}")
        print(f"pairs={pairs}: {mean:.2f} +- {sd:.2f} req/s")
    (args.out / "scaling.csv").write_text("\n".join(lines) + "\n")
    if 1 in rates and rates[1][0] > 0:
        best = max(counts)
        print(f"speedup {best}x pairs: {rates[best][0] / rates[1][0]:.2f}")
    return 0


def _cmd_isolation(args) -> int:
    import secrets as secrets_mod

    expectations = {"gh": False, "fork": False, "base": True, "gh-nop": True}
    failures = 0
    report_lines = []
    for mode in args.mode.split(","):
        for trial in range(args.repetitions):
            sup = Supervisor(
                mode=mode,
                command=default_guest_command(args.arena_pages),
                dummy_value={"op": "bench", "dirty": 4},
            )
            try:
                sup.spawn()
                sup.warmup()
                token = f"R1-{secrets_mod.token_hex(16)}"
                sup.request({"op": "store_secret", "token": token})
                found = sup.request({"op": "find_secret", "token": token}).result["found"]
            finally:
                sup.shutdown()
            want = expectations.get(mode)
            verdict = "ok" if found == want else "UNEXPECTED"
            if found != want:
                failures += 1
            line = f"{mode} trial {trial + 1}: found={found} expected={want} {verdict}"
            report_lines.append(line)
            print(line)
    if args.out:
        args.out.mkdir(parents=True, exist_ok=True)
        (args.out / "isolation.txt").write_text("\n".join(report_lines) + "\n")
    return 1 if failures else 0


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = _build_parser().parse_args(argv)
    if args.command == "sweep":
        return _cmd_sweep(args)
    if args.command == "scaling":
        return _cmd_scaling(args)
    return _cmd_isolation(args)


if __name__ == "__main__":
    sys.exit(main())
