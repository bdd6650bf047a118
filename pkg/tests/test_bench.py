"""Measurement harness: workload specs, statistics, CSV round-trips, and cells."""

import statistics

import numpy as np
import pytest

from rewind.bench import (
    CSV_HEADER,
    WARMUP_DISCARD,
    RequestSample,
    RunResult,
    WorkloadSpec,
    bootstrap_slope_ci,
    emit_report,
    linear_fit,
    percentile_summary,
    read_report,
    run_cell,
    run_sweep,
    spearman,
    sweep_cells,
)

# ------------------------------------------------------------- workload spec


def test_spec_requires_exactly_one_dirty_axis():
    with pytest.raises(ValueError):
        WorkloadSpec(mode="gh", load="low", arena_pages=100)
    with pytest.raises(ValueError):
        WorkloadSpec(mode="gh", load="low", arena_pages=100, dirty_count=1, dirty_fraction=0.5)


def test_spec_validates_mode_load_and_sizes():
    with pytest.raises(ValueError):
        WorkloadSpec(mode="warp", load="low", arena_pages=100, dirty_count=1)
    with pytest.raises(ValueError):
        WorkloadSpec(mode="gh", load="medium", arena_pages=100, dirty_count=1)
    with pytest.raises(ValueError):
        WorkloadSpec(mode="gh", load="low", arena_pages=0, dirty_count=1)


def test_spec_dirty_pages_resolution():
    by_count = WorkloadSpec(mode="gh", load="low", arena_pages=1000, dirty_count=123)
    assert by_count.dirty_pages == 123
    by_fraction = WorkloadSpec(mode="gh", load="low", arena_pages=1000, dirty_fraction=0.5)
    assert by_fraction.dirty_pages == 500
    zero = WorkloadSpec(mode="gh", load="low", arena_pages=1000, dirty_fraction=0.0)
    assert zero.dirty_pages == 0


def test_run_id_is_self_describing():
    spec = WorkloadSpec(mode="fork", load="high", arena_pages=1000, dirty_count=10)
    assert spec.mode in spec.run_id
    assert "high" in spec.run_id
    assert "1000" in spec.run_id


def test_sweep_cells_cover_the_grid():
    specs = sweep_cells(
        "A",
        modes=("gh", "base"),
        loads=("low",),
        arena_pages=1000,
        dirty_percents=(0, 50, 100),
        request_count=10,
    )
    assert len(specs) == 2 * 1 * 3
    assert {spec.dirty_pages for spec in specs} == {0, 500, 1000}
    both = sweep_cells(
        "both",
        modes=("gh",),
        loads=("low", "high"),
        arena_pages=1000,
        dirty_percents=(0, 100),
        arena_list=(100, 200),
        dirty_fixed=50,
        request_count=10,
    )
    arenas = {spec.arena_pages for spec in both}
    assert {100, 200} <= arenas


# ---------------------------------------------------------------- statistics


def test_percentile_summary_on_known_data():
    summary = percentile_summary(list(range(1, 101)))
    assert summary["median"] == pytest.approx(50.5)
    assert summary["p90"] == pytest.approx(90.1)
    assert summary["mean"] == pytest.approx(50.5)
    assert summary["cov"] == pytest.approx(
        statistics.pstdev(range(1, 101)) / 50.5, rel=0.05
    )


def test_linear_fit_recovers_a_line():
    x = list(range(20))
    y = [3.0 * v + 7.0 for v in x]
    slope, intercept, r2 = linear_fit(x, y)
    assert slope == pytest.approx(3.0)
    assert intercept == pytest.approx(7.0)
    assert r2 == pytest.approx(1.0)


def test_linear_fit_r2_degrades_with_noise():
    rng = np.random.default_rng(7)
    x = np.arange(200.0)
    clean = 2.0 * x
    noisy = clean + rng.normal(0, 300.0, size=x.size)
    _, _, r2_clean = linear_fit(x, clean)
    _, _, r2_noisy = linear_fit(x, noisy)
    assert r2_clean > 0.999
    assert r2_noisy < r2_clean


def test_spearman_rank_correlation_extremes():
    x = [1, 2, 3, 4, 5]
    assert spearman(x, [10, 20, 30, 40, 50]) == pytest.approx(1.0)
    assert spearman(x, [50, 40, 30, 20, 10]) == pytest.approx(-1.0)
    # monotone but nonlinear is still a perfect rank correlation
    assert spearman(x, [1, 8, 27, 64, 125]) == pytest.approx(1.0)


def test_bootstrap_ci_brackets_the_truth():
    rng = np.random.default_rng(3)
    x = np.tile(np.arange(10.0), 8)
    flat = rng.normal(5.0, 1.0, size=x.size)
    lo, hi = bootstrap_slope_ci(x, flat)
    assert lo <= 0.0 <= hi
    sloped = 4.0 * x + rng.normal(0, 1.0, size=x.size)
    lo, hi = bootstrap_slope_ci(x, sloped)
    assert lo > 0.0
    assert lo <= 4.0 <= hi


# ------------------------------------------------------------ CSV round trip


def test_csv_header_is_pinned():
    assert CSV_HEADER == (
        "run_id,mode,load,arena_pages,dirty_pages,request_idx,latency_us,"
        "restore_total_us,restore_interrupt_us,restore_read_maps_us,"
        "restore_scan_us,restore_diff_us,restore_brk_us,restore_mmap_us,"
        "restore_munmap_us,restore_madvise_us,restore_mprotect_us,"
        "restore_pages_us,restore_regs_us,restore_sd_clear_us,"
        "restore_detach_us,pages_scanned,pages_restored,syscalls_injected"
    )


def _synthetic_result(run_id="gh-low-a100-d10", n=8):
    samples = []
    for idx in range(n):
        restore = tuple([100.5 + idx] + [float(j) for j in range(13)] + [50, 10, 2])
        samples.append(RequestSample(request_idx=idx, latency_us=200.0 + idx, restore_values=restore))
    return RunResult(
        run_id=run_id,
        mode="gh",
        load="low",
        arena_pages=100,
        dirty_pages=10,
        request_count=n,
        repetitions=1,
        samples=samples,
        throughput_rps=123.4,
    )


def test_emit_and_read_report_are_lossless(tmp_path):
    results = [_synthetic_result(), _synthetic_result(run_id="gh-low-a200-d20")]
    csv_path, summary = emit_report(results, tmp_path)
    assert csv_path.exists()
    assert "gh-low-a100-d10" in summary

    parsed = read_report(csv_path)
    assert [r.run_id for r in parsed] == [r.run_id for r in results]
    for got, want in zip(parsed, results):
        assert got.samples == want.samples
        assert got.arena_pages == want.arena_pages
        assert got.dirty_pages == want.dirty_pages

    # emitting the parsed results again reproduces the file byte for byte
    second_path, _ = emit_report(parsed, tmp_path / "again")
    assert second_path.read_bytes() == csv_path.read_bytes()


def test_read_report_rejects_foreign_files(tmp_path):
    other = tmp_path / "other.csv"
    other.write_text("a,b,c\n1,2,3\n")
    with pytest.raises(ValueError):
        read_report(other)


def test_run_result_validates_sample_count():
    with pytest.raises(ValueError):
        RunResult(
            run_id="x",
            mode="gh",
            load="low",
            arena_pages=10,
            dirty_pages=1,
            request_count=5,
            repetitions=1,
            samples=[],
            throughput_rps=1.0,
        )


def test_latency_accessor_discards_warmup():
    result = _synthetic_result(n=8)
    kept = result.latencies_us()
    assert len(kept) == 8 - WARMUP_DISCARD
    assert kept[0] == 200.0 + WARMUP_DISCARD
    assert len(result.latencies_us(discard_warmup=False)) == 8


# ------------------------------------------------------------- live cells


def test_run_cell_shape_on_live_guest():
    spec = WorkloadSpec(mode="base", load="low", arena_pages=256, dirty_count=16, request_count=8)
    result = run_cell(spec)
    assert len(result.samples) == 8
    assert result.throughput_rps > 0
    assert all(s.latency_us > 0 for s in result.samples)
    # base mode has no rollback work to report
    assert all(s.restore_values[0] == 0 for s in result.samples)


def test_gh_cell_low_load_hides_restore_high_load_pays_it():
    low = run_cell(
        WorkloadSpec(mode="gh", load="low", arena_pages=800, dirty_count=400, request_count=12)
    )
    high = run_cell(
        WorkloadSpec(mode="gh", load="high", arena_pages=800, dirty_count=400, request_count=12)
    )
    median_low = statistics.median(low.latencies_us())
    median_high = statistics.median(high.latencies_us())
    assert median_low <= median_high
    # every request produced a rollback report in gh mode
    assert len(low.reports) == 12


def test_gh_cell_restores_a_constant_page_population():
    result = run_cell(
        WorkloadSpec(mode="gh", load="low", arena_pages=800, dirty_count=200, request_count=10)
    )
    steady = [s.restore_values[15] for s in result.samples[WARMUP_DISCARD:]]
    center = statistics.median(steady)
    assert all(abs(v - center) <= 2 for v in steady)


def test_run_sweep_records_failures_and_continues():
    good = WorkloadSpec(mode="base", load="low", arena_pages=128, dirty_count=4, request_count=6)
    results, failures = run_sweep([good], guest_command=lambda arena: ["/nonexistent"])
    assert results == []
    assert len(failures) == 1
    results, failures = run_sweep([good])
    assert len(results) == 1 and not failures
