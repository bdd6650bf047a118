"""Rolling a guest back to its snapshot and proving nothing is left behind."""

import pytest

from helpers import compare_to_snapshot

from rewind.restore import CSV_STEP_COLUMNS, REPORT_STEPS


@pytest.fixture
def gh(make_supervisor):
    return make_supervisor("gh", arena_pages=1_000, skip_same_domain=True)


def _mutate_and_restore(sup, ops):
    """Run ops in one isolation domain (no interleaved restores), then roll back."""
    for op in ops:
        envelope = sup.request(op, domain="batch")
        assert envelope.error is None, envelope.error
    report = sup.restore_now()
    assert report is not None
    return report


def test_restore_after_writes_brings_memory_back(gh):
    report = _mutate_and_restore(gh, [{"op": "bench", "dirty": 64}])
    assert report.pages_restored >= 64
    assert compare_to_snapshot(gh) == []


def test_restore_reverses_new_mapping(gh):
    addr = gh.request({"op": "mmap", "pages": 16}, domain="batch").result["addr"]
    report = gh.restore_now()
    assert report.layout_changes >= 1
    assert gh.restorer.snapshot.layout.region_at(addr) is None
    assert compare_to_snapshot(gh) == []


def test_restore_reverses_brk_growth(gh):
    before = gh.request({"op": "brk_grow", "pages": 8}, domain="batch").result
    assert before["brk"] > before["old_brk"]
    report = gh.restore_now()
    assert report.layout_changes >= 1
    assert compare_to_snapshot(gh) == []


def test_restore_reverses_unmap_of_fresh_region(gh):
    addr = gh.request({"op": "mmap", "pages": 8}, domain="batch").result["addr"]
    gh.request({"op": "munmap", "addr": addr}, domain="batch")
    gh.restore_now()
    assert compare_to_snapshot(gh) == []


def test_second_restore_finds_nothing_to_do(gh):
    _mutate_and_restore(gh, [{"op": "bench", "dirty": 32}])
    second = gh.restore_now()
    assert second.pages_restored == 0
    assert second.syscalls_injected == 0
    assert second.delta is None or second.delta.empty
    # guest still serves afterwards
    assert gh.request({"op": "echo", "x": 1}).result["x"] == 1


def test_report_steps_are_complete_and_consistent(gh):
    report = _mutate_and_restore(gh, [{"op": "bench", "dirty": 128}])
    assert set(report.steps) == set(REPORT_STEPS)
    assert report.consistent(tolerance=0.05)
    values = report.csv_values()
    assert len(values) == 1 + len(CSV_STEP_COLUMNS) + 3
    assert values[0] == round(report.total_us, 1)


def test_restore_outcome_independent_of_madvise_ordering(make_supervisor):
    """Dropping newly-paged memory before vs after register restore must not
    change the outcome, only potentially the timing."""
    for flip in (False, True):
        sup = make_supervisor(
            "gh", arena_pages=600, skip_same_domain=True, madvise_before_registers=flip
        )
        sup.request({"op": "bench", "dirty": 50}, domain="batch")
        sup.request({"op": "mmap", "pages": 12}, domain="batch")
        sup.request({"op": "leak", "bytes": 300_000}, domain="batch")
        sup.restore_now()
        assert compare_to_snapshot(sup) == [], f"madvise_before_registers={flip}"
        sup.shutdown()


def test_full_stack_zeroing_still_restores_faithfully(make_supervisor):
    sup = make_supervisor("gh", arena_pages=600, skip_same_domain=True, zero_full_stack=True)
    sup.request({"op": "bench", "dirty": 40}, domain="batch")
    sup.restore_now()
    assert compare_to_snapshot(sup) == []


def test_tracking_only_mode_never_repairs(make_supervisor):
    sup = make_supervisor("gh-nop", arena_pages=600)
    first = sup.request({"op": "leak", "bytes": 500_000}).result["leaked_total"]
    second = sup.request({"op": "leak", "bytes": 500_000}).result["leaked_total"]
    # state persists: the scan-only mode observes but never rolls back
    assert second == first + 500_000
    assert len(sup.reports) >= 2
    for report in sup.reports:
        assert report.pages_restored == 0
        assert report.syscalls_injected == 0
    assert sup.reports[-1].pages_scanned > 0


def test_restore_now_is_gh_only(make_supervisor):
    base = make_supervisor("base", arena_pages=256)
    assert base.restore_now() is None
    nop = make_supervisor("gh-nop", arena_pages=256)
    assert nop.restore_now() is None
