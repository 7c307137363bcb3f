import pytest

from selfcheck import FULL_SIZES, QUICK_SIZES, SUITES, run_selfcheck


@pytest.mark.parametrize("group", sorted(SUITES))
def test_group_passes(group):
    report = run_selfcheck(group)
    assert report.results
    assert report.passed, report.table()
    assert all(r.group == group for r in report.results)


def test_unknown_group():
    with pytest.raises(KeyError):
        run_selfcheck("nope")


def test_failure_is_recorded(monkeypatch):
    def broken(_sizes) -> str:
        raise AssertionError("不一致")

    monkeypatch.setitem(SUITES, "broken", [broken])
    report = run_selfcheck("broken")
    assert not report.passed
    assert "AssertionError: 不一致" in report.table()
    assert report.table().endswith("共 1 项，失败 1 项")


def test_full_flag_selects_sizes(monkeypatch):
    seen = []

    def record(sizes) -> str:
        seen.append(sizes)
        return f"{sizes.matching_scenes} 个场景"

    monkeypatch.setitem(SUITES, "record", [record])
    run_selfcheck("record")
    report = run_selfcheck("record", full=True)
    assert seen == [QUICK_SIZES, FULL_SIZES]
    assert report.results[0].detail == "100 个场景"
    assert FULL_SIZES.clouds == 100 and FULL_SIZES.max_cloud_points == 100_000
    assert FULL_SIZES.residual_pairs == 10_000


def test_quick_details_report_sizes():
    details = {r.name: r.detail for r in run_selfcheck("targets").results}
    assert details["residual_roundtrip"] == "500 对"
    assert details["matching_matches_exhaustive"] == "5 个场景"


@pytest.mark.slow
@pytest.mark.parametrize("group", ["voxel", "geometry", "targets"])
def test_full_group_passes(group):
    report = run_selfcheck(group, full=True)
    assert report.passed, report.table()
