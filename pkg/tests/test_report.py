import csv
import io
import json

import pytest

from tfms.baseline import TruncationConfig
from tfms.errors import ReportFormatError, ReportMismatchError
from tfms.harness import MATCHERS, TfmsConfig, run
from tfms.report import SimReport, compare, format_table, summarize


@pytest.fixture(scope="module")
def report(small_workload):
    events, visits = small_workload
    return run(events, visits, MATCHERS, TruncationConfig(m=2, k=4, n=10), TfmsConfig(topn=10), workload="abc")


def test_summarize():
    assert summarize([])["count"] == 0
    s = summarize([1, 2, 3, 4])
    assert s["count"] == 4
    assert s["mean"] == 2.5
    assert s["p50"] == 2.5
    assert s["max"] == 4.0


def test_json_round_trip(report, tmp_path):
    json_path, csv_path = report.write(tmp_path)
    loaded = SimReport.read(json_path)
    assert loaded.to_json() == report.to_json()
    data = json.loads(json_path.read_text())
    assert set(data["comparison"]) == set(MATCHERS) - {"truncated"}
    assert data["cost"]["identity_error"] == report.cost.identity_error


def test_csv_rows(report):
    rows = list(csv.reader(io.StringIO(report.to_csv())))
    assert rows[0] == ["matcher", "metric", "value"]
    metrics = {(r[0], r[1]) for r in rows[1:]}
    assert ("oracle", "rpm") in metrics
    assert ("tfms", "nearline.staleness.p90") in metrics
    assert ("truncated", "winning_impressions.keywords") in metrics
    assert ("cost", "relative.tfms_total") in metrics


def test_compare_same_report_is_all_zero(report):
    deltas = compare(report, report)
    assert set(deltas) == set(MATCHERS)
    for row in deltas.values():
        assert all(v == 0.0 for v in row.values())


def test_compare_single_matcher_reports(small_workload):
    events, visits = small_workload
    tight = TruncationConfig(m=2, k=4, n=10)
    a = run(events, visits, ["truncated"], tight, workload="abc")
    b = run(events, visits, ["oracle"], tight, workload="abc")
    deltas = compare(a, b)
    row = deltas["truncated->oracle"]
    assert row["rpm_pct"] >= 0
    for t in ("retargeting", "keywords", "demographic"):
        assert f"winning_impressions.{t}_pct" in row
    table = format_table(deltas)
    assert table.splitlines()[1].startswith("truncated->oracle")


def test_compare_rejects_other_workload(report):
    other = SimReport.from_dict({**report.to_dict(), "workload_checksum": "zzz"})
    with pytest.raises(ReportMismatchError, match="workload_mismatch"):
        compare(report, other)


def test_format_table_marks_undefined_deltas():
    text = format_table({"x": {"rpm_pct": None, "recall_at_n_diff": 0.5}})
    assert text.splitlines()[1] == "x\t+0.50\tn/a"


@pytest.mark.parametrize(
    "content",
    [
        b'{"matchers": ',
        b"[]",
        b'{"seed": 0}',
        b"\xff\xfe",
        b'{"workload_checksum": "a", "seed": 0, "truncation": {}, "tfms": {},'
        b' "requests": 1, "matchers": {"x": 3}}',
    ],
)
def test_read_rejects_malformed_report(tmp_path, content):
    path = tmp_path / "report.json"
    path.write_bytes(content)
    with pytest.raises(ReportFormatError, match="bad_report"):
        SimReport.read(path)
