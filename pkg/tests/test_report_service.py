import json

import pandas as pd
import pytest

from experiment_models import Check, ExperimentReport
from report_service import aggregate_rows, render_markdown, write_report

ROWS = [
    {"seed": 0, "mode": "exact_redirect", "accuracy": 1.0, "residual": 0.01},
    {"seed": 1, "mode": "exact_redirect", "accuracy": 0.5, "residual": None},
    {"seed": 0, "mode": "paper_strict", "accuracy": 0.75, "residual": 0.03},
]

def _report(name="demo"):
    return ExperimentReport(
        experiment="edit_locality",
        name=name,
        config_hash="ab" * 32,
        rows=ROWS,
        aggregates=aggregate_rows(ROWS, ["mode"], ["accuracy", "residual"]),
        checks=[Check(name="retention", claim="others intact", value=0.995, threshold=">= 0.99", passed=True),
                Check(name="edited_accuracy", claim="edits land", value=0.5, threshold=">= 1", passed=False)],
        extras={"note": "small"},
    )

def test_aggregate_by_group():
    records = {r["mode"]: r for r in aggregate_rows(ROWS, ["mode"], ["accuracy", "residual"])}
    exact = records["exact_redirect"]
    assert exact["accuracy_mean"] == pytest.approx(0.75)
    assert exact["accuracy_min"] == 0.5
    assert exact["accuracy_max"] == 1.0
    assert exact["residual_mean"] == pytest.approx(0.01)
    assert exact["count"] == 2
    assert records["paper_strict"]["count"] == 1

def test_aggregate_matches_recomputation():
    frame = pd.DataFrame(ROWS)
    (record,) = aggregate_rows(ROWS, [], ["accuracy"])
    assert record["accuracy_mean"] == pytest.approx(frame["accuracy"].mean())
    assert record["count"] == 3

def test_aggregate_missing_values_become_none():
    rows = [{"mode": "a", "value": None}, {"mode": "a", "value": None}]
    (record,) = aggregate_rows(rows, ["mode"], ["value"])
    assert record["value_mean"] is None

def test_aggregate_empty_inputs():
    assert aggregate_rows([], ["mode"], ["accuracy"]) == []
    assert aggregate_rows(ROWS, ["mode"], ["absent"]) == []

def test_render_markdown():
    text = render_markdown(_report())
    assert text.startswith("# demo (edit_locality)")
    assert "| retention | others intact | 0.995 | >= 0.99 | PASS |" in text
    assert "FAIL" in text
    assert "- note: small" in text

def test_write_report_files(tmp_path):
    paths = write_report(_report(), tmp_path / "out")
    assert {p.name for p in paths.values()} == {"demo.csv", "demo.json", "demo.md"}
    raw = paths["csv"].read_bytes()
    assert raw.count(b"\r\n") == len(ROWS) + 1
    assert raw.replace(b"\r\n", b"").count(b"\n") == 0
    header = raw.split(b"\r\n")[0].decode()
    assert header.split(",")[0] == "config_hash"
    loaded = json.loads(paths["json"].read_text())
    assert loaded["config_hash"] == "ab" * 32
    assert len(loaded["checks"]) == 2

def test_write_report_is_deterministic(tmp_path):
    first = write_report(_report(), tmp_path / "a")
    second = write_report(_report(), tmp_path / "b")
    for kind in ("csv", "json", "markdown"):
        assert first[kind].read_bytes() == second[kind].read_bytes()

def test_write_report_rejects_unsafe_name(tmp_path):
    paths = write_report(_report(name="../escape"), tmp_path)
    assert paths["csv"].name == "edit_locality.csv"
    assert paths["csv"].parent == tmp_path
