from __future__ import annotations

import os
from pathlib import Path

import pytest

from splatloc.evaluation import EvalReport, MethodResult, ThresholdSpec
from splatloc.report import REPORT_FILES, ReportError, emit_report, recall_csv

GOLDEN = Path(__file__).parent / "golden" / "report"


def fixture_report() -> EvalReport:
    return EvalReport(
        thresholds=ThresholdSpec(),
        methods=[
            MethodResult("hgvl_keyframes", [(0.4, 0.01), (2.0, 0.04), (4.0, 0.2), None]),
            MethodResult("hgvl_augmented", [(0.3, 0.01), (0.0, 0.0), (1.0, 0.04), (20.0, 2.0)]),
        ],
        ate={"hgvl_augmented": (0.0123456789, 0.05), "hgvl_keyframes": (0.25, 0.5)},
        psnr={"b": 27.034, "a": 26.14, "c": float("inf")},
    )


def test_empty_report_writes_headers_only(tmp_path):
    paths = emit_report(EvalReport(), tmp_path)
    assert [p.name for p in paths] == list(REPORT_FILES)
    assert (tmp_path / "recall.csv").read_text() == \
        "method,0.5deg/0.02m,1.5deg/0.05m,3deg/0.1m,5deg/0.5m,10deg/1m\n"
    assert (tmp_path / "ate.csv").read_text() == "trajectory,rmse_m,max_m\n"
    assert (tmp_path / "psnr.csv").read_text() == "config,psnr_db\n"
    svg = (tmp_path / "pose_errors.svg").read_text()
    assert svg.startswith("<?xml") and "<svg" in svg and "<script" not in svg


def test_csv_contents_hand_written():
    r = fixture_report()
    assert recall_csv(r).splitlines()[1:] == [
        "hgvl_keyframes,25.0,25.0,50.0,75.0,75.0",
        "hgvl_augmented,50.0,75.0,75.0,75.0,75.0",
    ]


def test_report_matches_golden_files(tmp_path):
    emit_report(fixture_report(), tmp_path)
    if os.environ.get("SPLATLOC_UPDATE_GOLDEN"):
        GOLDEN.mkdir(parents=True, exist_ok=True)
        for name in REPORT_FILES:
            (GOLDEN / name).write_bytes((tmp_path / name).read_bytes())
    for name in REPORT_FILES:
        assert (tmp_path / name).read_bytes() == (GOLDEN / name).read_bytes(), name


def test_report_bytes_are_deterministic(tmp_path):
    emit_report(fixture_report(), tmp_path / "one")
    emit_report(fixture_report(), tmp_path / "two")
    for name in REPORT_FILES:
        assert (tmp_path / "one" / name).read_bytes() == (tmp_path / "two" / name).read_bytes()


def test_io_error_names_the_path(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(ReportError) as info:
        emit_report(EvalReport(), blocker / "sub")
    assert str(blocker / "sub") in str(info.value)
