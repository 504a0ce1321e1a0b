from __future__ import annotations

import numpy as np
import pytest

from splatloc.cli import EXIT_FAILURE, EXIT_OK, EXIT_VALIDATION, main
from splatloc.gaussians import save_map
from splatloc.geometry import PinholeIntrinsics
from splatloc.io import write_sequence
from splatloc.optimize import TrainView
from splatloc.pipeline import PipelineConfig, default_config_text

from conftest import random_map, random_pose


def test_print_default_config(capsys):
    assert main(["run", "--print-default-config"]) == EXIT_OK
    text = capsys.readouterr().out
    assert PipelineConfig.from_text(text).values == PipelineConfig.from_text("").values
    assert text.strip() == default_config_text().strip()


@pytest.mark.parametrize("argv", [
    [],
    ["run"],
    ["frobnicate"],
    ["optimize", "--config", "d", "--views", "x", "--out", "y"],
    ["loc-hgvl", "--refs", "r", "--queries", "q", "--out", "o", "--with-rendered", "maybe"],
])
def test_usage_errors_exit_1(argv, capsys):
    assert main(argv) == EXIT_VALIDATION
    assert "error:" in capsys.readouterr().err


def test_missing_config_exits_1(tmp_path, capsys):
    assert main(["run", "--config", str(tmp_path / "absent.ini")]) == EXIT_VALIDATION
    assert "not found" in capsys.readouterr().err


def test_invalid_config_exits_1(tmp_path, capsys):
    (tmp_path / "bad.ini").write_text("[scr]\ntrees = lots\n")
    assert main(["run", "--config", str(tmp_path / "bad.ini")]) == EXIT_VALIDATION
    assert "not a valid int" in capsys.readouterr().err


def test_unknown_stage_exits_1(tmp_path, capsys):
    (tmp_path / "c.ini").write_text("")
    assert main(["run", "--config", str(tmp_path / "c.ini"), "--stages", "dataset", "mapping"]) == EXIT_VALIDATION
    assert "unknown stages mapping" in capsys.readouterr().err


def test_corrupted_directory_dataset_fails_validation_before_stages(tmp_path, rng, capsys):
    K = PinholeIntrinsics(20, 20, 7.5, 5.5, 16, 12)
    views = [TrainView(rng.uniform(size=(12, 16, 3)), np.ones((12, 16)), random_pose(rng), K) for _ in range(2)]
    for sub in ("mapping", "queries"):
        write_sequence(tmp_path / "data" / sub, views)
    (tmp_path / "data" / "queries" / "images" / "000001.png").write_bytes(b"not a png")
    (tmp_path / "c.ini").write_text("[pipeline]\noutput = out\n[dataset]\nsource = directory\npath = data\n")
    assert main(["run", "--config", str(tmp_path / "c.ini")]) == EXIT_VALIDATION
    assert "000001.png" in capsys.readouterr().err
    assert not (tmp_path / "out").exists()


def test_stage_failure_exits_2(tmp_path, monkeypatch, capsys):
    from splatloc import pipeline

    def boom(ctx):
        raise RuntimeError("synthetic failure")
    monkeypatch.setitem(pipeline.RUNNERS, "dataset", boom)
    (tmp_path / "c.ini").write_text("[pipeline]\noutput = out\n")
    assert main(["run", "--config", str(tmp_path / "c.ini")]) == EXIT_FAILURE
    assert "stage 'dataset' failed" in capsys.readouterr().err


def test_map_info(tmp_path, rng, capsys):
    save_map(random_map(rng, 12), tmp_path / "m.ply")
    assert main(["map-info", str(tmp_path / "m.ply")]) == EXIT_OK
    assert "12" in capsys.readouterr().out
    (tmp_path / "bad.ply").write_bytes(b"ply\nformat garbage\n")
    assert main(["map-info", str(tmp_path / "bad.ply")]) == EXIT_VALIDATION


def test_output_override_is_relative_to_cwd(tmp_path, monkeypatch):
    from splatloc import pipeline
    seen = {}

    def record(cfg, threads=None, stages=None, progress=None):
        seen["out"] = cfg.output
        return []
    monkeypatch.setattr(pipeline, "run_pipeline", record)
    (tmp_path / "cfgdir").mkdir()
    (tmp_path / "cfgdir" / "c.ini").write_text("")
    monkeypatch.chdir(tmp_path)
    assert main(["run", "--config", "cfgdir/c.ini", "--output", "here"]) == EXIT_OK
    assert seen["out"] == (tmp_path / "here").resolve()
