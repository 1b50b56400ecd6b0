import os

import numpy as np
import pytest

from cartyield.cli import main
from cartyield.pipeline import ARTIFACTS, PipelineConfig, read_grid, read_yield_points
from cartyield.yields import YieldPoints, grid_yield

SMALL = ["--crew", "2", "--n-rows", "12"]


@pytest.fixture(scope="module")
def sim_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("sim")
    assert main(["simulate", "--seed", "9", "--days", "2", "--out", str(out), *SMALL]) == 0
    return out


@pytest.fixture(scope="module")
def run_dir(sim_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert main(["run", "--data", str(sim_dir), "--days", "2", "--out", str(out)]) == 0
    return out


def test_run_writes_every_artifact(run_dir):
    for day in ("day01", "day02"):
        present = set(os.listdir(run_dir / day))
        assert set(ARTIFACTS) <= present


def test_evaluate_prints_report(sim_dir, run_dir, tmp_path, capsys):
    rep = tmp_path / "report.txt"
    rc = main(["evaluate", "--run", str(run_dir / "day01"), "--truth", str(sim_dir / "day01" / "truth"),
               "--out", str(rep)])
    assert rc == 0
    assert rep.read_text().strip()
    assert capsys.readouterr().out.strip()


def test_evaluate_with_wrong_truth_fails(sim_dir, run_dir, capsys):
    rc = main(["evaluate", "--run", str(run_dir / "day01"), "--truth", str(sim_dir / "day02" / "truth")])
    assert rc == 1
    assert "evaluate error" in capsys.readouterr().err


def test_evaluate_needs_pairs(sim_dir, run_dir, capsys):
    rc = main(["evaluate", "--run", str(run_dir / "day01"), "--run", str(run_dir / "day02"),
               "--truth", str(sim_dir / "day01" / "truth")])
    assert rc == 1


def test_missing_field_leaves_no_output(sim_dir, tmp_path, capsys):
    out = tmp_path / "out"
    missing = tmp_path / "nowhere" / "field.txt"
    rc = main(["run", "--field", str(missing), "--logs", str(sim_dir / "day01" / "logs"),
               "--calibration", str(sim_dir / "day01" / "calibration"), "--out", str(out)])
    assert rc == 1
    assert str(missing) in capsys.readouterr().err
    assert list(tmp_path.iterdir()) == []


def test_season_of_one_day_is_that_day(run_dir, tmp_path):
    out = tmp_path / "season.txt"
    assert main(["season", str(run_dir / "day01"), "--out", str(out)]) == 0
    day = read_grid(run_dir / "day01" / "grid.txt")
    season = read_grid(out)
    assert np.array_equal(season.mass, day.mass)
    assert season.cart_ids == day.cart_ids


def test_season_equals_grid_of_all_points(run_dir, tmp_path):
    out = tmp_path / "season.txt"
    assert main(["season", str(run_dir / "day01"), str(run_dir / "day02"), "--out", str(out)]) == 0
    season = read_grid(out)
    union = YieldPoints.concat([read_yield_points(run_dir / d / "yield_points.csv") for d in ("day01", "day02")])
    assert np.array_equal(grid_yield(union, season.grid).mass, season.mass)


def test_config_round_trip(tmp_path):
    cfg = PipelineConfig(field="f.txt", logs="l", calibration="c", out="o", resolution=1.5, continuity=7.5, seed=3)
    (tmp_path / "p.txt").write_text(cfg.to_kv())
    assert PipelineConfig.load(tmp_path / "p.txt") == cfg


def test_unknown_config_key_is_rejected(tmp_path, capsys):
    (tmp_path / "p.txt").write_text("resolution = 2\nbogus = 1\n")
    rc = main(["run", "--config", str(tmp_path / "p.txt"), "--out", str(tmp_path / "o")])
    assert rc == 1
    assert "bogus" in capsys.readouterr().err


def test_config_file_reproduces_run(run_dir, tmp_path):
    cfg = PipelineConfig.load(run_dir / "day01" / "config.txt")
    again = tmp_path / "again"
    assert main(["run", "--config", str(run_dir / "day01" / "config.txt"), "--out", str(again)]) == 0
    for name in ("yield_points.csv", "grid.txt", "stage4_rows.csv"):
        assert (again / name).read_bytes() == (run_dir / "day01" / name).read_bytes()
    assert cfg.out != str(again)
